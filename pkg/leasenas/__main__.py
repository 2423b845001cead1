# __main__.py
# LeaSE Engine - python -m leasenas
# Created by Digital COE Gen AI Team

import sys

from leasenas.main import main

sys.exit(main())
