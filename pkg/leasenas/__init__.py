# LeaSE Engine
# Created by Digital COE Gen AI Team

__version__ = "1.0.0"
