# Command Package
# Created by Digital COE Gen AI Team
