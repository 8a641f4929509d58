#!/usr/bin/env python3

###################################################################
#
# Speede control commandline client package
#
# Compression toolkit for deformable Gaussian splatting models
#
###################################################################

__version__ = "0.3.0"
__license__ = "MIT"

from .general.general import LOGGER, SpeedeError
from .speede_ctl import main, run
