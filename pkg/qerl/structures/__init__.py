from .interval import *
from .coded_enum import *
