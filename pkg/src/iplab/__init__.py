__all__ = ["control", "fit", "interface", "ipcurve", "metrics", "model", "sim", "spectral"]

from .control import *
from .fit import *
from .interface import *
from .ipcurve import *
from .metrics import *
from .model import *
from .sim import *
from .spectral import *
