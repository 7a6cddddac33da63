__all__ = ["cli", "config", "ingest"]

from .cli import *
from .config import *
from .ingest import *
