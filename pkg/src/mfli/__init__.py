"""Multifaceted learnable-index retrieval: training, indexing, and serving."""

from .config import Config, load_config
from .errors import MFLIError

__version__ = "0.1.0"

__all__ = ["Config", "MFLIError", "load_config", "__version__"]
