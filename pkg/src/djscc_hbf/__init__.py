"""Multi-user semantic CSI feedback with learned hybrid beamforming."""

from .config import Config, ConfigError, preset
from .numeric import ComplexGrid, DegenerateInputError, DimensionError, NumericError

__all__ = ["Config", "ConfigError", "preset", "ComplexGrid", "DegenerateInputError",
           "DimensionError", "NumericError"]
__version__ = "0.1.0"
