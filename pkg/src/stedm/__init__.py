"""Layout-conditioned diffusion with style vectors extracted from unlabeled images."""

from .errors import ConfigError, DataError, ParameterError, SamplingError, ShapeError, StedmError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "ParameterError", "SamplingError", "ShapeError", "StedmError",
           "__version__"]
