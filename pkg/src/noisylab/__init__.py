"""Joint camera-noise modeling and denoising from pairs of noisy raw images."""

from .engine import GradTape, Tensor, orthogonal_init
from .errors import (ConfigError, DivergenceError, DomainError, FormatError,
                     NoisylabError, ShapeError, TapeError, UnknownKeyError)

__version__ = "0.1.0"
