"""Exception types shared across the package.

The CLI maps these onto exit codes, so raising the right class matters:
ConfigError -> 2, FormatError/UnknownKeyError -> 3, DivergenceError -> 4.
"""


class NoisylabError(Exception):
    """Base class for all package errors."""


class ShapeError(NoisylabError, ValueError):
    """Operands have incompatible or invalid shapes."""


class DomainError(NoisylabError, ValueError):
    """An input is outside an op's mathematical domain (e.g. log of <= 0)."""


class TapeError(NoisylabError, RuntimeError):
    """Gradient tape misuse: consumed twice, or backward on a non-scalar."""


class FormatError(NoisylabError, ValueError):
    """A binary file failed validation (bad magic, version, truncation)."""


class UnknownKeyError(NoisylabError, KeyError):
    """A camera or ISO key is not present in a model's conditioning tables."""


class ConfigError(NoisylabError, ValueError):
    """Invalid run configuration (bad flag value, mode/data mismatch)."""


class DivergenceError(NoisylabError, RuntimeError):
    """Training diverged; carries the epoch and loss mode for reporting."""

    def __init__(self, epoch: int, mode: str, detail: str = ""):
        self.epoch = epoch
        self.mode = mode
        msg = f"training diverged at epoch {epoch} (mode={mode})"
        if detail:
            msg += ": " + detail
        super().__init__(msg)


class NonFiniteGradientWarning(UserWarning):
    """Raised as a warning when an optimizer step is skipped due to NaN/inf."""
