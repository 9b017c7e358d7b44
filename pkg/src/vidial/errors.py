"""Exception types shared across the package."""


class VidialError(Exception):
    """Base class for all package errors."""


class DimensionError(VidialError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(VidialError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(VidialError, ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class ConfigError(VidialError, ValueError):
    """Invalid configuration value or combination."""


class VocabularyError(VidialError, ValueError):
    """Token index outside the vocabulary, or malformed vocabulary."""


class DataError(VidialError, ValueError):
    """Malformed dataset content (missing markers, empty corpus, bad split)."""


class FormatError(VidialError, ValueError):
    """Malformed binary feature file (bad magic, version, or payload length)."""


class TrainingDiverged(VidialError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class NumericWarning(RuntimeWarning):
    """A value was clamped or substituted to keep arithmetic well-defined."""
