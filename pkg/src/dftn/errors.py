"""Exception types shared across the package."""


class DftnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DftnError, ValueError):
    """An array argument has the wrong rank or incompatible dimensions."""


class DataFormatError(DftnError, ValueError):
    """A file is not in the expected container format (bad magic, unknown version)."""


class CorruptionError(DftnError, ValueError):
    """A file is in the right format but its contents are damaged (truncation, checksum mismatch)."""


class ConfigError(DftnError, ValueError):
    """A configuration mapping contains unknown keys or invalid values."""


class DivergenceError(DftnError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
