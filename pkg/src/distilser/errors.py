"""Exception types shared across the package."""


class DistilSerError(Exception):
    """Base class for all package errors."""


class ShapeError(DistilSerError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(DistilSerError):
    """A value that must be finite contains NaN or Inf."""


class AudioFormatError(DistilSerError):
    """A WAV file does not match the PCM16 mono contract."""


class SilentSignalError(DistilSerError):
    """A signal required to carry power is (near) silent."""


class ManifestError(DistilSerError):
    """A manifest file is malformed or violates its invariants."""


class CheckpointError(DistilSerError):
    """A checkpoint file is corrupt, truncated or of the wrong version."""


class ConfigError(DistilSerError):
    """A configuration value or combination is invalid."""
