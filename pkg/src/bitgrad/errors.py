"""Exception taxonomy shared across the toolkit."""


class BitgradError(Exception):
    """Base class for all bitgrad errors."""


class ShapeError(BitgradError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(BitgradError, ValueError):
    """Invalid configuration key, value, or combination."""


class NumericError(BitgradError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class EncodingError(BitgradError, ValueError):
    """A value cannot be represented in the requested encoding (e.g. non-binary bit-pack input)."""


class FormatError(BitgradError, ValueError):
    """A file does not follow the expected on-disk format."""


class IntegrityError(FormatError):
    """Checksum mismatch or truncation: the file content is corrupt."""


class VersionError(FormatError):
    """The file declares a format version newer than this code supports."""
