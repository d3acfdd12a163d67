"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: contract/shape/config problems exit
with 1, numeric failures (non-finite values, failed gradient checks)
with 2.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An argument value is outside its documented domain."""


class ConfigurationError(ValueError):
    """A config object is internally inconsistent or unsupported."""


class ContractError(ValueError):
    """Caller broke an API contract (wrong tape, mismatched config, ...)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed a numeric check."""


class TensorFileError(IOError):
    """Base class for tensor container format errors."""


class BadMagicError(TensorFileError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(TensorFileError):
    """File ends before the declared payload is complete."""


class UnsupportedFormatError(TensorFileError):
    """Recognized container but unknown version, dtype code, or trailing bytes."""
