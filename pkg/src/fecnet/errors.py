"""Exception types raised across the package."""


class FECError(Exception):
    """Base class for every error raised by fecnet."""


class DimensionError(FECError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(FECError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(FECError, ValueError):
    """A layer or model configuration cannot be realised."""


class ContractError(FECError, RuntimeError):
    """A caller broke a documented precondition."""


class CorruptCheckpointError(FECError, IOError):
    """A checkpoint file failed magic, version, size or checksum checks."""


class FormatError(FECError, ValueError):
    """An input data file is malformed."""


class NonFiniteError(FECError, FloatingPointError):
    """Training produced a NaN or infinite value."""
