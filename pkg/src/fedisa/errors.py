"""Exception hierarchy shared across the package."""


class FedisaError(Exception):
    """Base class for all package errors."""


class DimensionError(FedisaError, ValueError):
    pass


class ArchitectureError(FedisaError, ValueError):
    pass


class DomainError(FedisaError, ValueError):
    pass


class InsufficientDataError(FedisaError, ValueError):
    pass


class EmptyDatasetError(FedisaError, ValueError):
    pass


class UnsupportedModeError(FedisaError, RuntimeError):
    pass


class SchemaError(FedisaError, ValueError):
    """Input file does not have the expected columns."""


class ImputationError(FedisaError, ValueError):
    pass


class ReductionError(FedisaError, ValueError):
    pass


class PartitionError(FedisaError, ValueError):
    pass


class ProtocolError(FedisaError, ValueError):
    """Message or parameter set incompatible with the global model."""


class StalenessError(FedisaError, ValueError):
    pass


class CalibrationError(FedisaError, ValueError):
    pass


class ConfigError(FedisaError, ValueError):
    pass
