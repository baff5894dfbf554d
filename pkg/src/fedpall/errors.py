"""Exception hierarchy shared across the package."""


class FedPallError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FedPallError, ValueError):
    pass


class UsageError(FedPallError, RuntimeError):
    pass


class DomainError(FedPallError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ProtocolError(FedPallError, RuntimeError):
    pass


class TrainingDivergenceError(FedPallError, FloatingPointError):
    pass


class ConfigError(FedPallError, ValueError):
    pass


class DataParseError(FedPallError, ValueError):
    pass
