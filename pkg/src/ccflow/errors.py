"""Exception types shared across the package."""


class CCFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(CCFlowError, ValueError):
    pass


class ConfigError(CCFlowError, ValueError):
    pass


class ContractError(CCFlowError, RuntimeError):
    pass


class GenerationError(CCFlowError, RuntimeError):
    pass


class DataError(CCFlowError, IOError):
    pass


class NumericalError(CCFlowError, FloatingPointError):
    pass
