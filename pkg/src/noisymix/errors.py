"""Exception types shared across the package."""


class NoisyMixError(Exception):
    """Base class."""


class ContractError(NoisyMixError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class ConfigError(NoisyMixError, ValueError):
    pass


class ParameterError(ContractError):
    pass


class NumericalError(NoisyMixError, ArithmeticError):
    pass


class FormatError(NoisyMixError, ValueError):
    pass


class SamplingError(NoisyMixError, RuntimeError):
    pass
