"""Exception types shared across the package."""


class ProtonetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProtonetError, ValueError):
    pass


class NumericDomainError(ProtonetError, ValueError):
    pass


class NumericError(ProtonetError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class ContractError(ProtonetError, ValueError):
    pass


class DegenerateInputError(ProtonetError, ValueError):
    pass


class UnsupportedError(ProtonetError, NotImplementedError):
    pass


class BatchSizeError(ProtonetError, ValueError):
    pass


class InsufficientDataError(ProtonetError, ValueError):
    pass


class LoadError(ProtonetError, OSError):
    pass
