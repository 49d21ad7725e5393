"""Exception hierarchy shared by every module."""


class FedSQError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedSQError):
    """Invalid architecture, schedule or experiment configuration."""


class InputError(FedSQError, ValueError):
    """Invalid call arguments (labels out of range, empty datasets...)."""


class NumericError(FedSQError, ArithmeticError):
    """A non-finite value appeared during a computation."""


class ContractError(FedSQError):
    """Mismatched operands, e.g. masks computed for another batch."""


class ProtocolError(FedSQError):
    """Federation-level failure: bad updates, failed clients."""


class PartitionError(FedSQError):
    """A partition could not satisfy its constraints."""


class FormatError(FedSQError):
    """Malformed file on disk."""
