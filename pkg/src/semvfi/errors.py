"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its documented contract."""


class CheckpointError(RuntimeError):
    """A weight archive is missing, unreadable, or has unmapped keys in strict mode."""


class DataError(RuntimeError):
    """A dataset file or record is missing or malformed."""
