"""Exception types shared across modules."""


class DimensionError(ValueError):
    """Array shapes or lengths do not line up."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
