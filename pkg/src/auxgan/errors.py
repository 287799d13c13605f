"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidConfigError(ValueError):
    """A configuration is inconsistent or cannot be satisfied."""


class NumericError(FloatingPointError):
    """Non-finite values reached a numeric routine."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/inf loss. Carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
