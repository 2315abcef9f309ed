"""Exception types shared across the package."""


class UsageError(ValueError):
    """Bad arguments: shape mismatch, non-finite input, invalid settings."""


class NumericalError(ArithmeticError):
    """A factorization or numerical guard failed."""

    def __init__(self, msg, node=None):
        if node is not None:
            msg = f"node {node}: {msg}"
        super().__init__(msg)
        self.node = node


class StateError(RuntimeError):
    """An operation was called before its prerequisites ran."""
