"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Inputs are individually valid but cannot be combined into a model."""


class FeasibilityError(ValueError):
    """A placement stores more files at a BS than its capacity allows."""

    def __init__(self, bs, stored, capacity):
        self.bs = bs
        self.stored = stored
        self.capacity = capacity
        super().__init__(f"BS {bs} stores {stored} files but its capacity is {capacity}")


class SolverError(RuntimeError):
    """A solver reached a state it cannot recover from."""
