"""Exception types shared across the package."""


class UsageError(ValueError):
    """An operation was called with arguments outside its domain."""


class ConfigError(ValueError):
    """A configuration violates a model precondition."""


class BlowUpError(FloatingPointError):
    """The simulated state became non-finite.

    Carries the step index at which it happened and the last finite state
    so the caller can dump diagnostics.
    """

    def __init__(self, step, last_state):
        self.step = step
        self.last_state = last_state
        super().__init__(f"non-finite state at step {step}")
