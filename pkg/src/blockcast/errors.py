"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An operation was called with arguments outside its documented bounds."""


class ScheduleInvalidError(RuntimeError):
    """A transfer schedule violates one of its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0] if self.violations else None
        super().__init__(f"schedule invalid: {first}" if first else "schedule invalid")


class UnsupportedConfigurationError(RuntimeError):
    """The requested placement cannot be satisfied by the hardware shape."""


class UnsatisfiableScalingError(RuntimeError):
    """No copy of the model exists anywhere it could be scaled from."""


class CapacityError(RuntimeError):
    """A memory layout does not fit on the target device."""


class IncompleteLogError(RuntimeError):
    """An event log ended before its terminal bookkeeping records."""
