"""Exception hierarchy. Each class maps to one CLI exit code."""


class TrapError(Exception):
    exit_code = 1


class ConfigError(TrapError, ValueError):
    exit_code = 2


class DataError(TrapError, ValueError):
    exit_code = 3


class CapacityError(TrapError, RuntimeError):
    """Raised when exhaustive enumeration would exceed the configured cap."""

    exit_code = 4


class UnderfillError(TrapError, RuntimeError):
    """Raised when a required trajectory length cannot be filled."""

    exit_code = 5

    def __init__(self, length, required, available):
        self.length = length
        self.required = required
        self.available = available
        super().__init__(
            f"length {length}: need {required} trajectories, "
            f"only {available} can be produced"
        )
