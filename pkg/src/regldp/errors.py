"""Exception classes shared by the library and the CLI."""


class UsageError(ValueError):
    """Bad arguments: wrong dimensions, negative masses, odd nd, ..."""


class ScaleGuardError(UsageError):
    """The brute-force oracle was asked for an instance it cannot enumerate."""


class InfeasibleEventError(ValueError):
    """No admissible pair satisfies the event."""


class RejectionCapError(RuntimeError):
    def __init__(self, attempts, message=None):
        self.attempts = attempts
        super().__init__(message or f"no simple graph after {attempts} attempts")


class ConvergenceError(RuntimeError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)
