"""Exception hierarchy shared by the estimators, harness and CLI."""


class NavigationError(Exception):
    """Base class for every library-raised failure."""


class GimbalLockError(NavigationError, ValueError):
    """Pitch too close to +/- pi/2 for the Euler-angle kinematics."""


class DegenerateBearingError(NavigationError, ValueError):
    """Range-bearing measurement with zero horizontal separation."""


class NotRetainedError(NavigationError, LookupError):
    """A requested step is no longer (or not yet) held by the state buffer."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"Step {step} is not retained in the buffer")


class ContractViolationError(NavigationError, ValueError):
    """Caller broke an ordering contract (e.g. non-consecutive buffer push)."""


class ResourceExhaustedError(NavigationError, MemoryError):
    """An estimator's projected memory exceeds its configured budget."""

    def __init__(self, required_bytes: int, budget_bytes: int, what: str = "matrix"):
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes
        super().__init__(
            f"{what} needs {required_bytes / 2**20:.1f} MB, "
            f"budget is {budget_bytes / 2**20:.1f} MB"
        )


class ConfigError(NavigationError, ValueError):
    """Invalid experiment configuration; `path` names the offending field."""

    def __init__(self, path: str, message: str, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}" if line is None else f"{path} (line {line})"
        super().__init__(f"{where}: {message}")
