"""Exception types shared across the package."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, array container) is malformed."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite. Carries the offending step index."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss non-finite at step {step}: {loss!r}")
        self.step = step
        self.loss = loss


class SolverError(RuntimeError):
    """Implicit PDE step failed to converge. Carries the step index."""

    def __init__(self, step: int, residual: float, message: str | None = None):
        msg = message or f"Newton iteration did not converge at step {step} (residual {residual:.3e})"
        super().__init__(msg)
        self.step = step
        self.residual = residual


class BlowUpError(SolverError):
    """PDE state became non-finite during integration."""

    def __init__(self, step: int):
        super().__init__(step, float("nan"), f"non-finite state at step {step}")


class ProjectionError(RuntimeError):
    """Projection optimization failed. Carries the last finite iterate."""

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class OracleExhaustedError(RuntimeError):
    """Rejection sampling hit the proposal budget before the target count."""

    def __init__(self, achieved: int, target: int, proposals: int):
        super().__init__(
            f"rejection sampling accepted {achieved}/{target} points "
            f"within {proposals} proposals"
        )
        self.achieved = achieved
        self.target = target
        self.proposals = proposals


class MetricError(ValueError):
    """A metric was requested outside its domain of definition."""
