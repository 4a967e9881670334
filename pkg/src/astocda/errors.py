class AstError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(AstError, ValueError):
    """Shapes, sizes or config values that violate an operation's preconditions."""


class InvariantError(AstError, RuntimeError):
    """An internal contract was broken (missing gradients, double backward, ...)."""


class SymmetryError(AstError, ValueError):
    """A spectrum that should be conjugate-symmetric is not."""


class TrainingDivergence(AstError, RuntimeError):
    """A loss became NaN or infinite during optimization."""

    def __init__(self, stage, step, lr, loss):
        self.stage = stage
        self.step = step
        self.lr = lr
        self.loss = loss
        super().__init__(f"{stage}: non-finite loss {loss!r} at step {step} (lr={lr:g})")


class StageMissing(AstError, RuntimeError):
    """A pipeline stage was requested before its prerequisite stage ran."""

    def __init__(self, stage, missing):
        self.stage = stage
        self.missing = missing
        super().__init__(f"cannot run {stage!r}: prerequisite stage {missing!r} has not been run")
