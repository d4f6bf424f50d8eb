"""Exception types raised across the package."""


class StsegError(Exception):
    pass


class ShapeError(StsegError, ValueError):
    pass


class ConfigurationError(StsegError, ValueError):
    pass


class ValidationError(StsegError, ValueError):
    pass


class NumericalDegeneracyError(StsegError, ArithmeticError):
    pass


class TrainingDivergedError(StsegError, RuntimeError):
    def __init__(self, epoch: int, step: int, lr: float, loss: float):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, step {step}, lr {lr:.6g}"
        )
        self.epoch = epoch
        self.step = step
        self.lr = lr
        self.loss = loss


class CheckpointError(StsegError, ValueError):
    pass
