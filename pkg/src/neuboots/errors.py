"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not chain or match."""


class DataError(ValueError):
    """Malformed or invalid input data."""


class NumericalError(ArithmeticError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message, batch=None, epoch=None, step=None, member=None):
        super().__init__(message)
        self.batch = batch
        self.epoch = epoch
        self.step = step
        self.member = member


class ConfigError(ValueError):
    """An experiment config or command line is invalid (a usage error)."""
