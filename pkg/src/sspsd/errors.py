"""Exception types raised across the package."""


class SSPSDError(Exception):
    """Base class for all package errors."""


class PointOutOfBounds(SSPSDError, ValueError):
    pass


class TwoPointsOneCell(SSPSDError, ValueError):
    pass


class SchemaError(SSPSDError, ValueError):
    pass


class DanglingSlotRef(SchemaError):
    pass


class EmptyDataset(SSPSDError, ValueError):
    pass


class ConfigError(SSPSDError, ValueError):
    pass


class ShapeError(SSPSDError, ValueError):
    pass


class ShapeMismatch(SSPSDError, ValueError):
    pass


class ZeroLabeled(SSPSDError, ValueError):
    pass


class ZeroGT(SSPSDError, ValueError):
    pass


class NonFiniteLoss(SSPSDError, RuntimeError):
    def __init__(self, message, batch_index=None, dump=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.dump = dump


class LabelAccessError(SSPSDError, RuntimeError):
    """Raised when code tries to read ground truth of an unlabeled sample."""


class DegenerateGradient(RuntimeWarning):
    """Emitted when the VAT power iteration produced a (near) zero gradient."""
