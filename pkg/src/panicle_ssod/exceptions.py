"""Exception hierarchy shared by every module of the package."""


class PanicleError(Exception):
    """Base class for all package errors."""


class InvalidConfig(PanicleError, ValueError):
    """A configuration value or precondition was violated."""


class DegenerateBox(PanicleError, ValueError):
    """A box collapsed to zero (or sub-pixel) area."""


class EmptySplit(PanicleError, ValueError):
    """A label fraction would select zero images."""


class EmptyBatch(PanicleError, ValueError):
    pass


class EmptyDataset(PanicleError, ValueError):
    pass


class ShapeMismatch(PanicleError, ValueError):
    pass


class MismatchedIds(PanicleError, ValueError):
    """Detections and ground truths refer to different image id sets."""


class NonFiniteGradient(PanicleError, FloatingPointError):
    pass
