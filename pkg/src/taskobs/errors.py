"""Exception and warning types shared across the package."""


class TaskObsError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(TaskObsError, ValueError):
    def __init__(self, what: str, shape_a, shape_b):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{what}: shape {self.shape_a} does not match {self.shape_b}")


class InvalidValueError(TaskObsError, ValueError):
    pass


class MissingInputError(TaskObsError):
    """A raster needed for the requested variant is absent."""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(message)


class CodecError(TaskObsError, ValueError):
    pass


class ProviderError(TaskObsError):
    pass


class MalformedResponseError(ProviderError):
    pass


class ProviderTimeoutError(ProviderError, TimeoutError):
    pass


class RemoteStatusError(ProviderError):
    def __init__(self, status: int, frame_id: int):
        self.status = status
        self.frame_id = frame_id
        super().__init__(f"remote provider returned status {status} for frame {frame_id}")


class NonFiniteError(TaskObsError, FloatingPointError):
    def __init__(self, message: str, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} (index {index})")


class EmptyRegionWarning(UserWarning):
    """Depth normalization was asked to work on an empty object mask."""
