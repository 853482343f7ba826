"""Exception hierarchy shared by every stage of the pipeline."""


class IIEError(Exception):
    """Base class for all library errors."""


class InvalidInput(IIEError, ValueError):
    pass


class DegenerateJacobian(IIEError):
    pass


class NonPSDMetric(IIEError):
    pass


class DisconnectedGraph(IIEError):
    """Raised when a computation needs a connected graph.

    ``components`` holds one sorted array of vertex ids per connected component.
    """

    def __init__(self, components, message=None):
        self.components = [list(map(int, c)) for c in components]
        sizes = sorted((len(c) for c in self.components), reverse=True)
        super().__init__(message or f"graph has {len(sizes)} components (sizes {sizes[:10]})")


class InsufficientSamples(IIEError):
    pass


class DegenerateArray(IIEError):
    pass


class IllConditioned(IIEError):
    pass


class TrainingDiverged(IIEError):
    def __init__(self, epoch, message=None):
        self.epoch = int(epoch)
        super().__init__(message or f"non-finite log-likelihood at epoch {epoch}")


class DegenerateAlignment(IIEError):
    pass


class SplitFailed(IIEError):
    pass


class StageError(IIEError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
