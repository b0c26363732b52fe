"""Exception hierarchy for the runtime."""


class HybridRuntimeError(Exception):
    """Base class for every error raised by this package."""


# kernels / tensors
class ShapeMismatch(HybridRuntimeError, ValueError):
    pass


class TokenOutOfRange(HybridRuntimeError, IndexError):
    pass


class EmptyCache(HybridRuntimeError):
    pass


class CacheFull(HybridRuntimeError):
    pass


# model
class InvalidConfig(HybridRuntimeError, ValueError):
    pass


class LengthOutOfRange(HybridRuntimeError, ValueError):
    pass


class PromptTooLong(HybridRuntimeError, ValueError):
    pass


class EmptyPrompt(HybridRuntimeError, ValueError):
    pass


# capture / replay
class CaptureInProgress(HybridRuntimeError):
    pass


class CaptureViolation(HybridRuntimeError):
    """A DYNAMIC kernel was offered to a capture session."""


class ForeignBuffer(HybridRuntimeError):
    """A kernel binding points outside the workspace and the weights."""


class SessionClosed(HybridRuntimeError):
    pass


class EmptyCapture(HybridRuntimeError):
    pass


class ReplayShapeError(HybridRuntimeError):
    pass


class WrongLength(HybridRuntimeError):
    pass


class WorkspaceFrozen(HybridRuntimeError):
    pass


# graph cache
class KeyMismatch(HybridRuntimeError, ValueError):
    pass


class WarmupExceedsCapacity(HybridRuntimeError, ValueError):
    pass


# virtual device
class DeviceStopped(HybridRuntimeError):
    pass


class StaticInFusedBlock(HybridRuntimeError):
    pass


class UnknownEvent(HybridRuntimeError):
    pass


# pipeline / bench
class ChannelError(HybridRuntimeError):
    """Request/response alternation on the actor channel was broken."""


class StepFailed(HybridRuntimeError):
    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"step {step} failed: {cause!r}")
        self.step = step
        self.cause = cause

    def __reduce__(self):
        return (type(self), (self.step, self.cause))


class EmptySamples(HybridRuntimeError, ValueError):
    pass


class BenchCellError(HybridRuntimeError):
    def __init__(self, cell: tuple, cause: BaseException):
        super().__init__(f"bench cell {cell} failed: {cause!r}")
        self.cell = cell
        self.cause = cause

    def __reduce__(self):
        return (type(self), (self.cell, self.cause))
