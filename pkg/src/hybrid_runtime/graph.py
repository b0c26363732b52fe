"""Capture of static kernel sequences into replayable execution graphs."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import (
    CaptureInProgress,
    CaptureViolation,
    EmptyCapture,
    ForeignBuffer,
    ReplayShapeError,
    SessionClosed,
    WorkspaceFrozen,
    WrongLength,
)
from .kernels import KernelInvocation, KvCache, OpClass
from .tensor import Tensor

if TYPE_CHECKING:
    from .device import DeviceEvent, VirtualDevice


class Workspace:
    """Fixed pool of pre-allocated buffers shared by every captured graph.

    Aliases (row views of a pooled buffer) get their own buffer ids but add no
    memory. Once frozen, the pool cannot grow.
    """

    def __init__(self):
        self._buffers: dict[int, Tensor] = {}
        self._owned_bytes = 0
        self.frozen = False

    def allocate(self, shape: Sequence[int], name: str = "") -> Tensor:
        t = Tensor.zeros(shape, name)
        self.adopt(t)
        return t

    def adopt(self, tensor: Tensor, alias: bool = False) -> Tensor:
        if self.frozen:
            raise WorkspaceFrozen(f"cannot add {tensor!r} to a frozen workspace")
        self._buffers[tensor.buffer_id] = tensor
        if not alias:
            self._owned_bytes += tensor.nbytes
        return tensor

    def freeze(self) -> None:
        self.frozen = True

    def __contains__(self, buffer_id: int) -> bool:
        return buffer_id in self._buffers

    def __len__(self) -> int:
        return len(self._buffers)

    @property
    def pool_bytes(self) -> int:
        return self._owned_bytes

    @property
    def buffer_ids(self) -> frozenset[int]:
        return frozenset(self._buffers)


@dataclass(frozen=True, eq=False)
class ExecGraph:
    """An immutable, replayable sequence of static kernel invocations for one length."""

    length: int
    kernels: tuple[KernelInvocation, ...]
    total_flops: int
    footprint: frozenset[int]
    capture_epoch: int

    def __post_init__(self):
        # one shape check per distinct (buffer, captured shape) pair
        checks = {}
        for index, inv in enumerate(self.kernels):
            for tensor, frozen in zip(inv.bindings, inv.shapes):
                checks.setdefault((tensor.buffer_id, frozen), (index, tensor, frozen))
        object.__setattr__(self, "_checks", tuple(checks.values()))
        object.__setattr__(self, "_fns", tuple(inv.fn for inv in self.kernels))

    def __len__(self) -> int:
        return len(self.kernels)

    def validate(self, kv: KvCache | None = None) -> None:
        """Check bindings against their capture-time shapes and the cache length.

        Values are deliberately not checked: a graph binds buffers, not data.
        """
        for index, tensor, frozen in self._checks:
            if tensor.data.shape != frozen:
                raise ReplayShapeError(
                    f"kernel {index} ({self.kernels[index].spec.name}): buffer #{tensor.buffer_id} "
                    f"is {list(tensor.shape)}, captured as {list(frozen)}"
                )
        # a graph of length L attends over L-1 committed positions plus the current token
        if kv is not None and kv.cur_len + 1 != self.length:
            raise WrongLength(
                f"graph for length {self.length} needs {self.length - 1} cached positions, "
                f"cache holds {kv.cur_len}"
            )

    def run(self) -> None:
        for fn in self._fns:
            fn()

    def dump(self) -> str:
        lines = [f"# graph length={self.length} epoch={self.capture_epoch} "
                 f"kernels={len(self.kernels)} flops={self.total_flops}"]
        for i, inv in enumerate(self.kernels):
            shapes = " ".join("x".join(map(str, s)) for s in inv.shapes)
            lines.append(f"{i:4d} {inv.spec.name:<16} {shapes:<40} {inv.spec.flops}")
        return "\n".join(lines) + "\n"


class SessionState(enum.Enum):
    OPEN = "open"
    CLOSED = "closed"
    ABORTED = "aborted"


class CaptureSession:
    def __init__(self, engine: CaptureEngine, length: int):
        self.engine = engine
        self.length = length
        self.recorded: list[KernelInvocation] = []
        self.state = SessionState.OPEN


class CaptureEngine:
    """Opens capture sessions and enforces what may be recorded into them.

    A kernel may be recorded only if it is STATIC and every buffer it binds
    belongs to the workspace or the weights. Any violation aborts the session.
    """

    def __init__(self, workspace: Workspace, weight_buffers: Iterable[int] = ()):
        self.workspace = workspace
        self.weight_buffers = frozenset(weight_buffers)
        self._open: dict[int, CaptureSession] = {}
        self._epochs = itertools.count(1)

    def begin_capture(self, length: int) -> CaptureSession:
        if length in self._open:
            raise CaptureInProgress(f"a capture for length {length} is already open")
        session = CaptureSession(self, length)
        self._open[length] = session
        return session

    def _abort(self, session: CaptureSession) -> None:
        session.state = SessionState.ABORTED
        self._open.pop(session.length, None)

    def record(self, session: CaptureSession, inv: KernelInvocation) -> None:
        if session.state is not SessionState.OPEN:
            raise SessionClosed(f"session for length {session.length} is {session.state.value}")
        if inv.spec.op_class is not OpClass.STATIC:
            self._abort(session)
            raise CaptureViolation(f"{inv.spec.name} is dynamic and cannot be captured")
        for t in inv.bindings:
            bid = t.buffer_id
            if bid not in self.workspace and bid not in self.weight_buffers:
                self._abort(session)
                raise ForeignBuffer(f"{inv.spec.name} binds {t!r}, outside workspace and weights")
        session.recorded.append(inv)

    def end_capture(self, session: CaptureSession) -> ExecGraph:
        if session.state is not SessionState.OPEN:
            raise SessionClosed(f"session for length {session.length} is {session.state.value}")
        if not session.recorded:
            self._abort(session)
            raise EmptyCapture(f"nothing recorded for length {session.length}")
        kernels = tuple(session.recorded)
        footprint = frozenset(
            t.buffer_id for inv in kernels for t in inv.bindings if t.buffer_id in self.workspace
        )
        graph = ExecGraph(
            length=session.length,
            kernels=kernels,
            total_flops=sum(inv.spec.flops for inv in kernels),
            footprint=footprint,
            capture_epoch=next(self._epochs),
        )
        session.state = SessionState.CLOSED
        del self._open[session.length]
        return graph

    def capture(self, length: int, plan: Sequence[KernelInvocation]) -> ExecGraph:
        session = self.begin_capture(length)
        for inv in plan:
            self.record(session, inv)
        return self.end_capture(session)


def replay(graph: ExecGraph, device: VirtualDevice, stream, kv: KvCache | None = None) -> DeviceEvent:
    """Run every kernel of ``graph`` as a single device submission."""
    return device.submit_replay(stream, graph, kv=kv)
