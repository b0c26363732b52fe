"""Deterministic discrete-event stand-in for a GPU.

Two FIFO streams (replay and capture) advance a virtual clock according to a
:class:`CostModel`. Kernel math runs immediately on the host; only *time* is
virtual, so timing can never influence results.

Cost of one stream item::

    eager kernel   host_dispatch + launch*X + alpha * mflops
    fused block    host_dispatch + sum(launch*X_i + alpha * mflops_i)
    graph replay   launch*X + alpha * total_mflops
    capture        capture_cost_per_kernel * n_kernels

``X`` is 1 without jitter, or an independent LogNormal(0, sigma) draw per
device submission. Host dispatch is charged serially on the issuing stream:
the step waits for the host before its device work can start.
"""
from __future__ import annotations

import enum
import itertools
import random
import threading
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

from .errors import DeviceStopped, StaticInFusedBlock, UnknownEvent
from .kernels import KernelInvocation, KvCache, OpClass

S_REP = "S_REP"
S_CAP = "S_CAP"
STREAMS = (S_REP, S_CAP)


class DispatchMode(enum.Enum):
    EAGER = "eager"
    FUSED_BLOCK_MEMBER = "fused_block_member"


@dataclass(frozen=True)
class CostModel:
    launch_overhead_us: float = 5.0
    host_dispatch_us: float = 8.0
    alpha_us_per_mflop: float = 0.01
    capture_cost_us_per_kernel: float = 2.0
    jitter: str = "lognormal"  # "none" | "lognormal"
    jitter_sigma: float = 0.25
    jitter_seed: int = 0

    def __post_init__(self):
        rates = (self.launch_overhead_us, self.host_dispatch_us,
                 self.alpha_us_per_mflop, self.capture_cost_us_per_kernel, self.jitter_sigma)
        if any(r < 0 for r in rates):
            raise ValueError(f"cost model rates must be non-negative: {self}")
        if self.jitter not in ("none", "lognormal"):
            raise ValueError(f"unknown jitter kind {self.jitter!r}")

    @property
    def jittered(self) -> bool:
        return self.jitter == "lognormal" and self.jitter_sigma > 0

    def without_jitter(self) -> CostModel:
        return replace(self, jitter="none")

    def with_seed(self, seed: int) -> CostModel:
        return replace(self, jitter_seed=seed)


class DeviceEvent:
    __slots__ = ("id", "recorded_at", "payload", "_owner")

    def __init__(self, owner: VirtualDevice, event_id: int):
        self._owner = owner
        self.id = event_id
        self.recorded_at: float | None = None
        self.payload = None

    @property
    def recorded(self) -> bool:
        return self.recorded_at is not None

    def __repr__(self) -> str:
        at = "unrecorded" if self.recorded_at is None else f"{self.recorded_at:.3f}us"
        return f"DeviceEvent({self.id}, {at})"


class TraceRecord(NamedTuple):
    ts_us: float
    stream: str
    kind: str  # kernel | fused | replay | capture
    id: str
    duration_us: float
    host_us: float = 0.0

    @property
    def end_us(self) -> float:
        return self.ts_us + self.duration_us


@dataclass(frozen=True)
class Counters:
    dispatches: int = 0
    kernel_launches: int = 0
    graph_replays: int = 0
    fused_blocks: int = 0
    captures: int = 0
    host_us: float = 0.0
    device_us: float = 0.0

    def __sub__(self, other: Counters) -> Counters:
        return Counters(**{k: v - getattr(other, k) for k, v in asdict(self).items()})


@dataclass
class Stream:
    id: str
    busy_until: float = 0.0
    blocked_on: DeviceEvent | None = None
    pending: deque = field(default_factory=deque)


class VirtualDevice:
    def __init__(self, cost: CostModel | None = None):
        self.cost = cost or CostModel()
        self.streams = {sid: Stream(sid) for sid in STREAMS}
        self.trace: list[TraceRecord] = []
        self._rng = random.Random(self.cost.jitter_seed)
        self._event_ids = itertools.count(1)
        self._lock = threading.RLock()
        self._stopped = False
        self._c = dict(asdict(Counters()))
        self._n_blocked = 0
        self._jitter_sigma = self.cost.jitter_sigma if self.cost.jittered else None

    # -- plumbing ---------------------------------------------------------

    def _stream(self, stream: str) -> Stream:
        try:
            return self.streams[stream]
        except KeyError:
            raise ValueError(f"unknown stream {stream!r}") from None

    def _jittered_launch(self) -> float:
        if self._jitter_sigma is None:
            return self.cost.launch_overhead_us
        return self.cost.launch_overhead_us * self._rng.lognormvariate(0.0, self._jitter_sigma)

    def _compute(self, flops: int) -> float:
        return self.cost.alpha_us_per_mflop * (flops / 1e6)

    def _enqueue(self, stream: str, work: Callable, *args) -> DeviceEvent:
        """Run ``work(stream, done, *args)`` now, or park it behind an unrecorded event."""
        with self._lock:
            if self._stopped:
                raise DeviceStopped("device has been stopped")
            s = self._stream(stream)
            done = DeviceEvent(self, next(self._event_ids))
            if s.blocked_on is not None:
                s.pending.append((work, args, done))
            else:
                work(s, done, *args)
            return done

    def _place(self, s: Stream, done: DeviceEvent, kind: str, ident: str,
               host_us: float, device_us: float) -> None:
        start = s.busy_until
        end = start + host_us + device_us
        self.trace.append(TraceRecord(start, s.id, kind, ident, host_us + device_us, host_us))
        s.busy_until = end
        c = self._c
        c["host_us"] += host_us
        c["device_us"] += device_us
        done.recorded_at = end
        if self._n_blocked:
            self._release_waiters(done)

    def _block(self, s: Stream, event: DeviceEvent) -> None:
        s.blocked_on = event
        self._n_blocked += 1

    def _release_waiters(self, event: DeviceEvent) -> None:
        for s in self.streams.values():
            if s.blocked_on is event:
                s.blocked_on = None
                self._n_blocked -= 1
                s.busy_until = max(s.busy_until, event.recorded_at)
                while s.pending and s.blocked_on is None:
                    work, args, done = s.pending.popleft()
                    work(s, done, *args)

    # -- submissions ------------------------------------------------------

    def _run_kernel(self, s: Stream, done: DeviceEvent, inv: KernelInvocation, mode: DispatchMode) -> None:
        device_us = self._jittered_launch() + self._compute(inv.spec.flops)
        host_us = self.cost.host_dispatch_us if mode is DispatchMode.EAGER else 0.0
        inv.fn()
        c = self._c
        c["dispatches"] += 1
        c["kernel_launches"] += 1
        self._place(s, done, "kernel", inv.spec.name, host_us, device_us)

    def submit_kernel(self, stream: str, inv: KernelInvocation,
                      mode: DispatchMode = DispatchMode.EAGER) -> DeviceEvent:
        return self._enqueue(stream, self._run_kernel, inv, mode)

    def _run_fused(self, s: Stream, done: DeviceEvent, invs: tuple[KernelInvocation, ...]) -> None:
        if not invs:
            done.recorded_at = s.busy_until
            if self._n_blocked:
                self._release_waiters(done)
            return
        device_us = 0.0
        for inv in invs:
            device_us += self._jittered_launch() + self._compute(inv.spec.flops)
            done.payload = inv.fn()
        c = self._c
        c["dispatches"] += 1
        c["fused_blocks"] += 1
        c["kernel_launches"] += len(invs)
        ident = "+".join(inv.spec.name for inv in invs)
        self._place(s, done, "fused", ident, self.cost.host_dispatch_us, device_us)

    def submit_fused_block(self, stream: str, invs: Sequence[KernelInvocation]) -> DeviceEvent:
        """One host dispatch for a whole block of DYNAMIC kernels."""
        invs = tuple(invs)
        for inv in invs:
            if inv.spec.op_class is not OpClass.DYNAMIC:
                raise StaticInFusedBlock(f"{inv.spec.name} is static")
        return self._enqueue(stream, self._run_fused, invs)

    def _run_replay(self, s: Stream, done: DeviceEvent, graph) -> None:
        device_us = self._jittered_launch() + self._compute(graph.total_flops)
        graph.run()
        c = self._c
        c["dispatches"] += 1
        c["graph_replays"] += 1
        self._place(s, done, "replay", f"G{graph.length}", 0.0, device_us)

    def submit_replay(self, stream: str, graph, kv: KvCache | None = None) -> DeviceEvent:
        """One launch for the whole graph; member math runs in captured order."""
        graph.validate(kv)
        return self._enqueue(stream, self._run_replay, graph)

    def _run_capture(self, s: Stream, done: DeviceEvent, length: int,
                     plan: tuple[KernelInvocation, ...], engine) -> None:
        graph = engine.capture(length, plan)
        done.payload = graph
        self._c["captures"] += 1
        self._place(s, done, "capture", f"G{length}", 0.0,
                    self.cost.capture_cost_us_per_kernel * len(plan))

    def submit_capture(self, stream: str, length: int, plan: Sequence[KernelInvocation],
                       engine) -> DeviceEvent:
        """Record ``plan`` into a graph; the completion event's payload is the graph."""
        return self._enqueue(stream, self._run_capture, length, tuple(plan), engine)

    # -- events -----------------------------------------------------------

    def create_event(self) -> DeviceEvent:
        return DeviceEvent(self, next(self._event_ids))

    def record_event(self, stream: str, event: DeviceEvent | None = None) -> DeviceEvent:
        """Stamp an event at the stream's completion frontier (in stream order)."""
        if event is not None and event._owner is not self:
            raise UnknownEvent(f"{event!r} belongs to another device")
        target = event if event is not None else self.create_event()
        self._enqueue(stream, self._run_record, target)
        return target

    def _run_record(self, s: Stream, done: DeviceEvent, target: DeviceEvent) -> None:
        target.recorded_at = s.busy_until
        done.recorded_at = s.busy_until
        if self._n_blocked:
            self._release_waiters(target)

    def wait_event(self, stream: str, event: DeviceEvent) -> None:
        """Later work on ``stream`` starts no earlier than ``event``."""
        if not isinstance(event, DeviceEvent) or event._owner is not self:
            raise UnknownEvent(f"{event!r} was not created by this device")
        self._enqueue(stream, self._run_wait, event)

    def _run_wait(self, s: Stream, done: DeviceEvent, event: DeviceEvent) -> None:
        if event.recorded:
            s.busy_until = max(s.busy_until, event.recorded_at)
        else:
            self._block(s, event)
        done.recorded_at = s.busy_until

    # -- reads ------------------------------------------------------------

    def frontier(self, stream: str) -> float:
        return self._stream(stream).busy_until

    def elapsed(self) -> float:
        return max(s.busy_until for s in self.streams.values())

    def synchronize(self) -> float:
        """Align every stream to the latest frontier; returns that time."""
        with self._lock:
            t = self.elapsed()
            for s in self.streams.values():
                if s.blocked_on is None:
                    s.busy_until = t
            return t

    def counters(self) -> Counters:
        return Counters(**self._c)

    def stop(self) -> None:
        self._stopped = True

    def export_trace(self) -> str:
        return "".join(
            f"{r.ts_us:.6f},{r.stream},{r.kind},{r.id},{r.duration_us:.6f}\n" for r in self.trace
        )

    def export_counters(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self.counters()).items())
