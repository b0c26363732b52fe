"""Context Generator / Graph Generator pipeline over the virtual device.

The Context Generator owns the KV cache and sampling; it runs the dynamic
preprocessing before each step and the dynamic sample/commit block after it.
The Graph Generator owns the graph cache: it replays a captured graph for the
step's length when one exists, and otherwise runs the static plan eagerly
while a capture for that length proceeds on the capture stream. The two talk
only through a strictly alternating request/response :class:`Channel`.
"""
from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .cache import DEFAULT_CAPACITY, CacheStats, EvictionPolicy, GraphCache
from .device import S_CAP, S_REP, CostModel, Counters, DeviceEvent, DispatchMode, TraceRecord, VirtualDevice
from .errors import ChannelError, EmptyPrompt, HybridRuntimeError, PromptTooLong, StepFailed
from .graph import ExecGraph, replay
from .kernels import GREEDY, KernelInvocation, TokenSlot, bind_sample_token
from .model import ToyTransformer, Weights
from .tensor import Tensor

log = logging.getLogger(__name__)


class RunMode(str, enum.Enum):
    EAGER = "EAGER"
    HYBRID = "HYBRID"
    GRAPH_ONLY = "GRAPH_ONLY"
    ABLATE_ASYNC = "ABLATE_ASYNC"
    ABLATE_FUSED = "ABLATE_FUSED"
    ABLATE_BOTH = "ABLATE_BOTH"

    @property
    def uses_graphs(self) -> bool:
        return self is not RunMode.EAGER

    @property
    def captures(self) -> bool:
        return self not in (RunMode.EAGER, RunMode.GRAPH_ONLY)

    @property
    def capture_stream(self) -> str:
        return S_REP if self in (RunMode.ABLATE_ASYNC, RunMode.ABLATE_BOTH) else S_CAP

    @property
    def fused_dynamic(self) -> bool:
        return self not in (RunMode.EAGER, RunMode.ABLATE_FUSED, RunMode.ABLATE_BOTH)


class StepPath(str, enum.Enum):
    REPLAY = "REPLAY"
    EAGER_FALLBACK = "EAGER_FALLBACK"
    EAGER = "EAGER"  # graphs disabled for this step (EAGER mode, or prefill with graphs off)


@dataclass(frozen=True)
class CacheConfig:
    capacity: int = DEFAULT_CAPACITY
    warmup: tuple[int, int] | None = (1, 50)
    policy: EvictionPolicy = EvictionPolicy.LEAST_USED
    prefill_graphs: bool = True


@dataclass(frozen=True)
class StepRequest:
    step: int
    length: int
    x: Tensor


@dataclass(frozen=True)
class StepResponse:
    step: int
    h: Tensor
    path: StepPath


class Channel:
    """In-memory request/response channel with enforced alternation."""

    def __init__(self):
        self._requests: deque[StepRequest] = deque()
        self._responses: deque[StepResponse] = deque()
        self._outstanding: StepRequest | None = None

    def send(self, request: StepRequest) -> None:
        if self._outstanding is not None or self._responses:
            raise ChannelError(f"step {request.step} sent while step "
                               f"{(self._outstanding or self._responses[0]).step} is unresolved")
        self._outstanding = request
        self._requests.append(request)

    def receive_request(self) -> StepRequest:
        if not self._requests:
            raise ChannelError("no pending request")
        return self._requests.popleft()

    def respond(self, response: StepResponse) -> None:
        if self._outstanding is None or response.step != self._outstanding.step:
            raise ChannelError(f"response for step {response.step} does not match the open request")
        self._outstanding = None
        self._responses.append(response)

    def receive_response(self) -> StepResponse:
        if not self._responses:
            raise ChannelError("no response available")
        return self._responses.popleft()


class GraphGenerator:
    """Replay-or-fallback executor of static plans; owns the graph cache."""

    def __init__(self, model: ToyTransformer, mode: RunMode, cache: GraphCache | None, prefill_graphs: bool):
        self.model = model
        self.mode = mode
        self.cache = cache
        self.prefill_graphs = prefill_graphs
        self.device: VirtualDevice | None = None
        self._pending: list[DeviceEvent] = []
        self._pending_lengths: set[int] = set()

    def attach(self, device: VirtualDevice) -> None:
        self.device = device
        self._pending.clear()
        self._pending_lengths.clear()

    def warmup(self, lo: int, hi: int) -> int:
        """Pre-capture graphs for ``[lo, hi]`` on the capture stream, then wait for them."""
        dev, model = self.device, self.model

        def capture(length: int) -> ExecGraph:
            done = dev.submit_capture(S_CAP, length, model.static_kernel_plan(length), model.engine)
            return done.payload

        count = self.cache.precapture_warmup(lo, hi, capture)
        dev.synchronize()
        return count

    def poll(self, now: float) -> None:
        """Insert graphs whose capture has completed by ``now``."""
        still = []
        for ev in self._pending:
            if ev.recorded and ev.recorded_at <= now:
                graph = ev.payload
                self.cache.insert(graph.length, graph)
                self._pending_lengths.discard(graph.length)
            else:
                still.append(ev)
        self._pending = still

    def flush(self) -> None:
        self.poll(float("inf"))

    def handle(self, request: StepRequest, prefill: bool) -> StepResponse:
        dev, model, length = self.device, self.model, request.length
        use_graphs = self.mode.uses_graphs and (self.prefill_graphs or not prefill)
        if not use_graphs:
            model.forward_eager(model.context(0, length), dev, S_REP)
            return StepResponse(request.step, model.buffers.logits, StepPath.EAGER)

        self.poll(dev.frontier(S_REP))
        graph = self.cache.lookup(length)
        if graph is not None:
            replay(graph, dev, S_REP, kv=model.kv)
            return StepResponse(request.step, model.buffers.logits, StepPath.REPLAY)

        plan = model.static_kernel_plan(length)
        capture_now = self.mode.captures and length not in self._pending_lengths
        if capture_now and self.mode.capture_stream == S_CAP:
            # the capture may not start before this request reached the replay stream
            dev.wait_event(S_CAP, dev.record_event(S_REP))
            self._submit_capture(S_CAP, length, plan)
        for inv in plan:
            dev.submit_kernel(S_REP, inv, DispatchMode.EAGER)
        if capture_now and self.mode.capture_stream == S_REP:
            self._submit_capture(S_REP, length, plan)
        return StepResponse(request.step, model.buffers.logits, StepPath.EAGER_FALLBACK)

    def _submit_capture(self, stream: str, length: int, plan: Sequence[KernelInvocation]) -> None:
        self._pending.append(self.device.submit_capture(stream, length, plan, self.model.engine))
        self._pending_lengths.add(length)


class ContextGenerator:
    """Dynamic pre/post processing around each step; owns the KV cache and sampler."""

    def __init__(self, model: ToyTransformer, mode: RunMode, strategy=GREEDY):
        self.model = model
        self.mode = mode
        self.strategy = strategy
        self.device: VirtualDevice | None = None
        self._slot = TokenSlot()
        self._sample = bind_sample_token(model.buffers.logits, strategy, self._slot)

    def _dispatch(self, invs: list[KernelInvocation]) -> DeviceEvent:
        dev = self.device
        if self.mode.fused_dynamic:
            return dev.submit_fused_block(S_REP, invs)
        done = None
        for inv in invs:
            done = dev.submit_kernel(S_REP, inv, DispatchMode.EAGER)
        return done

    def prepare(self, step: int, token: int, length: int) -> StepRequest:
        self._dispatch([self.model.bind_preprocess(token, length)])
        return StepRequest(step, length, self.model.buffers.x)

    def finish(self, response: StepResponse, sample: bool) -> tuple[int | None, float]:
        if response.h is not self.model.buffers.logits:
            raise ChannelError(f"step {response.step} answered with a foreign buffer")
        self._slot.value = None
        invs = [self._sample, self.model.bind_commit()] if sample else [self.model.bind_commit()]
        done = self._dispatch(invs)
        return self._slot.value, done.recorded_at


@dataclass
class GenerationResult:
    tokens: list[int]
    ttft_us: float
    token_latencies: list[float]
    total_us: float
    prompt_len: int
    lengths: list[int]
    paths: list[StepPath]
    counters: Counters
    cache_stats: CacheStats
    trace: tuple[TraceRecord, ...] = field(repr=False)

    @property
    def replays(self) -> int:
        return self.paths.count(StepPath.REPLAY)

    @property
    def fallbacks(self) -> int:
        return self.paths.count(StepPath.EAGER_FALLBACK)


def ttft(result: GenerationResult) -> float:
    return result.ttft_us


def per_token_latencies(result: GenerationResult) -> list[float]:
    return list(result.token_latencies)


class HybridRuntime:
    """Persistent state of one pipeline instance: model buffers, graph cache, actors.

    Graphs survive across :meth:`generate` calls (warm start); the KV cache and
    the device timeline do not.
    """

    def __init__(self, weights: Weights, mode: RunMode | str, cache_config: CacheConfig | None = None,
                 strategy=GREEDY):
        self.mode = RunMode(mode)
        self.cache_config = cache_config or CacheConfig()
        self.model = ToyTransformer(weights)
        cc = self.cache_config
        self.cache = GraphCache(cc.capacity, cc.policy) if self.mode.uses_graphs else None
        self.graphs = GraphGenerator(self.model, self.mode, self.cache, cc.prefill_graphs)
        self.context = ContextGenerator(self.model, self.mode, strategy)
        self.initialized = False

    def initialize(self, device: VirtualDevice) -> None:
        """Stream setup and warm-up pre-capture (skipped when graphs are off)."""
        self.graphs.attach(device)
        if self.cache is not None and self.cache_config.warmup is not None:
            lo, hi = self.cache_config.warmup
            self.graphs.warmup(lo, hi)
        self.initialized = True

    def generate(self, prompt: Sequence[int], n: int, device: VirtualDevice) -> GenerationResult:
        prompt = [int(t) for t in prompt]
        cfg = self.model.config
        if not prompt:
            raise EmptyPrompt("prompt is empty")
        if n < 1:
            raise ValueError("n must be >= 1")
        if len(prompt) + n > cfg.max_seq:
            raise PromptTooLong(f"prompt {len(prompt)} + {n} tokens exceeds max_seq={cfg.max_seq}")
        if not self.initialized:
            self.initialize(device)

        self.graphs.attach(device)
        self.context.device = device
        self.model.reset()
        if self.cache is not None:
            self.cache.begin_session()
        stats0 = self.cache.stats() if self.cache is not None else CacheStats()
        t0 = device.synchronize()
        counters0 = device.counters()
        trace0 = len(device.trace)

        channel = Channel()
        # prompt tokens, then the start token and each sampled token in turn
        inputs = list(prompt) + [cfg.start_token]
        tokens: list[int] = []
        lengths: list[int] = []
        paths: list[StepPath] = []
        done_at: list[float] = []
        prefill_end = t0
        for step in range(len(prompt) + n):
            length = step + 1
            prefill = step < len(prompt)
            try:
                channel.send(self.context.prepare(step, inputs[step], length))
                channel.respond(self.graphs.handle(channel.receive_request(), prefill))
                response = channel.receive_response()
                token, finished = self.context.finish(response, sample=not prefill)
            except HybridRuntimeError as exc:
                raise StepFailed(step, exc) from exc
            lengths.append(length)
            paths.append(response.path)
            if prefill:
                prefill_end = finished
            else:
                tokens.append(token)
                inputs.append(token)
                done_at.append(finished)

        # cleanup: drain both streams, land outstanding captures, drop unused graphs
        device.synchronize()
        if self.cache is not None:
            self.graphs.flush()
            released = self.cache.release_inactive()
            log.debug("released %d inactive graphs", released)

        marks = [prefill_end] + done_at
        return GenerationResult(
            tokens=tokens,
            ttft_us=done_at[0] - t0,
            token_latencies=[b - a for a, b in zip(marks, marks[1:])],
            total_us=done_at[-1] - t0,
            prompt_len=len(prompt),
            lengths=lengths,
            paths=paths,
            counters=device.counters() - counters0,
            cache_stats=(self.cache.stats() - stats0) if self.cache is not None else CacheStats(),
            trace=tuple(device.trace[trace0:]),
        )


def run_inference(
    weights: Weights,
    prompt: Sequence[int],
    n: int,
    mode: RunMode | str = RunMode.HYBRID,
    cost_model: CostModel | None = None,
    cache_config: CacheConfig | None = None,
    strategy=GREEDY,
    device: VirtualDevice | None = None,
) -> GenerationResult:
    """Initialise a fresh runtime (streams, warm-up) and generate ``n`` tokens."""
    device = device or VirtualDevice(cost_model)
    runtime = HybridRuntime(weights, mode, cache_config, strategy)
    runtime.initialize(device)
    return runtime.generate(prompt, n, device)
