import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybrid_runtime.device import S_CAP, S_REP, CostModel, DispatchMode, VirtualDevice
from hybrid_runtime.errors import DeviceStopped, StaticInFusedBlock, UnknownEvent
from hybrid_runtime.graph import CaptureEngine, ExecGraph, Workspace
from hybrid_runtime.kernels import KernelInvocation, KernelSpec, OpClass

# exp(0.25 * z_0.99) with z_0.99 = 2.3263478740 (standard normal 99th percentile)
LOGNORMAL_P99_OVER_MEDIAN = 1.7888750677


def kernel(flops=0, op_class=OpClass.STATIC, name="k", fn=None):
    spec = KernelSpec(name, op_class, (), (), int(flops))
    return KernelInvocation(spec, (), (), (), fn or (lambda: None))


def graph_of(*flops, length=1):
    kernels = tuple(kernel(f) for f in flops)
    return ExecGraph(length, kernels, sum(flops), frozenset(), 1)


def device(**kw):
    base = dict(launch_overhead_us=5.0, host_dispatch_us=0.0, alpha_us_per_mflop=1.0,
                capture_cost_us_per_kernel=2.0, jitter="none")
    base.update(kw)
    return VirtualDevice(CostModel(**base))


def test_kernel_duration_closed_form():
    dev = device()
    dev.submit_kernel(S_REP, kernel(1e6))
    assert dev.elapsed() == 6.0
    assert dev.trace[0].duration_us == 6.0


def test_zero_flop_kernel_costs_one_launch():
    dev = device()
    dev.submit_kernel(S_REP, kernel(0))
    assert dev.elapsed() == 5.0


def test_fifo_on_one_stream():
    dev = device()
    dev.submit_kernel(S_REP, kernel(1e6))
    dev.submit_kernel(S_REP, kernel(2e6))
    first, second = dev.trace
    assert second.ts_us == first.end_us == 6.0
    assert dev.elapsed() == 13.0


def test_eager_kernel_pays_host_dispatch():
    dev = device(host_dispatch_us=8.0)
    dev.submit_kernel(S_REP, kernel(0))
    dev.submit_kernel(S_REP, kernel(0), DispatchMode.FUSED_BLOCK_MEMBER)
    assert dev.elapsed() == 13.0 + 5.0
    assert dev.counters().host_us == 8.0


def test_fused_block_saves_host_charges():
    dyn = [kernel(1e6, OpClass.DYNAMIC) for _ in range(3)]
    fused, eager = device(host_dispatch_us=8.0), device(host_dispatch_us=8.0)
    fused.submit_fused_block(S_REP, dyn)
    for inv in dyn:
        eager.submit_kernel(S_REP, inv)
    assert fused.counters().device_us == eager.counters().device_us == 18.0
    assert eager.counters().host_us - fused.counters().host_us == 2 * 8.0
    assert fused.counters().dispatches == 1 and fused.counters().kernel_launches == 3


def test_empty_fused_block_is_a_noop():
    dev = device(host_dispatch_us=8.0)
    done = dev.submit_fused_block(S_REP, [])
    assert done.recorded_at == 0.0 and dev.elapsed() == 0.0
    assert dev.counters().dispatches == 0


def test_fused_block_refuses_static_kernels():
    with pytest.raises(StaticInFusedBlock):
        device().submit_fused_block(S_REP, [kernel(0, OpClass.DYNAMIC), kernel(10)])


def test_fused_block_runs_members_in_order():
    seen = []
    block = [kernel(0, OpClass.DYNAMIC, fn=lambda i=i: seen.append(i)) for i in range(4)]
    device().submit_fused_block(S_REP, block)
    assert seen == [0, 1, 2, 3]


def test_replay_vs_eager_closed_form():
    replayed, eager = device(), device()
    replayed.submit_replay(S_REP, graph_of(1e6, 1e6, 1e6))
    for _ in range(3):
        eager.submit_kernel(S_REP, kernel(1e6))
    assert replayed.elapsed() == 8.0
    assert eager.elapsed() == 18.0


def test_replay_is_one_dispatch_and_repeatable():
    dev = device()
    g = graph_of(1e6, 2e6, 0)
    dev.submit_replay(S_REP, g)
    dev.submit_replay(S_REP, g)
    c = dev.counters()
    assert c.dispatches == 2 and c.graph_replays == 2 and c.kernel_launches == 0
    assert dev.trace[0].duration_us == dev.trace[1].duration_us


def capture_plan(k):
    ws = Workspace()
    return CaptureEngine(ws), [kernel(0) for _ in range(k)]


def test_capture_occupies_capture_stream():
    dev = device()
    engine, plan = capture_plan(42)
    done = dev.submit_capture(S_CAP, 7, plan, engine)
    assert done.recorded_at == 84.0
    assert dev.frontier(S_CAP) == 84.0 and dev.frontier(S_REP) == 0.0
    assert done.payload.length == 7 and len(done.payload) == 42


def test_replay_overlaps_inflight_capture():
    dev = device()
    engine, plan = capture_plan(42)
    dev.submit_capture(S_CAP, 7, plan, engine)
    done = dev.submit_replay(S_REP, graph_of(1e6))
    assert done.recorded_at == 6.0
    assert dev.elapsed() == 84.0


def test_serial_capture_delays_next_replay():
    dev = device()
    engine, plan = capture_plan(42)
    dev.submit_replay(S_REP, graph_of(1e6))
    dev.submit_capture(S_REP, 7, plan, engine)
    done = dev.submit_replay(S_REP, graph_of(1e6))
    assert done.recorded_at - 6.0 == 84.0 + 6.0


def test_record_event_on_idle_stream():
    dev = device()
    dev.submit_kernel(S_REP, kernel(1e6))
    ev = dev.record_event(S_CAP)
    assert ev.recorded_at == 0.0
    assert dev.record_event(S_REP).recorded_at == 6.0


def test_capture_waits_for_replay_event():
    dev = device()
    engine, plan = capture_plan(3)
    dev.submit_kernel(S_REP, kernel(5e6))
    dev.wait_event(S_CAP, dev.record_event(S_REP))
    dev.submit_capture(S_CAP, 1, plan, engine)
    cap = [r for r in dev.trace if r.kind == "capture"][0]
    assert cap.ts_us >= 10.0


def test_wait_on_past_event_adds_no_delay():
    dev = device()
    ev = dev.record_event(S_REP)
    dev.submit_kernel(S_CAP, kernel(1e6))
    dev.wait_event(S_CAP, ev)
    dev.submit_kernel(S_CAP, kernel(0))
    assert dev.frontier(S_CAP) == 11.0


def test_wait_on_unrecorded_event_blocks_until_recorded():
    dev = device()
    ev = dev.create_event()
    dev.wait_event(S_CAP, ev)
    pending = dev.submit_kernel(S_CAP, kernel(0))
    assert not pending.recorded
    dev.submit_kernel(S_REP, kernel(15e6))
    dev.record_event(S_REP, ev)
    assert pending.recorded_at == 20.0 + 5.0


def test_foreign_event_rejected():
    with pytest.raises(UnknownEvent):
        device().wait_event(S_REP, device().create_event())
    with pytest.raises(UnknownEvent):
        device().wait_event(S_REP, "not an event")


def test_elapsed_and_counters():
    dev = device()
    assert dev.elapsed() == 0.0
    dev.submit_kernel(S_REP, kernel(1e6))
    assert dev.elapsed() == 6.0
    seen = []
    for _ in range(5):
        dev.submit_kernel(S_REP, kernel(0))
        seen.append(dev.counters())
    assert all(b.dispatches > a.dispatches for a, b in zip(seen, seen[1:]))


def test_stopped_device_refuses_work():
    dev = device()
    dev.stop()
    with pytest.raises(DeviceStopped):
        dev.submit_kernel(S_REP, kernel(0))


def test_trace_export_format():
    dev = device()
    dev.submit_kernel(S_REP, kernel(1e6, name="matmul"))
    dev.submit_replay(S_REP, graph_of(0, length=4))
    assert dev.export_trace() == (
        "0.000000,S_REP,kernel,matmul,6.000000\n"
        "6.000000,S_REP,replay,G4,5.000000\n"
    )
    assert "dispatches=2\n" in dev.export_counters()


def random_workload(dev, seed):
    """Submit a random mix of work; returns (stream, expected duration) per item.

    Expected durations come from the cost parameters alone, never from the device.
    """
    c = dev.cost
    rng = random.Random(seed)
    engine = CaptureEngine(Workspace())
    compute = lambda flops: c.alpha_us_per_mflop * flops / 1e6  # noqa: E731
    expected = []
    for _ in range(40):
        stream = rng.choice([S_REP, S_CAP])
        kind = rng.random()
        if kind < 0.5:
            flops, mode = rng.randint(0, 5_000_000), rng.choice(list(DispatchMode))
            dev.submit_kernel(stream, kernel(flops), mode)
            host = c.host_dispatch_us if mode is DispatchMode.EAGER else 0.0
            expected.append((stream, host + c.launch_overhead_us + compute(flops)))
        elif kind < 0.7:
            flops = [rng.randint(0, 10**6) for _ in range(3)]
            dev.submit_replay(stream, graph_of(*flops))
            expected.append((stream, c.launch_overhead_us + compute(sum(flops))))
        elif kind < 0.85:
            k = rng.randint(1, 9)
            dev.submit_capture(stream, 1, [kernel(0)] * k, engine)
            expected.append((stream, c.capture_cost_us_per_kernel * k))
        else:
            flops = [rng.randint(0, 10**6) for _ in range(rng.randint(1, 3))]
            dev.submit_fused_block(stream, [kernel(f, OpClass.DYNAMIC) for f in flops])
            expected.append((stream, c.host_dispatch_us + sum(c.launch_overhead_us + compute(f) for f in flops)))
    return expected


@given(st.integers(0, 2**32), st.floats(0, 20), st.floats(0, 20), st.floats(0, 3), st.floats(0, 5))
def test_jitter_free_elapsed_equals_closed_form(seed, launch, host, alpha, gamma):
    dev = VirtualDevice(CostModel(launch, host, alpha, gamma, jitter="none"))
    expected = random_workload(dev, seed)
    clock = {S_REP: 0.0, S_CAP: 0.0}
    for record, (stream, duration) in zip(dev.trace, expected):
        assert record.stream == stream
        assert record.ts_us == pytest.approx(clock[stream], abs=1e-6)
        assert record.duration_us == pytest.approx(duration, abs=1e-6)
        clock[stream] += duration
    assert dev.elapsed() == pytest.approx(max(clock.values()), abs=1e-6)


def test_same_seed_same_timeline():
    traces = []
    for _ in range(2):
        dev = VirtualDevice(CostModel(jitter_seed=77))
        random_workload(dev, 5)
        traces.append(dev.export_trace())
    assert traces[0] == traces[1]
    other = VirtualDevice(CostModel(jitter_seed=78))
    random_workload(other, 5)
    assert other.export_trace() != traces[0]


def test_overlap_of_independent_streams():
    dev = device()
    engine, plan = capture_plan(10)
    for _ in range(7):
        dev.submit_replay(S_REP, graph_of(3e6))
    dev.submit_capture(S_CAP, 1, plan, engine)
    dev.submit_capture(S_CAP, 2, plan, engine)
    assert dev.elapsed() == max(7 * 8.0, 2 * 20.0)


@pytest.mark.slow
def test_lognormal_jitter_quantile_ratio():
    dev = VirtualDevice(CostModel(launch_overhead_us=5.0, host_dispatch_us=0.0, alpha_us_per_mflop=0.0,
                                  jitter_sigma=0.25, jitter_seed=123))
    inv = kernel(0)
    for _ in range(100_000):
        dev.submit_kernel(S_REP, inv, DispatchMode.FUSED_BLOCK_MEMBER)
    durations = sorted(r.duration_us for r in dev.trace)
    n = len(durations)
    median = durations[math.ceil(0.5 * n) - 1]
    p99 = durations[math.ceil(0.99 * n) - 1]
    assert abs(p99 / median / LOGNORMAL_P99_OVER_MEDIAN - 1) < 0.05


def test_jitter_only_scales_the_launch():
    dev = VirtualDevice(CostModel(launch_overhead_us=0.0, host_dispatch_us=0.0, alpha_us_per_mflop=1.0))
    dev.submit_kernel(S_REP, kernel(3e6))
    assert dev.elapsed() == 3.0
