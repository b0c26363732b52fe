import numpy as np
import pytest

from hybrid_runtime import ToyTransformer, VirtualDevice
from hybrid_runtime.device import S_REP
from hybrid_runtime.errors import (
    CaptureInProgress,
    CaptureViolation,
    EmptyCapture,
    ForeignBuffer,
    ReplayShapeError,
    SessionClosed,
    WorkspaceFrozen,
    WrongLength,
)
from hybrid_runtime.graph import CaptureEngine, SessionState, Workspace, replay
from hybrid_runtime.kernels import GREEDY, bind_add, bind_matmul, bind_sample_token
from hybrid_runtime.tensor import Tensor


@pytest.fixture
def engine():
    ws = Workspace()
    a = ws.allocate((1, 3), "a")
    b = ws.allocate((1, 3), "b")
    out = ws.allocate((1, 3), "out")
    w = Tensor.from_values(np.eye(3), "w")
    eng = CaptureEngine(ws, {w.buffer_id})
    eng.buffers = (a, b, out, w)
    return eng


def test_begin_capture(engine):
    session = engine.begin_capture(5)
    assert session.state is SessionState.OPEN
    with pytest.raises(CaptureInProgress):
        engine.begin_capture(5)
    assert engine.begin_capture(6).state is SessionState.OPEN


def test_record_static_kernel(engine):
    a, b, out, w = engine.buffers
    session = engine.begin_capture(1)
    engine.record(session, bind_matmul(a, w, out))
    assert len(session.recorded) == 1


def test_dynamic_kernel_aborts_session(engine):
    a, _, out, _ = engine.buffers
    session = engine.begin_capture(1)
    with pytest.raises(CaptureViolation):
        engine.record(session, bind_sample_token(out, GREEDY))
    assert session.state is SessionState.ABORTED
    with pytest.raises(SessionClosed):
        engine.record(session, bind_add(a, a, out))
    # the key is free again
    engine.begin_capture(1)


def test_foreign_buffer_rejected(engine):
    a, _, out, _ = engine.buffers
    stray = Tensor.zeros((1, 3))
    session = engine.begin_capture(1)
    with pytest.raises(ForeignBuffer):
        engine.record(session, bind_add(a, stray, out))
    assert session.state is SessionState.ABORTED


def test_empty_capture(engine):
    with pytest.raises(EmptyCapture):
        engine.end_capture(engine.begin_capture(2))


def test_end_capture_closes_session(engine):
    a, b, out, w = engine.buffers
    session = engine.begin_capture(3)
    engine.record(session, bind_add(a, b, out))
    graph = engine.end_capture(session)
    assert session.state is SessionState.CLOSED
    with pytest.raises(SessionClosed):
        engine.end_capture(session)
    assert graph.length == 3 and len(graph) == 1
    assert graph.footprint == {a.buffer_id, b.buffer_id, out.buffer_id}


def test_capture_epochs_increase(engine):
    a, b, out, _ = engine.buffers
    epochs = [engine.capture(4, [bind_add(a, b, out)]).capture_epoch for _ in range(3)]
    assert epochs == sorted(epochs) and len(set(epochs)) == 3


def test_graph_is_immutable(engine):
    a, b, out, _ = engine.buffers
    graph = engine.capture(1, [bind_add(a, b, out)])
    with pytest.raises(AttributeError):
        graph.length = 2


def test_replay_binds_buffers_not_values(engine):
    a, b, out, w = engine.buffers
    graph = engine.capture(1, [bind_add(a, b, out), bind_matmul(out, w, a)])
    dev = VirtualDevice()
    a.data[...] = [[1, 2, 3]]
    b.data[...] = [[1, 1, 1]]
    replay(graph, dev, S_REP)
    assert a.data.tolist() == [[2, 3, 4]]
    b.data[...] = [[10, 10, 10]]
    replay(graph, dev, S_REP)
    assert a.data.tolist() == [[12, 13, 14]]
    assert dev.counters().dispatches == 2


def test_replay_detects_reshaped_buffer(engine):
    a, b, out, _ = engine.buffers
    graph = engine.capture(1, [bind_add(a, b, out)])
    b.reshape_((3, 1))
    with pytest.raises(ReplayShapeError):
        replay(graph, VirtualDevice(), S_REP)


def test_workspace_freezes():
    ws = Workspace()
    ws.allocate((2, 2))
    ws.freeze()
    with pytest.raises(WorkspaceFrozen):
        ws.allocate((1,))
    assert ws.pool_bytes == 16


# -- against the model's plans --------------------------------------------------


def test_capture_of_plan_matches_plan(weights):
    model = ToyTransformer(weights)
    plan = model.static_kernel_plan(3)
    graph = model.engine.capture(3, plan)
    assert len(graph) == len(plan) == 46
    assert graph.total_flops == sum(inv.spec.flops for inv in plan)
    assert graph.footprint <= model.workspace.buffer_ids


def test_replay_with_wrong_length(weights):
    model, dev = ToyTransformer(weights), VirtualDevice()
    graph = model.engine.capture(5, model.static_kernel_plan(5))
    model.prefill([1] * 6, dev)
    with pytest.raises(WrongLength):
        replay(graph, dev, S_REP, kv=model.kv)


def test_replay_is_single_dispatch_and_equals_eager(weights):
    model, dev = ToyTransformer(weights), VirtualDevice()
    ctx = model.prefill([4, 8, 15, 16], dev)
    snapshot = model.buffers.x.data.copy()
    before = dev.counters()
    eager = model.forward_eager(ctx, dev).data.copy()
    assert (dev.counters() - before).dispatches == 46
    graph = model.engine.capture(ctx.length, model.static_kernel_plan(ctx.length))
    for _ in range(2):
        model.buffers.x.data[...] = snapshot
        before = dev.counters()
        replay(graph, dev, S_REP, kv=model.kv)
        assert (dev.counters() - before).dispatches == 1
        assert np.array_equal(model.buffers.logits.data, eager)


def test_pool_size_independent_of_graph_count(weights):
    model = ToyTransformer(weights)
    size = model.workspace.pool_bytes
    graphs = [model.engine.capture(n, model.static_kernel_plan(n)) for n in range(1, 31)]
    assert len(graphs) == 30
    assert model.workspace.pool_bytes == size


def test_dump_lists_every_kernel(weights):
    model = ToyTransformer(weights)
    text = model.engine.capture(2, model.static_kernel_plan(2)).dump()
    lines = text.splitlines()
    assert lines[0].startswith("# graph length=2")
    assert len(lines) == 47
    assert "attention" in lines[5]
