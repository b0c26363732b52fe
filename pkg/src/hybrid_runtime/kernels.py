"""Deterministic float32 kernels for a decoder-only transformer.

Every kernel comes in two forms: ``bind_<op>(...)`` returns a deferred
:class:`KernelInvocation` (what the device dispatches and what capture
records), and ``<op>(...)`` binds and runs immediately, returning the
:class:`KernelSpec` (or the sampled token for :func:`sample_token`).

Flop conventions, per kernel name:

=================  ==========================================
matmul             2*m*k*n
matmul_relu        2*m*k*n + m*n
layernorm          8 per element
attention          n_heads * L * (4*head_dim + 3), L = attended positions
add                1 per output element
embedding_lookup   0 (row copies)
extend_positions   1 per output element
kv_append          0 (row copies)
sample_token       vocab
=================  ==========================================
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    CacheFull,
    EmptyCache,
    LengthOutOfRange,
    ShapeMismatch,
    TokenOutOfRange,
)
from ._loops import attention_into, layernorm_into, matmul_into
from .tensor import Tensor


class OpClass(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


# Classification is a property of the operation, never of a call site.
OP_CLASSES: dict[str, OpClass] = {
    "matmul": OpClass.STATIC,
    "matmul_relu": OpClass.STATIC,
    "layernorm": OpClass.STATIC,
    "attention": OpClass.STATIC,
    "add": OpClass.STATIC,
    "embedding_lookup": OpClass.STATIC,
    "extend_positions": OpClass.DYNAMIC,
    "kv_append": OpClass.DYNAMIC,
    "sample_token": OpClass.DYNAMIC,
}

DYNAMIC_KERNELS = frozenset(n for n, c in OP_CLASSES.items() if c is OpClass.DYNAMIC)


@dataclass(frozen=True)
class KernelSpec:
    name: str
    op_class: OpClass
    input_buffers: tuple[int, ...]
    output_buffers: tuple[int, ...]
    flops: int


@dataclass(frozen=True, eq=False)
class KernelInvocation:
    """A kernel bound to concrete buffers, ready to run.

    ``shapes`` freezes the shape of every binding (inputs, then outputs) at
    bind time so that replay can detect buffers reshaped since capture.
    """

    spec: KernelSpec
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    shapes: tuple[tuple[int, ...], ...]
    fn: Callable[[], object] = field(repr=False)

    @property
    def bindings(self) -> tuple[Tensor, ...]:
        return self.inputs + self.outputs

    def __call__(self):
        return self.fn()


def _invocation(name, inputs, outputs, flops, fn) -> KernelInvocation:
    spec = KernelSpec(
        name=name,
        op_class=OP_CLASSES[name],
        input_buffers=tuple(t.buffer_id for t in inputs),
        output_buffers=tuple(t.buffer_id for t in outputs),
        flops=int(flops),
    )
    shapes = tuple(t.shape for t in (*inputs, *outputs))
    return KernelInvocation(spec, tuple(inputs), tuple(outputs), shapes, fn)


# ---------------------------------------------------------------------------
# KV cache


class KvCache:
    """Per-layer key/value storage of shape ``[max_seq, n_heads, head_dim]``.

    ``cur_len`` counts committed positions and is shared by all layers.
    """

    def __init__(self, n_layers: int, max_seq: int, n_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.max_seq = max_seq
        self.n_heads = n_heads
        self.head_dim = head_dim
        shape = (max_seq, n_heads, head_dim)
        self.keys = [Tensor.zeros(shape, f"kv.k{l}") for l in range(n_layers)]
        self.values = [Tensor.zeros(shape, f"kv.v{l}") for l in range(n_layers)]
        self.cur_len = 0

    def tensors(self) -> list[Tensor]:
        return [*self.keys, *self.values]

    def reset(self) -> None:
        """Forget all positions. Buffers (and their ids) are kept."""
        for t in self.tensors():
            t.data.fill(0.0)
        self.cur_len = 0

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the valid region, stacked over layers."""
        n = self.cur_len
        k = np.stack([t.data[:n].copy() for t in self.keys])
        v = np.stack([t.data[:n].copy() for t in self.values])
        return k, v


# ---------------------------------------------------------------------------
# static kernels


def bind_matmul(a: Tensor, b: Tensor, out: Tensor, relu: bool = False) -> KernelInvocation:
    if a.data.ndim != 2 or b.data.ndim != 2 or out.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-d operands, got {a.shape}, {b.shape}, {out.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2 or out.shape != (m, n):
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape} -> {out.shape}")
    flops = 2 * m * k * n + (m * n if relu else 0)

    if np.may_share_memory(out.data, a.data) or np.may_share_memory(out.data, b.data):
        # never write over an operand that later rows still read
        def run():
            tmp = np.empty(out.shape, dtype=np.float32)
            matmul_into(a.data, b.data, tmp, relu)
            out.data[...] = tmp
    else:
        def run():
            matmul_into(a.data, b.data, out.data, relu)

    return _invocation("matmul_relu" if relu else "matmul", (a, b), (out,), flops, run)


def matmul(a: Tensor, b: Tensor, out: Tensor) -> KernelSpec:
    """``out = a @ b``."""
    inv = bind_matmul(a, b, out)
    inv()
    return inv.spec


def bind_layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, out: Tensor) -> KernelInvocation:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.data.ndim != 2 or out.shape != x.shape:
        raise ShapeMismatch(f"layernorm {x.shape} -> {out.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm params {gamma.shape}, {beta.shape} for width {d}")
    eps = float(eps)

    def run():
        layernorm_into(x.data, gamma.data, beta.data, eps, out.data)

    return _invocation("layernorm", (x, gamma, beta), (out,), 8 * x.size, run)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, out: Tensor) -> KernelSpec:
    """Row-wise normalisation with population variance, eps inside the root."""
    inv = bind_layernorm(x, gamma, beta, eps, out)
    inv()
    return inv.spec


def bind_add(a: Tensor, b: Tensor, out: Tensor) -> KernelInvocation:
    if not (a.shape == b.shape == out.shape):
        raise ShapeMismatch(f"add {a.shape} + {b.shape} -> {out.shape}")

    def run():
        np.add(a.data, b.data, out=out.data)

    return _invocation("add", (a, b), (out,), out.size, run)


def add(a: Tensor, b: Tensor, out: Tensor) -> KernelSpec:
    inv = bind_add(a, b, out)
    inv()
    return inv.spec


def bind_attention(
    q: Tensor,
    kv: KvCache,
    scale: float,
    out: Tensor,
    *,
    layer: int = 0,
    n_cached: int | None = None,
    k_cur: Tensor | None = None,
    v_cur: Tensor | None = None,
) -> KernelInvocation:
    """Single-query attention over a frozen number of positions.

    Attends over cache positions ``[0, n_cached)`` (default: ``kv.cur_len`` at
    bind time) followed, when given, by the current token's ``k_cur``/``v_cur``.
    The attended length is fixed at bind time, which is what makes a captured
    graph specific to one sequence length.
    """
    h, dh = kv.n_heads, kv.head_dim
    if q.size != h * dh or out.size != h * dh:
        raise ShapeMismatch(f"attention q {q.shape} / out {out.shape} vs {h}x{dh} heads")
    if (k_cur is None) != (v_cur is None):
        raise ValueError("k_cur and v_cur must be given together")
    if k_cur is not None and (k_cur.size != h * dh or v_cur.size != h * dh):
        raise ShapeMismatch(f"current k/v {k_cur.shape}, {v_cur.shape}")
    if n_cached is None:
        n_cached = kv.cur_len
    if not 0 <= n_cached <= kv.max_seq:
        raise LengthOutOfRange(f"n_cached={n_cached} outside [0, {kv.max_seq}]")
    length = n_cached + (k_cur is not None)
    if length == 0:
        raise EmptyCache("attention over an empty cache")

    keys, values = kv.keys[layer], kv.values[layer]
    scale = float(scale)
    has_cur = k_cur is not None
    k_src = k_cur if has_cur else q  # placeholders when there is no current token
    v_src = v_cur if has_cur else q

    def run():
        attention_into(q.data.reshape(-1), keys.data, values.data, n_cached,
                       k_src.data.reshape(-1), v_src.data.reshape(-1), has_cur, scale,
                       out.data.reshape(-1))

    inputs = (q, keys, values) + ((k_cur, v_cur) if k_cur is not None else ())
    return _invocation("attention", inputs, (out,), h * length * (4 * dh + 3), run)


def attention(q: Tensor, kv: KvCache, scale: float, out: Tensor, *, layer: int = 0) -> KernelSpec:
    """``out = softmax(q K^T * scale) V`` over cache positions ``[0, cur_len)``."""
    inv = bind_attention(q, kv, scale, out, layer=layer)
    inv()
    return inv.spec


def bind_embedding_lookup(token_ids: Sequence[int], table: Tensor, out: Tensor) -> KernelInvocation:
    vocab, d = table.shape
    ids = [int(t) for t in token_ids]
    for t in ids:
        if not 0 <= t < vocab:
            raise TokenOutOfRange(f"token {t} outside [0, {vocab})")
    if out.shape != (len(ids), d):
        raise ShapeMismatch(f"embedding out {out.shape}, expected {(len(ids), d)}")
    index = np.array(ids, dtype=np.intp)

    def run():
        out.data[...] = table.data[index]

    return _invocation("embedding_lookup", (table,), (out,), 0, run)


def embedding_lookup(token_ids: Sequence[int], table: Tensor, out: Tensor) -> KernelSpec:
    inv = bind_embedding_lookup(token_ids, table, out)
    inv()
    return inv.spec


# ---------------------------------------------------------------------------
# dynamic kernels


def bind_extend_positions(
    token: int, position: int, tok_table: Tensor, pos_table: Tensor, out: Tensor
) -> KernelInvocation:
    """Step input: token embedding plus the positional row for ``position``."""
    vocab, d = tok_table.shape
    if not 0 <= token < vocab:
        raise TokenOutOfRange(f"token {token} outside [0, {vocab})")
    if not 0 <= position < pos_table.shape[0]:
        raise LengthOutOfRange(f"position {position} outside [0, {pos_table.shape[0]})")
    if out.shape != (1, d) or pos_table.shape[1] != d:
        raise ShapeMismatch(f"extend_positions out {out.shape} for width {d}")

    def run():
        np.add(tok_table.data[token], pos_table.data[position], out=out.data[0])

    return _invocation("extend_positions", (tok_table, pos_table), (out,), d, run)


def extend_positions(token: int, position: int, tok_table: Tensor, pos_table: Tensor, out: Tensor) -> KernelSpec:
    inv = bind_extend_positions(token, position, tok_table, pos_table, out)
    inv()
    return inv.spec


def bind_kv_append(kv: KvCache, k_new: Tensor, v_new: Tensor) -> KernelInvocation:
    """Write one position per layer at ``kv.cur_len`` and advance it.

    ``k_new``/``v_new`` hold ``n_layers * n_heads * head_dim`` values, layer-major.
    """
    per_pos = (kv.n_layers, kv.n_heads, kv.head_dim)
    if k_new.size != math.prod(per_pos) or v_new.size != math.prod(per_pos):
        raise ShapeMismatch(f"kv_append {k_new.shape}/{v_new.shape}, expected {per_pos}")

    def run():
        pos = kv.cur_len
        if pos >= kv.max_seq:
            raise CacheFull(f"cache holds {kv.max_seq} positions")
        k = k_new.data.reshape(per_pos)
        v = v_new.data.reshape(per_pos)
        for layer in range(kv.n_layers):
            kv.keys[layer].data[pos] = k[layer]
            kv.values[layer].data[pos] = v[layer]
        kv.cur_len = pos + 1

    return _invocation("kv_append", (k_new, v_new), tuple(kv.tensors()), 0, run)


def kv_append(kv: KvCache, k_new: Tensor, v_new: Tensor) -> KernelSpec:
    inv = bind_kv_append(kv, k_new, v_new)
    inv()
    return inv.spec


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True, eq=False)
class Temperature:
    t: float
    rng: np.random.Generator

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("temperature must be positive")


GREEDY = Greedy()


class TokenSlot:
    """Where a deferred :func:`sample_token` invocation leaves its result."""

    __slots__ = ("value",)

    def __init__(self):
        self.value: int | None = None


def _sample(logits: np.ndarray, strategy) -> int:
    flat = logits.reshape(-1)
    if isinstance(strategy, Greedy):
        return int(np.argmax(flat))  # first maximum wins ties
    z = flat / np.float32(strategy.t)
    p = np.exp(z - z.max())
    cdf = np.cumsum(p, dtype=np.float64)
    u = strategy.rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), flat.size - 1)


def bind_sample_token(logits: Tensor, strategy=GREEDY, slot: TokenSlot | None = None) -> KernelInvocation:
    slot = slot if slot is not None else TokenSlot()

    def run():
        slot.value = _sample(logits.data, strategy)
        return slot.value

    return _invocation("sample_token", (logits,), (), logits.size, run)


def sample_token(logits: Tensor, strategy=GREEDY) -> int:
    """Greedy argmax (lowest index on ties) or temperature sampling."""
    return bind_sample_token(logits, strategy)()
