"""A toy decoder-only transformer that emits per-length static kernel plans.

One decode step at context length L (the current token sits at position L-1)
runs, for every layer::

    layernorm -> Wq, Wk, Wv matmuls -> attention over L positions -> Wo matmul
    -> residual add -> layernorm -> W1 matmul+relu -> W2 matmul -> residual add

followed by a final layernorm and the output-head matmul: 11 * n_layers + 2
static kernels, whatever L is. The current token's keys and values go to
staging buffers; they are committed to the KV cache afterwards by the dynamic
``kv_append`` kernel, so the graph itself never writes a length-dependent slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .device import S_REP, DispatchMode, VirtualDevice
from .errors import EmptyPrompt, InvalidConfig, LengthOutOfRange, PromptTooLong, WrongLength
from .graph import CaptureEngine, Workspace
from .kernels import (
    KernelInvocation,
    KvCache,
    bind_add,
    bind_attention,
    bind_extend_positions,
    bind_kv_append,
    bind_layernorm,
    bind_matmul,
)
from .tensor import Tensor

KERNELS_PER_LAYER = 11


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab: int = 256
    max_seq: int = 600
    seed: int = 0
    # fed to the first decode step, after the prompt
    start_token: int = 0
    ffn_mult: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab", "max_seq", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0 <= self.start_token < self.vocab:
            raise InvalidConfig(f"start_token {self.start_token} outside vocab")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")
        if self.eps <= 0:
            raise InvalidConfig("eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def plan_length(self) -> int:
        return KERNELS_PER_LAYER * self.n_layers + 2

    @classmethod
    def from_mapping(cls, values: dict) -> ModelConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise InvalidConfig(f"unknown model keys: {sorted(unknown)}")
        cast = {k: (float(v) if k == "eps" else int(v)) for k, v in values.items()}
        return cls(**cast)


@dataclass
class LayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    w2: Tensor


@dataclass
class Weights:
    config: ModelConfig
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerWeights]
    lnf_g: Tensor
    lnf_b: Tensor
    w_head: Tensor

    def tensors(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb]
        for lw in self.layers:
            out.extend(getattr(lw, f.name) for f in fields(LayerWeights))
        out.extend([self.lnf_g, self.lnf_b, self.w_head])
        return out

    @property
    def buffer_ids(self) -> frozenset[int]:
        return frozenset(t.buffer_id for t in self.tensors())


def init_model(config: ModelConfig) -> Weights:
    """Weights drawn uniformly from [-0.1, 0.1], in a fixed order, from ``config.seed``."""
    if not isinstance(config, ModelConfig):
        raise InvalidConfig(f"expected ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(config.seed)
    d, dff = config.d_model, config.d_ff

    def draw(shape, name):
        return Tensor(rng.uniform(-0.1, 0.1, size=shape).astype(np.float32), name)

    tok_emb = draw((config.vocab, d), "tok_emb")
    pos_emb = draw((config.max_seq, d), "pos_emb")
    layers = []
    for l in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_g=draw((d,), f"l{l}.ln1_g"),
            ln1_b=draw((d,), f"l{l}.ln1_b"),
            wq=draw((d, d), f"l{l}.wq"),
            wk=draw((d, d), f"l{l}.wk"),
            wv=draw((d, d), f"l{l}.wv"),
            wo=draw((d, d), f"l{l}.wo"),
            ln2_g=draw((d,), f"l{l}.ln2_g"),
            ln2_b=draw((d,), f"l{l}.ln2_b"),
            w1=draw((d, dff), f"l{l}.w1"),
            w2=draw((dff, d), f"l{l}.w2"),
        ))
    return Weights(
        config=config,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        layers=layers,
        lnf_g=draw((d,), "lnf_g"),
        lnf_b=draw((d,), "lnf_b"),
        w_head=draw((d, config.vocab), "w_head"),
    )


@dataclass
class StepBuffers:
    """Activation buffers for one decode step, plus the KV cache."""

    x: Tensor  # residual stream; the step's input
    normed: Tensor
    q: Tensor
    attn: Tensor
    proj: Tensor
    hidden: Tensor
    mlp: Tensor
    logits: Tensor
    k_stage: Tensor  # [n_layers, d_model]
    v_stage: Tensor
    k_rows: list[Tensor]
    v_rows: list[Tensor]
    kv: KvCache

    @classmethod
    def allocate(cls, config: ModelConfig, workspace: Workspace) -> StepBuffers:
        d = config.d_model
        ws = workspace
        k_stage = ws.allocate((config.n_layers, d), "k_stage")
        v_stage = ws.allocate((config.n_layers, d), "v_stage")
        k_rows = [ws.adopt(k_stage.row(l), alias=True) for l in range(config.n_layers)]
        v_rows = [ws.adopt(v_stage.row(l), alias=True) for l in range(config.n_layers)]
        kv = KvCache(config.n_layers, config.max_seq, config.n_heads, config.head_dim)
        for t in kv.tensors():
            ws.adopt(t)
        return cls(
            x=ws.allocate((1, d), "x"),
            normed=ws.allocate((1, d), "normed"),
            q=ws.allocate((1, d), "q"),
            attn=ws.allocate((1, d), "attn"),
            proj=ws.allocate((1, d), "proj"),
            hidden=ws.allocate((1, config.d_ff), "hidden"),
            mlp=ws.allocate((1, d), "mlp"),
            logits=ws.allocate((1, config.vocab), "logits"),
            k_stage=k_stage,
            v_stage=v_stage,
            k_rows=k_rows,
            v_rows=v_rows,
            kv=kv,
        )


@dataclass
class StepContext:
    """Input of one step: ``x`` holds the preprocessed token at position ``length - 1``."""

    x: Tensor
    length: int
    kv: KvCache
    token: int = 0


def static_kernel_plan(weights: Weights, length: int, buffers: StepBuffers) -> list[KernelInvocation]:
    """The ordered static kernels of one step at context length ``length``."""
    cfg = weights.config
    if not 1 <= length <= cfg.max_seq:
        raise LengthOutOfRange(f"length {length} outside [1, {cfg.max_seq}]")
    b = buffers
    scale = 1.0 / math.sqrt(cfg.head_dim)
    plan: list[KernelInvocation] = []
    for l, lw in enumerate(weights.layers):
        plan += [
            bind_layernorm(b.x, lw.ln1_g, lw.ln1_b, cfg.eps, b.normed),
            bind_matmul(b.normed, lw.wq, b.q),
            bind_matmul(b.normed, lw.wk, b.k_rows[l]),
            bind_matmul(b.normed, lw.wv, b.v_rows[l]),
            bind_attention(b.q, b.kv, scale, b.attn, layer=l, n_cached=length - 1,
                           k_cur=b.k_rows[l], v_cur=b.v_rows[l]),
            bind_matmul(b.attn, lw.wo, b.proj),
            bind_add(b.x, b.proj, b.x),
            bind_layernorm(b.x, lw.ln2_g, lw.ln2_b, cfg.eps, b.normed),
            bind_matmul(b.normed, lw.w1, b.hidden, relu=True),
            bind_matmul(b.hidden, lw.w2, b.mlp),
            bind_add(b.x, b.mlp, b.x),
        ]
    plan += [
        bind_layernorm(b.x, weights.lnf_g, weights.lnf_b, cfg.eps, b.normed),
        bind_matmul(b.normed, weights.w_head, b.logits),
    ]
    return plan


class ToyTransformer:
    """Weights plus the buffers and plans that one runtime instance owns."""

    def __init__(self, weights: Weights):
        self.weights = weights
        self.config = weights.config
        self.workspace = Workspace()
        self.buffers = StepBuffers.allocate(self.config, self.workspace)
        self.workspace.freeze()
        self.engine = CaptureEngine(self.workspace, weights.buffer_ids)
        self._plans: dict[int, tuple[KernelInvocation, ...]] = {}
        self._commit = bind_kv_append(self.kv, self.buffers.k_stage, self.buffers.v_stage)

    @property
    def kv(self) -> KvCache:
        return self.buffers.kv

    def static_kernel_plan(self, length: int) -> tuple[KernelInvocation, ...]:
        plan = self._plans.get(length)
        if plan is None:
            plan = tuple(static_kernel_plan(self.weights, length, self.buffers))
            self._plans[length] = plan
        return plan

    def bind_preprocess(self, token: int, length: int) -> KernelInvocation:
        w = self.weights
        return bind_extend_positions(token, length - 1, w.tok_emb, w.pos_emb, self.buffers.x)

    def bind_commit(self) -> KernelInvocation:
        # kv_append reads the write position at run time, so one binding serves every step
        return self._commit

    def context(self, token: int, length: int) -> StepContext:
        return StepContext(self.buffers.x, length, self.kv, token)

    def preprocess(self, token: int, device: VirtualDevice, stream: str = S_REP) -> StepContext:
        """Prepare the next step's input eagerly; the step's length is ``cur_len + 1``."""
        length = self.kv.cur_len + 1
        device.submit_kernel(stream, self.bind_preprocess(token, length))
        return self.context(token, length)

    def forward_eager(self, ctx: StepContext, device: VirtualDevice, stream: str = S_REP) -> Tensor:
        """Dispatch the static plan kernel by kernel; returns the logits buffer."""
        if ctx.kv.cur_len + 1 != ctx.length:
            raise WrongLength(f"context length {ctx.length} with {ctx.kv.cur_len} cached positions")
        for inv in self.static_kernel_plan(ctx.length):
            device.submit_kernel(stream, inv, DispatchMode.EAGER)
        return self.buffers.logits

    def commit(self, device: VirtualDevice, stream: str = S_REP) -> None:
        device.submit_kernel(stream, self.bind_commit())

    def prefill(self, prompt: Sequence[int], device: VirtualDevice, stream: str = S_REP) -> StepContext:
        """Run the prompt token by token, then prepare the first decode step."""
        prompt = list(prompt)
        if not prompt:
            raise EmptyPrompt("prompt is empty")
        if self.kv.cur_len + len(prompt) >= self.config.max_seq:
            raise PromptTooLong(f"prompt of {len(prompt)} leaves no room in max_seq={self.config.max_seq}")
        for token in prompt:
            ctx = self.preprocess(token, device, stream)
            self.forward_eager(ctx, device, stream)
            self.commit(device, stream)
        return self.preprocess(self.config.start_token, device, stream)

    def reset(self) -> None:
        self.kv.reset()
