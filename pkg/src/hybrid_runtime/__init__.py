"""Hybrid graph-replay / fused-dynamic decoding runtime on a deterministic virtual device."""
from .bench import BenchConfig, LatencySummary, emit_csv, emit_summary, percentile, run_bench
from .cache import CacheStats, EvictionPolicy, GraphCache
from .device import S_CAP, S_REP, CostModel, Counters, DispatchMode, VirtualDevice
from .graph import CaptureEngine, ExecGraph, Workspace, replay
from .kernels import GREEDY, KernelInvocation, KernelSpec, KvCache, OpClass, Temperature
from .model import ModelConfig, StepContext, ToyTransformer, Weights, init_model, static_kernel_plan
from .pipeline import CacheConfig, GenerationResult, HybridRuntime, RunMode, StepPath, run_inference
from .tensor import Tensor

__all__ = [
    "BenchConfig", "CacheConfig", "CacheStats", "CaptureEngine", "CostModel", "Counters",
    "DispatchMode", "EvictionPolicy", "ExecGraph", "GREEDY", "GenerationResult", "GraphCache",
    "HybridRuntime", "KernelInvocation", "KernelSpec", "KvCache", "LatencySummary", "ModelConfig",
    "OpClass", "RunMode", "S_CAP", "S_REP", "StepContext", "StepPath", "Temperature", "Tensor",
    "ToyTransformer", "VirtualDevice", "Weights", "Workspace", "emit_csv", "emit_summary",
    "init_model", "percentile", "replay", "run_bench", "run_inference", "static_kernel_plan",
]
