"""Repeated seeded trials over a (mode, prompt length, generation length) grid."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cache import EvictionPolicy
from .device import CostModel, VirtualDevice
from .errors import BenchCellError, EmptySamples, InvalidConfig
from .model import ModelConfig, init_model
from .pipeline import CacheConfig, GenerationResult, HybridRuntime, RunMode

log = logging.getLogger(__name__)

DEFAULT_LENGTHS = (10, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500)

CSV_HEADER = (
    "mode,prompt_len,gen_len,trial,ttft_us,total_us,mean_tok_us,p99_tok_us,"
    "dispatches,replays,captures,cache_hits,cache_misses"
)
CSV_FIELDS = tuple(CSV_HEADER.split(","))


def percentile(samples: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest sample."""
    if len(samples) == 0:
        raise EmptySamples("percentile of no samples")
    if not 0 < p <= 100:
        raise ValueError(f"p must be in (0, 100], got {p}")
    ordered = sorted(samples)
    # exact decimal arithmetic keeps e.g. 99% of 100 at rank 99, not 100
    rank = math.ceil(Fraction(repr(float(p))) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class BenchConfig:
    model: ModelConfig = ModelConfig()
    modes: tuple[RunMode, ...] = (RunMode.EAGER, RunMode.HYBRID)
    prompt_lens: tuple[int, ...] = DEFAULT_LENGTHS
    gen_lens: tuple[int, ...] = DEFAULT_LENGTHS
    trials: int = 1000
    base_seed: int = 0
    cost: CostModel = CostModel()
    cache: CacheConfig = CacheConfig()
    out: str | None = None
    trace: str | None = None
    keep_warm: bool = False
    keep_token_samples: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise InvalidConfig("trials must be >= 1")
        if not self.modes:
            raise InvalidConfig("at least one mode is required")
        if any(p < 1 for p in self.prompt_lens) or any(g < 1 for g in self.gen_lens):
            raise InvalidConfig("lengths must be positive")
        if not 0 <= self.base_seed < 2**64:
            raise InvalidConfig("base_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "modes", tuple(RunMode(m) for m in self.modes))

    def cells(self) -> list[tuple[RunMode, int, int]]:
        """Grid cells in output order; cells that do not fit in max_seq are dropped."""
        out = []
        for mode in self.modes:
            for p in self.prompt_lens:
                for g in self.gen_lens:
                    if p + g > self.model.max_seq:
                        log.warning("skipping %s prompt=%d gen=%d: exceeds max_seq=%d",
                                    mode.value, p, g, self.model.max_seq)
                        continue
                    out.append((mode, p, g))
        return out


@dataclass
class TrialRow:
    mode: str
    prompt_len: int
    gen_len: int
    trial: int
    ttft_us: float
    total_us: float
    mean_tok_us: float
    p99_tok_us: float
    dispatches: int
    replays: int
    captures: int
    cache_hits: int
    cache_misses: int
    token_latencies: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def warm(self) -> bool:
        return self.trial == 0

    @property
    def cell(self) -> tuple[str, int, int]:
        return (self.mode, self.prompt_len, self.gen_len)

    @classmethod
    def from_result(cls, mode: RunMode, gen_len: int, trial: int, result: GenerationResult,
                    keep_samples: bool) -> TrialRow:
        lat = result.token_latencies
        return cls(
            mode=mode.value,
            prompt_len=result.prompt_len,
            gen_len=gen_len,
            trial=trial,
            ttft_us=result.ttft_us,
            total_us=result.total_us,
            mean_tok_us=_mean(lat),
            p99_tok_us=percentile(lat, 99),
            dispatches=result.counters.dispatches,
            replays=result.counters.graph_replays,
            captures=result.counters.captures,
            cache_hits=result.cache_stats.hits,
            cache_misses=result.cache_stats.misses,
            token_latencies=tuple(lat) if keep_samples else (),
        )

    def csv_values(self) -> list[str]:
        return [self.mode, str(self.prompt_len), str(self.gen_len), str(self.trial),
                repr(self.ttft_us), repr(self.total_us), repr(self.mean_tok_us), repr(self.p99_tok_us),
                str(self.dispatches), str(self.replays), str(self.captures),
                str(self.cache_hits), str(self.cache_misses)]


@dataclass(frozen=True)
class LatencySummary:
    """Statistics of one grid cell over its kept trials.

    TTFT figures are over per-trial TTFT. ``tok_mean`` averages the per-trial
    mean per-token latency; ``tok_p50``/``tok_p99`` are taken over the
    per-trial P99 per-token latency. Counter fields are totals.
    """

    mode: str
    prompt_len: int
    gen_len: int
    trials: int
    ttft_mean: float
    ttft_p50: float
    ttft_p99: float
    tok_mean: float
    tok_p50: float
    tok_p99: float
    dispatches: int
    replays: int
    captures: int
    cache_hits: int
    cache_misses: int


def summarize(rows: Iterable[TrialRow]) -> dict[tuple[str, int, int], LatencySummary]:
    groups: dict[tuple[str, int, int], list[TrialRow]] = {}
    for r in rows:
        if not r.warm:
            groups.setdefault(r.cell, []).append(r)
    out = {}
    for cell, rs in groups.items():
        ttft = [r.ttft_us for r in rs]
        tok_p99 = [r.p99_tok_us for r in rs]
        out[cell] = LatencySummary(
            *cell,
            trials=len(rs),
            ttft_mean=_mean(ttft),
            ttft_p50=percentile(ttft, 50),
            ttft_p99=percentile(ttft, 99),
            tok_mean=_mean([r.mean_tok_us for r in rs]),
            tok_p50=percentile(tok_p99, 50),
            tok_p99=percentile(tok_p99, 99),
            dispatches=sum(r.dispatches for r in rs),
            replays=sum(r.replays for r in rs),
            captures=sum(r.captures for r in rs),
            cache_hits=sum(r.cache_hits for r in rs),
            cache_misses=sum(r.cache_misses for r in rs),
        )
    return out


@dataclass
class BenchResult:
    config: BenchConfig
    rows: list[TrialRow]  # warm-start rows included (trial 0)
    summary: dict[tuple[str, int, int], LatencySummary]
    traces: dict[tuple[str, int, int], str]

    @property
    def kept_rows(self) -> list[TrialRow]:
        return [r for r in self.rows if not r.warm]

    def pooled_token_latencies(self, mode: RunMode | str, prompt_len: int, gen_len: int) -> list[float]:
        """Every per-token sample of a cell's kept trials (needs ``keep_token_samples``)."""
        key = (RunMode(mode).value, prompt_len, gen_len)
        return [x for r in self.kept_rows if r.cell == key for x in r.token_latencies]


def cell_prompt(base_seed: int, prompt_len: int, vocab: int) -> list[int]:
    """The fixed prompt shared by every mode and trial of a prompt length."""
    rng = np.random.default_rng([base_seed, prompt_len])
    return [int(t) for t in rng.integers(0, vocab, size=prompt_len)]


def _run_cell(config: BenchConfig, cell: tuple[RunMode, int, int]) -> tuple[list[TrialRow], str]:
    mode, prompt_len, gen_len = cell
    try:
        weights = init_model(config.model)
        runtime = HybridRuntime(weights, mode, config.cache)
        prompt = cell_prompt(config.base_seed, prompt_len, config.model.vocab)
        rows, trace = [], ""
        for trial in range(config.trials + 1):
            device = VirtualDevice(config.cost.with_seed(config.base_seed ^ trial))
            result = runtime.generate(prompt, gen_len, device)
            rows.append(TrialRow.from_result(mode, gen_len, trial, result, config.keep_token_samples))
            if trial == 1 and config.trace:
                trace = "".join(
                    f"{r.ts_us:.6f},{r.stream},{r.kind},{r.id},{r.duration_us:.6f}\n" for r in result.trace
                )
        return rows, trace
    except Exception as exc:
        raise BenchCellError((mode.value, prompt_len, gen_len), exc) from exc


def run_bench(config: BenchConfig) -> BenchResult:
    """Run every cell; trial 0 of each cell is a discarded warm-start run."""
    cells = config.cells()
    if config.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outputs = list(pool.map(_run_cell, [config] * len(cells), cells))
    else:
        outputs = [_run_cell(config, c) for c in cells]
    rows: list[TrialRow] = []
    traces = {}
    for (mode, p, g), (cell_rows, trace) in zip(cells, outputs):
        rows.extend(cell_rows)
        if trace:
            traces[(mode.value, p, g)] = trace
    result = BenchResult(config, rows, summarize(rows), traces)
    if config.out:
        emit_csv(result.rows if config.keep_warm else result.kept_rows, config.out)
    if config.trace:
        write_traces(traces, config.trace)
    return result


def emit_csv(rows: Iterable[TrialRow], path: str | Path | io.TextIOBase) -> None:
    def write(fh):
        fh.write(CSV_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for r in rows:
            writer.writerow(r.csv_values())

    if isinstance(path, (str, Path)):
        with open(path, "w", newline="") as fh:
            write(fh)
    else:
        write(path)


def read_csv(path: str | Path) -> list[TrialRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(TrialRow(
                mode=rec["mode"],
                **{k: int(rec[k]) for k in ("prompt_len", "gen_len", "trial", "dispatches", "replays",
                                            "captures", "cache_hits", "cache_misses")},
                **{k: float(rec[k]) for k in ("ttft_us", "total_us", "mean_tok_us", "p99_tok_us")},
            ))
        return rows


def write_traces(traces: dict[tuple[str, int, int], str], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# ts_us,stream,kind,id,duration_us\n")
        for (mode, p, g), text in traces.items():
            fh.write(f"# mode={mode} prompt_len={p} gen_len={g} trial=1\n")
            fh.write(text)


def emit_summary(summary: dict[tuple[str, int, int], LatencySummary]) -> str:
    """Two tables (mean TTFT, P99 per-token), rows = lengths, columns = modes, in ms."""
    modes = list(dict.fromkeys(k[0] for k in summary))
    lengths = sorted({(k[1], k[2]) for k in summary})
    out = []
    for title, attr in (("Mean TTFT (ms, virtual)", "ttft_mean"),
                        ("P99 per-token latency (ms, virtual)", "tok_p99")):
        out.append(title)
        out.append(f"{'prompt':>7} {'gen':>5} " + " ".join(f"{m:>13}" for m in modes))
        for p, g in lengths:
            cells = []
            for m in modes:
                s = summary.get((m, p, g))
                cells.append(f"{getattr(s, attr) / 1000:13.3f}" if s else f"{'-':>13}")
            out.append(f"{p:>7} {g:>5} " + " ".join(cells))
        out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# config file: flat ``section.key = value`` lines


def load_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key.strip():
            raise InvalidConfig(f"{path}:{lineno}: expected 'section.key = value'")
        values[key.strip()] = value.strip()
    return values


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


_COST_KEYS = {
    "launch_us": "launch_overhead_us",
    "host_us": "host_dispatch_us",
    "alpha": "alpha_us_per_mflop",
    "capture_us": "capture_cost_us_per_kernel",
    "jitter_sigma": "jitter_sigma",
    "jitter": "jitter",
}


def config_from_values(values: dict[str, str]) -> BenchConfig:
    """Build a :class:`BenchConfig` from flat ``section.key`` settings."""
    sections: dict[str, dict[str, str]] = {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        sections.setdefault(section, {})[name.replace("-", "_")] = value
    unknown = set(sections) - {"model", "bench", "cost", "cache"}
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")

    model = ModelConfig.from_mapping(sections.get("model", {}))

    cost_kwargs = {}
    for name, value in sections.get("cost", {}).items():
        if name not in _COST_KEYS:
            raise InvalidConfig(f"unknown cost key {name!r}")
        target = _COST_KEYS[name]
        cost_kwargs[target] = value if target == "jitter" else float(value)
    if cost_kwargs.get("jitter_sigma") == 0.0 and "jitter" not in cost_kwargs:
        cost_kwargs["jitter"] = "none"
    cost = CostModel(**cost_kwargs)

    cache_sec = sections.get("cache", {})
    cache = CacheConfig()
    if "capacity" in cache_sec:
        cache = replace(cache, capacity=int(cache_sec["capacity"]))
    if "warmup" in cache_sec:
        w = cache_sec["warmup"].strip().lower()
        cache = replace(cache, warmup=None if w in ("none", "off", "") else tuple(_ints(w)))
    if "policy" in cache_sec:
        cache = replace(cache, policy=EvictionPolicy(cache_sec["policy"].strip().lower()))
    if "prefill_graphs" in cache_sec:
        cache = replace(cache, prefill_graphs=cache_sec["prefill_graphs"].lower() in ("1", "true", "yes", "on"))

    bench = sections.get("bench", {})
    kwargs: dict = {"model": model, "cost": cost, "cache": cache}
    if "modes" in bench or "mode" in bench:
        kwargs["modes"] = tuple(m.strip().upper() for m in (bench.get("modes") or bench["mode"]).split(","))
    for key in ("prompt_lens", "gen_lens"):
        if key in bench:
            kwargs[key] = _ints(bench[key])
    for src, dst in (("trials", "trials"), ("seed", "base_seed"), ("workers", "workers")):
        if src in bench:
            kwargs[dst] = int(bench[src])
    for key in ("out", "trace"):
        if key in bench:
            kwargs[key] = bench[key]
    if "keep_warm" in bench:
        kwargs["keep_warm"] = bench["keep_warm"].lower() in ("1", "true", "yes", "on")
    return BenchConfig(**kwargs)
