"""``hybrid-bench``: run the latency grid and print the summary tables."""
from __future__ import annotations

import argparse
import logging
import sys

from .bench import config_from_values, emit_summary, load_config_file, run_bench
from .errors import HybridRuntimeError

# CLI flag -> config-file key
_FLAG_KEYS = {
    "mode": "bench.modes",
    "prompt_lens": "bench.prompt_lens",
    "gen_lens": "bench.gen_lens",
    "trials": "bench.trials",
    "seed": "bench.seed",
    "out": "bench.out",
    "trace": "bench.trace",
    "workers": "bench.workers",
    "launch_us": "cost.launch_us",
    "host_us": "cost.host_us",
    "alpha": "cost.alpha",
    "capture_us": "cost.capture_us",
    "jitter_sigma": "cost.jitter_sigma",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybrid-bench",
        description="Simulated TTFT / per-token latency benchmark for eager, graph and hybrid decoding.",
    )
    parser.add_argument("--config", metavar="PATH", help="flat 'section.key = value' settings file")
    parser.add_argument("--mode", metavar="M[,M...]",
                        help="run modes: EAGER, HYBRID, GRAPH_ONLY, ABLATE_ASYNC, ABLATE_FUSED, ABLATE_BOTH")
    parser.add_argument("--prompt-lens", metavar="L[,L...]")
    parser.add_argument("--gen-lens", metavar="L[,L...]")
    parser.add_argument("--trials", type=int, metavar="N")
    parser.add_argument("--seed", type=int, metavar="S", help="base seed; trial t uses S xor t")
    parser.add_argument("--out", metavar="PATH", help="per-trial CSV output")
    parser.add_argument("--trace", metavar="PATH", help="timeline of trial 1 of every cell")
    parser.add_argument("--workers", type=int, metavar="N", help="grid cells run in N processes")
    parser.add_argument("--keep-warm", action="store_true", help="also write the warm-start trial 0 rows")
    cost = parser.add_argument_group("cost model")
    cost.add_argument("--cost.launch-us", dest="launch_us", type=float, metavar="X")
    cost.add_argument("--cost.host-us", dest="host_us", type=float, metavar="X")
    cost.add_argument("--cost.alpha", dest="alpha", type=float, metavar="X")
    cost.add_argument("--cost.capture-us", dest="capture_us", type=float, metavar="X")
    cost.add_argument("--cost.jitter-sigma", dest="jitter_sigma", type=float, metavar="X")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = load_config_file(args.config) if args.config else {}
        for attr, key in _FLAG_KEYS.items():
            value = getattr(args, attr)
            if value is not None:
                values[key] = str(value)
        if args.keep_warm:
            values["bench.keep_warm"] = "true"
        config = config_from_values(values)
        result = run_bench(config)
    except (HybridRuntimeError, OSError, ValueError) as exc:
        print(f"hybrid-bench: error: {exc}", file=sys.stderr)
        return 1
    print(emit_summary(result.summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
