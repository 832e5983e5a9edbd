"""Command-line interface.

Verbs::

    chunkstar run          simulate one scenario, write reports + figures
    chunkstar sweep        max-feasible-scale table across the model ladder
    chunkstar explain-plan print chunk layout and placement plan (no simulation)
    chunkstar oracle       check greedy eviction against the exhaustive oracle

Exit codes: 0 for completed runs (including infeasible verdicts), 2 for
configuration problems, 1 for internal errors or a failed oracle check.
The ``CHUNKSTAR_OUT`` environment variable overrides ``--out``.
"""

import argparse
import os
import random
import sys
from contextlib import ExitStack
from dataclasses import replace
from typing import List, Optional, Sequence

from .baselines import CHUNK
from .chunks import PackingError
from .config import ConfigError, ScenarioConfig, load_config
from .memory import EvictionStrategy, oracle_min_transfers, simulate_cache_fetches
from .model import GPU
from .profiler import analytic_placement_plan
from .reports import (
    TraceWriter,
    trace_name,
    write_run_reports,
    write_sweep_reports,
)
from .scenario import Simulator, run_scenario, sweep_max_scale

DEFAULT_OUT = "chunkstar-out"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkstar",
        description="chunk-based heterogeneous-memory training simulator")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser, with_out: bool = True) -> None:
        p.add_argument("--config", metavar="PATH",
                       help="INI scenario config (defaults mirror the "
                            "8x32GB GPU / 240GB CPU testbed)")
        if with_out:
            p.add_argument("--out", metavar="DIR", default=DEFAULT_OUT,
                           help="report directory (env CHUNKSTAR_OUT wins)")
        p.add_argument("--strategy", metavar="NAME[,NAME...]",
                       help="override strategies to compare")
        p.add_argument("--seed", type=int, metavar="N",
                       help="override the config seed")

    run_p = sub.add_parser("run", help="simulate one scenario")
    common(run_p)
    run_p.add_argument("--iterations", type=int, metavar="N",
                       help="total iterations incl. warm-up (default 3)")
    run_p.add_argument("--trace", action="store_true",
                       help="also write a JSON-lines moment trace")

    sweep_p = sub.add_parser("sweep", help="max feasible scale per strategy")
    common(sweep_p)

    plan_p = sub.add_parser("explain-plan",
                            help="print layout and placement plan without "
                                 "simulating")
    common(plan_p, with_out=False)

    oracle_p = sub.add_parser("oracle",
                              help="compare greedy eviction to the exhaustive "
                                   "oracle on random small instances")
    oracle_p.add_argument("--seed", type=int, default=0, metavar="N")
    oracle_p.add_argument("--trials", type=int, default=200, metavar="N")
    return parser


def _load(args: argparse.Namespace) -> ScenarioConfig:
    config = load_config(args.config) if args.config else ScenarioConfig()
    if getattr(args, "strategy", None):
        names = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
        config = replace(config, policy=replace(config.policy, strategies=names))
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        config = replace(config, iterations=args.iterations)
    return config


def _out_dir(args: argparse.Namespace) -> str:
    return os.environ.get("CHUNKSTAR_OUT") or args.out


def _print_outcomes(result) -> None:
    for o in result.outcomes:
        verdict = "feasible" if o.feasible else f"INFEASIBLE ({o.failure_reason})"
        print(f"  {o.strategy:15s} {verdict:24s} "
              f"cpu<->gpu {o.per_iteration_cpu_gpu_bytes / 1e9:8.3f} GB/iter  "
              f"collective {o.collective_bytes / 1e9:8.3f} GB/iter  "
              f"movement time {o.time.total_seconds:7.3f} s")


def _cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = _out_dir(args)
    os.makedirs(out_dir, exist_ok=True)
    with ExitStack() as stack:
        trace_fn = None
        if args.trace:
            handle = stack.enter_context(
                open(os.path.join(out_dir, trace_name(CHUNK)), "w",
                     encoding="utf-8", newline="\n"))
            trace_fn = TraceWriter(handle).emit
        result = run_scenario(config, trace_fn=trace_fn)
    paths = write_run_reports(result, out_dir)
    from .figures import render_run_figures  # deferred: pulls in matplotlib
    paths += render_run_figures(result, out_dir)
    m = config.model
    print(f"model: {m.layers} layers x {m.hidden_dim} hidden "
          f"({m.param_count / 1e9:.2f}B params), batch {m.batch}, "
          f"{result.nproc} GPU(s)")
    _print_outcomes(result)
    print("reports: " + ", ".join(sorted(os.path.basename(p) for p in paths)))
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = _out_dir(args)
    sweep = sweep_max_scale(config)
    paths = write_sweep_reports(sweep, out_dir)
    from .figures import render_sweep_figures
    paths += render_sweep_figures(sweep, out_dir)
    print(f"{'strategy':15s} " +
          " ".join(f"{g:>10d}" for g in config.sweep.gpu_counts))
    for strategy in config.policy.strategies:
        cells = []
        for g in config.sweep.gpu_counts:
            row = sweep.row(strategy, g)
            cells.append(f"{row.max_rung}@{row.max_batch}" if row.feasible
                         else "none")
        print(f"{strategy:15s} " + " ".join(f"{c:>10s}" for c in cells))
    print("reports: " + ", ".join(sorted(os.path.basename(p) for p in paths)))
    return 0


def _cmd_explain_plan(args: argparse.Namespace) -> int:
    config = _load(args)
    sim = Simulator(config.model, config.hardware, config.policy,
                    nproc=config.hardware.gpu_count)
    plan = analytic_placement_plan(
        config.model, sim.timeline, sim.chunk_set,
        config.hardware.gpu_bytes, sim.partition,
        os_placement=config.policy.os_placement)
    cs = sim.chunk_set
    local = sim.partition.local_positions(0)
    print(f"chunk capacity: {cs.capacity_elems} elements "
          f"({cs.param_chunk_bytes / 1e6:.1f} MB fp16 chunk, "
          f"{cs.os_triplet_bytes / 1e6:.1f} MB optimizer triplet)")
    print(f"positions: {cs.positions} per list "
          f"({len(local)} local to rank 0 of {sim.nproc}), "
          f"padding waste {cs.waste_elems} elements")
    print(f"peak non-model: {plan.peak_non_model_bytes / 1e9:.3f} GB; "
          f"working set: {plan.working_set_bytes / 1e9:.3f} GB; "
          f"GPU margin: {plan.gpu_margin_bytes / 1e9:.3f} GB")
    print(f"optimizer triplets on GPU: {len(plan.os_positions_on_gpu)} of "
          f"{len(local)} local positions "
          f"{list(plan.os_positions_on_gpu)}")
    print(f"embedding compute device: {plan.embedding_device}")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    rng = random.Random(args.seed)
    mismatches = 0
    for trial in range(args.trials):
        chunks = rng.randint(1, 5)
        length = rng.randint(1, 10)
        capacity = rng.randint(1, 3)
        seq = [rng.randrange(chunks) for _ in range(length)]
        greedy = simulate_cache_fetches(seq, capacity,
                                        EvictionStrategy.LATEST_NEXT_USE)
        best = oracle_min_transfers(seq, capacity)
        if greedy != best:
            mismatches += 1
            print(f"MISMATCH seq={seq} capacity={capacity} "
                  f"greedy={greedy} oracle={best}")
    print(f"{args.trials} trials, seed {args.seed}: "
          + ("all greedy fetch counts optimal" if mismatches == 0
             else f"{mismatches} mismatches"))
    return 0 if mismatches == 0 else 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "explain-plan": _cmd_explain_plan,
        "oracle": _cmd_oracle,
    }
    try:
        return handlers[args.verb](args)
    except (ConfigError, PackingError) as exc:
        # a tensor that cannot fit any chunk is a configuration problem too
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
