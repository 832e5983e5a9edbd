"""Figure rendering for scenario reports (headless matplotlib/Agg).

Each renderer takes the in-memory result object and an output directory,
writes one PNG next to the CSV ledgers, and returns its path.
"""

import os
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .model import CPU, GPU  # noqa: E402
from .scenario import ChunkRunResult, ScenarioResult, SweepResult  # noqa: E402

GB = 1e9

MEMORY_CURVES_PNG = "memory_curves_chunk.png"
VOLUMES_PNG = "volumes.png"
SWEEP_PNG = "sweep_scale.png"


def _curve(report, device: str, field: str) -> List[float]:
    return [getattr(s, field) / GB for s in report.samples if s.device == device]


def render_memory_curves(run: ChunkRunResult, out_dir: str) -> Optional[str]:
    """GPU/CPU usage per moment for the last measured iteration (tidal plot)."""
    report = run.steady_report or (run.reports[-1] if run.reports else None)
    if report is None or not report.samples:
        return None
    moments = sorted({s.moment for s in report.samples})
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(12, 7), sharex=True)
    top.plot(moments, _curve(report, GPU, "used_bytes"), label="GPU used")
    top.plot(moments, _curve(report, GPU, "chunk_bytes"), label="GPU chunks")
    top.plot(moments, _curve(report, GPU, "non_model_bytes"),
             label="GPU non-model", linestyle="--")
    top.set_ylabel("GB")
    top.set_title(f"iteration {report.iteration} memory by moment")
    top.legend(loc="upper left", fontsize=8)
    top.grid(True, alpha=0.3)
    bottom.plot(moments, _curve(report, CPU, "used_bytes"), label="CPU used",
                color="tab:green")
    bottom.set_ylabel("GB")
    bottom.set_xlabel("moment")
    bottom.legend(loc="upper left", fontsize=8)
    bottom.grid(True, alpha=0.3)
    path = os.path.join(out_dir, MEMORY_CURVES_PNG)
    plt.tight_layout()
    plt.savefig(path, dpi=160)
    plt.close(fig)
    return path


def render_volumes(result: ScenarioResult, out_dir: str) -> str:
    """Per-strategy data movement for one iteration, grouped bars."""
    names = [o.strategy for o in result.outcomes]
    pcie = [o.per_iteration_cpu_gpu_bytes / GB for o in result.outcomes]
    coll = [o.collective_bytes / GB for o in result.outcomes]
    xs = range(len(names))
    fig = plt.figure(figsize=(10, 5))
    width = 0.38
    plt.bar([x - width / 2 for x in xs], pcie, width, label="CPU-GPU bytes")
    plt.bar([x + width / 2 for x in xs], coll, width, label="collective bytes")
    plt.xticks(list(xs), names)
    plt.ylabel("GB per iteration")
    plt.title("per-iteration data movement by strategy")
    for x, o in zip(xs, result.outcomes):
        if not o.feasible:
            plt.annotate("infeasible", (x, 0.02), ha="center", fontsize=8,
                         color="tab:red")
    plt.legend()
    plt.grid(True, axis="y", alpha=0.3)
    plt.tight_layout()
    path = os.path.join(out_dir, VOLUMES_PNG)
    plt.savefig(path, dpi=160)
    plt.close(fig)
    return path


def render_sweep(sweep: SweepResult, out_dir: str) -> str:
    """Max feasible ladder rung per strategy per GPU count, grouped bars."""
    rung_labels = [r.label for r in sweep.config.sweep.ladder()]
    rung_index: Dict[str, int] = {lb: i + 1 for i, lb in enumerate(rung_labels)}
    gpu_counts = list(sweep.config.sweep.gpu_counts)
    strategies = list(sweep.config.policy.strategies)
    width = 0.8 / max(len(strategies), 1)
    fig = plt.figure(figsize=(10, 5))
    for si, strategy in enumerate(strategies):
        xs, ys = [], []
        for gi, g in enumerate(gpu_counts):
            row = sweep.row(strategy, g)
            xs.append(gi + si * width)
            ys.append(rung_index.get(row.max_rung, 0))
        bars = plt.bar(xs, ys, width, label=strategy)
        for bar, g in zip(bars, gpu_counts):
            row = sweep.row(strategy, g)
            if row.feasible:
                plt.annotate(f"b{row.max_batch}",
                             (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                             ha="center", va="bottom", fontsize=7)
    centers = [gi + width * (len(strategies) - 1) / 2 for gi in range(len(gpu_counts))]
    plt.xticks(centers, [str(g) for g in gpu_counts])
    plt.yticks(range(len(rung_labels) + 1), [""] + rung_labels)
    plt.xlabel("GPU count")
    plt.ylabel("max feasible scale")
    plt.title("largest feasible model per strategy")
    plt.legend(fontsize=8)
    plt.grid(True, axis="y", alpha=0.3)
    plt.tight_layout()
    path = os.path.join(out_dir, SWEEP_PNG)
    plt.savefig(path, dpi=160)
    plt.close(fig)
    return path


def render_run_figures(result: ScenarioResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = [render_volumes(result, out_dir)]
    for o in result.outcomes:
        if o.chunk is not None:
            curve = render_memory_curves(o.chunk, out_dir)
            if curve:
                paths.append(curve)
    return paths


def render_sweep_figures(sweep: SweepResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    return [render_sweep(sweep, out_dir)]
