"""Report emission: summary JSON, CSV ledgers, and JSON-lines traces.

Every writer is deterministic: keys are sorted, rows follow simulation
order, and nothing date- or host-dependent is embedded, so identical
scenarios produce byte-identical files.
"""

import csv
import json
import os
from typing import IO, Dict, List, Optional

from .baselines import CHUNK
from .engine import IterationReport
from .scenario import ChunkRunResult, ScenarioResult, SweepResult

SCHEMA_VERSION = 1

SUMMARY_JSON = "summary.json"
LAYOUT_CSV = "layout.csv"
SWEEP_CSV = "sweep.csv"


def moments_csv_name(strategy: str) -> str:
    return f"moments_{strategy}.csv"


def transfers_csv_name(strategy: str) -> str:
    return f"transfers_{strategy}.csv"


def collectives_csv_name(strategy: str) -> str:
    return f"collectives_{strategy}.csv"


def trace_name(strategy: str) -> str:
    return f"trace_{strategy}.jsonl"


def _model_block(result: ScenarioResult) -> Dict:
    m = result.config.model
    return {
        "layers": m.layers,
        "hidden_dim": m.hidden_dim,
        "heads": m.heads,
        "seq_len": m.seq_len,
        "vocab": m.vocab,
        "batch": m.batch,
        "context_bytes": m.context_bytes,
        "fragmentation": m.fragmentation,
        "param_count": m.param_count,
    }


def _config_block(result: ScenarioResult) -> Dict:
    hw = result.config.hardware
    pol = result.config.policy
    return {
        "model": _model_block(result),
        "hardware": {
            "gpu_count": hw.gpu_count,
            "gpu_bytes": hw.gpu_bytes,
            "cpu_bytes": hw.cpu_bytes,
            "pcie_gbps": hw.pcie_gbps,
            "intra_gpu_gbps": hw.intra_gpu_gbps,
        },
        "policy": {
            "capacity_elems": pol.capacity_elems,
            "eviction": pol.eviction.value,
            "limit_fraction": pol.limit_fraction,
            "checkpointing": pol.checkpointing,
            "strategies": list(pol.strategies),
            "os_placement": pol.os_placement,
        },
        "seed": result.config.seed,
        "iterations": result.config.iterations,
    }


def _plan_block(run: ChunkRunResult) -> Optional[Dict]:
    if run.plan is None:
        return None
    return {
        "gpu_margin_bytes": run.plan.gpu_margin_bytes,
        "peak_non_model_bytes": run.plan.peak_non_model_bytes,
        "working_set_bytes": run.plan.working_set_bytes,
        "os_positions_on_gpu": list(run.plan.os_positions_on_gpu),
        "os_chunks_on_gpu": run.plan.os_chunks_on_gpu,
        "embedding_device": run.plan.embedding_device,
    }


def _iteration_block(report: IterationReport) -> Dict:
    return {
        "iteration": report.iteration,
        "warmup": report.warmup,
        "feasible": report.feasible,
        "failure_reason": report.failure_reason,
        "failure_moment": report.failure_moment,
        "cpu_to_gpu_bytes": report.cpu_to_gpu_bytes,
        "gpu_to_cpu_bytes": report.gpu_to_cpu_bytes,
        "collective_bytes": report.intra_gpu_collective_bytes,
        "peak_gpu_bytes": report.peak_gpu_bytes,
        "peak_cpu_bytes": report.peak_cpu_bytes,
    }


def summary_dict(result: ScenarioResult) -> Dict:
    outcomes = {}
    for o in result.outcomes:
        block = {
            "feasible": o.feasible,
            "failure_reason": o.failure_reason,
            "failure_moment": o.failure_moment,
            "per_iteration_cpu_gpu_bytes": o.per_iteration_cpu_gpu_bytes,
            "collective_bytes": o.collective_bytes,
            "peak_gpu_bytes": o.peak_gpu_bytes,
            "peak_cpu_bytes": o.peak_cpu_bytes,
            "transfer_seconds": o.time.transfer_seconds,
            "collective_seconds": o.time.collective_seconds,
        }
        if o.chunk is not None:
            block["plan"] = _plan_block(o.chunk)
            block["iterations"] = [_iteration_block(r) for r in o.chunk.reports]
        outcomes[o.strategy] = block
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "run",
        "config": _config_block(result),
        "nproc": result.nproc,
        "outcomes": outcomes,
    }


def sweep_summary_dict(sweep: SweepResult) -> Dict:
    rows = [{
        "strategy": r.strategy,
        "gpu_count": r.gpu_count,
        "max_rung": r.max_rung,
        "max_batch": r.max_batch,
        "feasible": r.feasible,
    } for r in sweep.rows]
    cfg = sweep.config
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "sweep",
        "hardware": {
            "gpu_bytes": cfg.hardware.gpu_bytes,
            "cpu_bytes": cfg.hardware.cpu_bytes,
        },
        "gpu_counts": list(cfg.sweep.gpu_counts),
        "batches": list(cfg.sweep.batches),
        "rungs": [r.label for r in cfg.sweep.ladder()],
        "seed": cfg.seed,
        "rows": rows,
    }


def render_json(payload: Dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def write_summary(payload: Dict, out_dir: str) -> str:
    path = os.path.join(out_dir, SUMMARY_JSON)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_json(payload))
    return path


def write_moments_csv(run: ChunkRunResult, out_dir: str,
                      strategy: str = CHUNK) -> str:
    path = os.path.join(out_dir, moments_csv_name(strategy))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "moment", "device", "used_bytes",
                         "chunk_bytes", "non_model_bytes"])
        for report in run.reports:
            for s in report.samples:
                writer.writerow([report.iteration, s.moment, s.device,
                                 s.used_bytes, s.chunk_bytes, s.non_model_bytes])
    return path


def write_transfers_csv(run: ChunkRunResult, out_dir: str,
                        strategy: str = CHUNK) -> str:
    path = os.path.join(out_dir, transfers_csv_name(strategy))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "moment", "chunk_id", "src", "dst",
                         "bytes", "reason"])
        for report in run.reports:
            for t in report.transfers:
                writer.writerow([report.iteration, t.moment, t.chunk_id,
                                 t.src, t.dst, t.bytes, t.reason])
    return path


def write_collectives_csv(run: ChunkRunResult, out_dir: str,
                          strategy: str = CHUNK) -> str:
    path = os.path.join(out_dir, collectives_csv_name(strategy))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "group_id", "kind", "bytes",
                         "includes_padding"])
        for report in run.reports:
            for ev in report.collectives:
                writer.writerow([ev.iteration, ev.group_id, ev.kind,
                                 ev.bytes, int(ev.includes_padding)])
    return path


def write_layout_csv(run: ChunkRunResult, out_dir: str) -> str:
    path = os.path.join(out_dir, LAYOUT_CSV)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tensor_id", "kind", "chunk_id", "offset_elems",
                         "numel"])
        for row in run.layout_rows:
            writer.writerow(list(row))
    return path


def write_sweep_csv(sweep: SweepResult, out_dir: str) -> str:
    path = os.path.join(out_dir, SWEEP_CSV)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "gpu_count", "max_rung", "max_batch",
                         "feasible"])
        for r in sweep.rows:
            writer.writerow([r.strategy, r.gpu_count, r.max_rung or "",
                             r.max_batch, int(r.feasible)])
    return path


class TraceWriter:
    """JSON-lines moment trace; plug .emit into Engine's trace_fn."""

    def __init__(self, handle: IO[str]):
        self._handle = handle

    def emit(self, record: Dict) -> None:
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")


def write_run_reports(result: ScenarioResult, out_dir: str) -> List[str]:
    """Emit summary.json plus the chunk run's CSV ledgers; return paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [write_summary(summary_dict(result), out_dir)]
    for o in result.outcomes:
        if o.chunk is not None:
            paths.append(write_moments_csv(o.chunk, out_dir, o.strategy))
            paths.append(write_transfers_csv(o.chunk, out_dir, o.strategy))
            paths.append(write_collectives_csv(o.chunk, out_dir, o.strategy))
            paths.append(write_layout_csv(o.chunk, out_dir))
    return paths


def write_sweep_reports(sweep: SweepResult, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    return [write_summary(sweep_summary_dict(sweep), out_dir),
            write_sweep_csv(sweep, out_dir)]
