"""Analytic feasibility and transfer-volume models for comparison systems.

Three static strategies are modeled in closed form:

* ``static_offload`` -- fp16 parameters resident on GPU (sharded across
  processes), gradients and optimizer states on CPU, 4M bytes moved per
  iteration per process.
* ``ddp`` -- everything on every GPU, zero CPU<->GPU traffic.
* ``l2l`` -- one layer's model data resident at a time, everything else
  streamed from CPU each pass.

The chunk strategy has no closed form here because its feasibility
depends on dynamic eviction; :mod:`chunkstar.scenario` probes it with a
real simulated iteration and plugs the result into
:func:`max_feasible_scale` through the ``verdict_fn`` callback.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, List, Mapping, Optional, Sequence, Tuple

from .memory import DevicePool
from .model import (
    CPU,
    GPU,
    LadderRung,
    ModelSchema,
    build_event_timeline,
    memory_budget_from_param_count,
    peak_activation_bytes,
)

STATIC_OFFLOAD = "static_offload"
DDP = "ddp"
L2L = "l2l"
CHUNK = "chunk"

#: Batch sizes explored by scale sweeps, smallest first.
DEFAULT_BATCH_SWEEP: Tuple[int, ...] = (4, 8, 16, 32, 64)


class FailureReason(str, Enum):
    NONE = "none"
    GPU_OOM = "gpu_oom"
    CPU_OOM = "cpu_oom"


@dataclass(frozen=True)
class BaselineVerdict:
    """Outcome of one analytic strategy check on one configuration."""

    strategy: str
    feasible: bool
    failure_reason: FailureReason
    per_iteration_cpu_gpu_bytes: int
    peak_gpu_bytes: int
    peak_cpu_bytes: int

    def __post_init__(self) -> None:
        if self.feasible != (self.failure_reason is FailureReason.NONE):
            raise ValueError("feasible must mirror failure_reason == NONE")


def _capacity(pools: Mapping[str, DevicePool], device: str) -> int:
    return pools[device].capacity_bytes


def _verdict(strategy: str, reason: FailureReason, volume: int,
             peak_gpu: int, peak_cpu: int) -> BaselineVerdict:
    return BaselineVerdict(
        strategy=strategy,
        feasible=reason is FailureReason.NONE,
        failure_reason=reason,
        per_iteration_cpu_gpu_bytes=volume,
        peak_gpu_bytes=peak_gpu,
        peak_cpu_bytes=peak_cpu,
    )


def peak_non_model_bytes(schema: ModelSchema, checkpointing: bool = False) -> int:
    """Peak activation + framework bytes for one training iteration."""
    timeline = build_event_timeline(schema, checkpointing=checkpointing)
    return peak_activation_bytes(schema, timeline)


def simulate_static_offload(schema: ModelSchema, pools: Mapping[str, DevicePool],
                            p: int = 1, checkpointing: bool = False) -> BaselineVerdict:
    """Static partition: param fp16 on GPU (split p ways), grad + OS on CPU.

    Each process keeps its 2M/p fp16 parameter shard resident and ships
    fp16 gradients down / updated fp16 parameters up every iteration:
    4M/p bytes of PCIe traffic per process.  The CPU side must hold the
    full gradient + optimizer working set within this process's share of
    host memory; that requirement does not shrink with p, which is why
    the strategy's reachable scale degrades on many GPUs.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    budget = memory_budget_from_param_count(schema.param_count)
    peak_nm = peak_non_model_bytes(schema, checkpointing)
    peak_gpu = budget.param_fp16_bytes // p + peak_nm
    peak_cpu = budget.component_total_bytes
    volume = 2 * budget.param_fp16_bytes // p  # grads down + params up

    reason = FailureReason.NONE
    if peak_gpu > _capacity(pools, GPU):
        reason = FailureReason.GPU_OOM
    elif peak_cpu > _capacity(pools, CPU) // p:
        reason = FailureReason.CPU_OOM
    return _verdict(STATIC_OFFLOAD, reason, volume, peak_gpu, peak_cpu)


def simulate_ddp(schema: ModelSchema, pools: Mapping[str, DevicePool],
                 checkpointing: bool = False) -> BaselineVerdict:
    """Plain data parallelism: full 18M model bytes replicated per GPU."""
    budget = memory_budget_from_param_count(schema.param_count)
    peak_nm = peak_non_model_bytes(schema, checkpointing)
    peak_gpu = budget.paper_total_bytes + peak_nm
    reason = (FailureReason.NONE if peak_gpu <= _capacity(pools, GPU)
              else FailureReason.GPU_OOM)
    return _verdict(DDP, reason, 0, peak_gpu, 0)


def simulate_l2l(schema: ModelSchema, pools: Mapping[str, DevicePool],
                 p: int = 1, checkpointing: bool = False) -> BaselineVerdict:
    """Layer streaming: only the executing layer's model data on GPU.

    GPU residency is 18 bytes per parameter of the heaviest layer
    (params, grads, OS, staging), with parameters smeared uniformly
    across layers: a one-layer model degenerates to the ddp check.  The
    whole 16M-byte component set lives on CPU and is streamed down for
    FWD, down again for BWD, and written back once after the update:
    48M bytes per iteration, 12x the static baseline's 4M.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    budget = memory_budget_from_param_count(schema.param_count)
    peak_nm = peak_non_model_bytes(schema, checkpointing)
    layer_params = math.ceil(schema.param_count / max(schema.layers, 1))
    peak_gpu = 18 * layer_params + peak_nm
    peak_cpu = budget.component_total_bytes
    volume = 3 * budget.component_total_bytes  # down, down again, back up

    reason = FailureReason.NONE
    if peak_gpu > _capacity(pools, GPU):
        reason = FailureReason.GPU_OOM
    elif peak_cpu > _capacity(pools, CPU) // p:
        reason = FailureReason.CPU_OOM
    return _verdict(L2L, reason, volume, peak_gpu, peak_cpu)


#: verdict_fn(rung, batch) -> feasible?  Used by max_feasible_scale so the
#: chunk strategy can inject a fully simulated probe where baselines use
#: the closed forms above.
VerdictFn = Callable[[LadderRung, int], bool]


def max_feasible_scale(verdict_fn: VerdictFn,
                       ladder: Sequence[LadderRung],
                       batches: Iterable[int] = DEFAULT_BATCH_SWEEP,
                       ) -> Optional[Tuple[LadderRung, int]]:
    """Largest (rung, batch) pair for which verdict_fn reports feasible.

    Walks the ladder smallest-first and stops at the first rung with no
    feasible batch (scale feasibility is monotone in parameter count for
    every strategy modeled here).  Within a rung, batches are probed
    ascending and the walk stops at the first infeasible one (activation
    pressure is monotone in batch).  Returns None when even the smallest
    rung fails at every batch.
    """
    batch_list = sorted(set(batches))
    if not batch_list:
        raise ValueError("need at least one batch size")
    best: Optional[Tuple[LadderRung, int]] = None
    for rung in ladder:
        best_batch: Optional[int] = None
        for batch in batch_list:
            if verdict_fn(rung, batch):
                best_batch = batch
            else:
                break
        if best_batch is None:
            break
        best = (rung, best_batch)
    return best


def baseline_verdict_fn(strategy: str, pools: Mapping[str, DevicePool],
                        p: int = 1, checkpointing: bool = False,
                        **schema_overrides) -> VerdictFn:
    """Adapt one analytic baseline to the max_feasible_scale probe shape."""

    def probe(rung: LadderRung, batch: int) -> bool:
        schema = rung.schema(batch=batch, **schema_overrides)
        if strategy == STATIC_OFFLOAD:
            return simulate_static_offload(schema, pools, p, checkpointing).feasible
        if strategy == DDP:
            return simulate_ddp(schema, pools, checkpointing).feasible
        if strategy == L2L:
            return simulate_l2l(schema, pools, p, checkpointing).feasible
        raise ValueError(f"unknown analytic strategy: {strategy!r}")

    return probe
