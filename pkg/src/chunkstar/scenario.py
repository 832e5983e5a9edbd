"""Scenario orchestration: wire a config into simulations and verdicts.

One :class:`Simulator` instance owns the rank-0 view of a chunk-strategy
run: timeline, chunk layout, device pools (GPU capacity as configured,
CPU capacity divided by process count), eviction manager, collective
runtime, and the event engine.  ``run_scenario`` executes every
configured strategy on one model; ``sweep_max_scale`` walks the model
ladder per GPU count and reports each strategy's largest feasible
(scale, batch) pair, probing the chunk strategy with a real warm-up +
one measured iteration since its feasibility depends on dynamic
eviction.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .baselines import (
    CHUNK,
    DDP,
    L2L,
    STATIC_OFFLOAD,
    BaselineVerdict,
    FailureReason,
    baseline_verdict_fn,
    max_feasible_scale,
    simulate_ddp,
    simulate_l2l,
    simulate_static_offload,
)
from .chunks import ChunkKind, ChunkSet, build_model_chunk_lists
from .config import HardwareSpec, PolicySpec, ScenarioConfig
from .engine import Engine, IterationReport
from .memory import DevicePool, EvictionStrategy, MemoryManager
from .model import (
    CPU,
    GPU,
    LadderRung,
    ModelSchema,
    Timeline,
    build_event_timeline,
)
from .parallel import DpPartition, DpRuntime, partition_chunks
from .profiler import (
    PlacementPlan,
    WarmupStats,
    compute_placement_plan,
    embedding_compute_device,
)

GIGA = 10**9


@dataclass(frozen=True)
class TimeEstimate:
    """Model-relative lower bound on data-movement time (compute excluded)."""

    transfer_seconds: float
    collective_seconds: float

    def __post_init__(self) -> None:
        if self.transfer_seconds < 0 or self.collective_seconds < 0:
            raise ValueError("time estimates must be non-negative")

    @property
    def total_seconds(self) -> float:
        return self.transfer_seconds + self.collective_seconds


def estimate_time(pcie_bytes: int, collective_bytes: int,
                  hardware: HardwareSpec) -> TimeEstimate:
    return TimeEstimate(
        transfer_seconds=pcie_bytes / (hardware.pcie_gbps * GIGA),
        collective_seconds=collective_bytes / (hardware.intra_gpu_gbps * GIGA),
    )


@dataclass
class ChunkRunResult:
    """Everything one chunk-strategy simulation produced."""

    schema: ModelSchema
    nproc: int
    reports: List[IterationReport] = field(default_factory=list)
    plan: Optional[PlacementPlan] = None
    warmup_stats: Optional[WarmupStats] = None
    layout_rows: List[Tuple[int, str, int, int, int]] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return bool(self.reports) and all(r.feasible for r in self.reports)

    @property
    def failure(self) -> Tuple[Optional[str], Optional[int]]:
        for r in self.reports:
            if not r.feasible:
                return r.failure_reason, r.failure_moment
        return None, None

    @property
    def steady_report(self) -> Optional[IterationReport]:
        measured = [r for r in self.reports if not r.warmup and r.feasible]
        return measured[-1] if measured else None


class Simulator:
    """Rank-0 chunk-strategy simulation for one (schema, hardware) point."""

    def __init__(self, schema: ModelSchema, hardware: HardwareSpec,
                 policy: PolicySpec, nproc: int = 1,
                 trace_fn: Optional[Callable] = None):
        if nproc < 1:
            raise ValueError("nproc must be >= 1")
        self.schema = schema
        self.hardware = hardware
        self.policy = policy
        self.nproc = nproc
        self.timeline: Timeline = build_event_timeline(
            schema, checkpointing=policy.checkpointing)
        self.chunk_set: ChunkSet = build_model_chunk_lists(
            schema, capacity_elems=policy.capacity_elems)
        self.partition: DpPartition = partition_chunks(self.chunk_set, nproc)
        local = self.partition.local_positions(0)
        # Parameters must exist up front; optimizer state is created lazily
        # at the first optimizer step, directly on its planned device, so
        # the host only ever stages what the placement leaves to it.
        self.chunk_set.init_on_cpu(local, kinds=(ChunkKind.PARAM_FP16,))
        self.pools: Dict[str, DevicePool] = {
            GPU: DevicePool(GPU, hardware.gpu_bytes),
            CPU: DevicePool(CPU, hardware.cpu_bytes // nproc),
        }
        self.manager = MemoryManager(self.pools, policy.eviction)
        self.manager.register_chunks(self.chunk_set.chunks.values())
        self.manager.add_extra_model_bytes(CPU, self.chunk_set.embedding.fp16_bytes)
        self.dp = DpRuntime(self.chunk_set, self.partition, self.manager)
        self.engine = Engine(self.chunk_set, self.timeline, self.manager,
                             schema=schema, dp=self.dp,
                             limit_fraction=policy.limit_fraction,
                             trace_fn=trace_fn)
        self.engine.embedding_device = embedding_compute_device(schema)

    def _initial_cpu_overflow(self) -> bool:
        # register_chunks charges the initial resident set without a
        # capacity check; a host too small to even hold its shard of the
        # parameter layout is an infeasible scenario, not a programming
        # error.  (Optimizer state is not staged here: it materializes on
        # its planned device at the first optimizer step.)
        pool = self.pools[CPU]
        return pool.used_bytes > pool.capacity_bytes

    def _plan_builder(self):
        local = self.partition.local_positions(0)
        gpu_cap = self.pools[GPU].capacity_bytes

        def build(stats: WarmupStats) -> PlacementPlan:
            return compute_placement_plan(
                stats, self.chunk_set, gpu_cap, self.schema,
                local_positions=local, os_placement=self.policy.os_placement)

        return build

    def run(self, iterations: int = 3) -> ChunkRunResult:
        """One warm-up plus ``iterations - 1`` measured iterations."""
        result = ChunkRunResult(schema=self.schema, nproc=self.nproc,
                                layout_rows=self.chunk_set.layout_rows())
        if self._initial_cpu_overflow():
            result.reports.append(IterationReport(
                iteration=0, warmup=True, feasible=False,
                failure_reason="CPU_OOM", failure_moment=0))
            return result
        warm = self.engine.run_iteration(0, warmup=True,
                                         plan_builder=self._plan_builder())
        result.reports.append(warm)
        result.warmup_stats = self.engine.warmup_stats
        result.plan = self.engine.plan
        if not warm.feasible:
            return result
        for i in range(1, max(iterations, 1)):
            report = self.engine.run_iteration(i, warmup=False)
            result.reports.append(report)
            if not report.feasible:
                break
        return result


def simulate_chunk_strategy(schema: ModelSchema, hardware: HardwareSpec,
                            policy: PolicySpec, nproc: int = 1,
                            iterations: int = 3,
                            trace_fn: Optional[Callable] = None) -> ChunkRunResult:
    sim = Simulator(schema, hardware, policy, nproc, trace_fn=trace_fn)
    return sim.run(iterations)


def chunk_verdict_fn(hardware: HardwareSpec, policy: PolicySpec, nproc: int,
                     template: ModelSchema):
    """Feasibility probe for sweeps: warm-up + one measured iteration."""

    def probe(rung: LadderRung, batch: int) -> bool:
        schema = rung.schema(batch=batch, vocab=template.vocab,
                             context_bytes=template.context_bytes,
                             fragmentation=template.fragmentation)
        result = simulate_chunk_strategy(schema, hardware, policy, nproc,
                                         iterations=2)
        return result.feasible

    return probe


@dataclass
class StrategyOutcome:
    """One strategy's verdict on the configured scenario, for reporting."""

    strategy: str
    feasible: bool
    failure_reason: str  # FailureReason values
    failure_moment: Optional[int]
    per_iteration_cpu_gpu_bytes: int
    collective_bytes: int
    peak_gpu_bytes: int
    peak_cpu_bytes: int
    time: TimeEstimate
    chunk: Optional[ChunkRunResult] = None


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    nproc: int
    outcomes: List[StrategyOutcome]

    def outcome(self, strategy: str) -> StrategyOutcome:
        for o in self.outcomes:
            if o.strategy == strategy:
                return o
        raise KeyError(strategy)


def _baseline_outcome(verdict: BaselineVerdict,
                      hardware: HardwareSpec) -> StrategyOutcome:
    return StrategyOutcome(
        strategy=verdict.strategy,
        feasible=verdict.feasible,
        failure_reason=verdict.failure_reason.value,
        failure_moment=None,
        per_iteration_cpu_gpu_bytes=verdict.per_iteration_cpu_gpu_bytes,
        collective_bytes=0,
        peak_gpu_bytes=verdict.peak_gpu_bytes,
        peak_cpu_bytes=verdict.peak_cpu_bytes,
        time=estimate_time(verdict.per_iteration_cpu_gpu_bytes, 0, hardware),
    )


def _chunk_outcome(run: ChunkRunResult,
                   hardware: HardwareSpec) -> StrategyOutcome:
    steady = run.steady_report
    reason, moment = run.failure
    pcie = steady.pcie_bytes if steady else 0
    coll = steady.intra_gpu_collective_bytes if steady else 0
    return StrategyOutcome(
        strategy=CHUNK,
        feasible=run.feasible,
        failure_reason=(reason or "none").lower(),
        failure_moment=moment,
        per_iteration_cpu_gpu_bytes=pcie,
        collective_bytes=coll,
        peak_gpu_bytes=max((r.peak_gpu_bytes for r in run.reports), default=0),
        peak_cpu_bytes=max((r.peak_cpu_bytes for r in run.reports), default=0),
        time=estimate_time(pcie, coll, hardware),
        chunk=run,
    )


def run_scenario(config: ScenarioConfig,
                 trace_fn: Optional[Callable] = None) -> ScenarioResult:
    """Execute every configured strategy on the configured model."""
    schema = config.model
    hardware = config.hardware
    nproc = hardware.gpu_count
    pools = {GPU: DevicePool(GPU, hardware.gpu_bytes),
             CPU: DevicePool(CPU, hardware.cpu_bytes)}
    ckpt = config.policy.checkpointing

    outcomes: List[StrategyOutcome] = []
    for strategy in config.policy.strategies:
        if strategy == CHUNK:
            run = simulate_chunk_strategy(schema, hardware, config.policy,
                                          nproc, config.iterations, trace_fn)
            outcomes.append(_chunk_outcome(run, hardware))
        elif strategy == STATIC_OFFLOAD:
            outcomes.append(_baseline_outcome(
                simulate_static_offload(schema, pools, nproc, ckpt), hardware))
        elif strategy == DDP:
            outcomes.append(_baseline_outcome(
                simulate_ddp(schema, pools, ckpt), hardware))
        elif strategy == L2L:
            outcomes.append(_baseline_outcome(
                simulate_l2l(schema, pools, nproc, ckpt), hardware))
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
    return ScenarioResult(config=config, nproc=nproc, outcomes=outcomes)


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    gpu_count: int
    max_rung: str  # "" when nothing feasible
    max_batch: int  # 0 when nothing feasible

    @property
    def feasible(self) -> bool:
        return bool(self.max_rung)


@dataclass
class SweepResult:
    config: ScenarioConfig
    rows: List[SweepRow]

    def row(self, strategy: str, gpu_count: int) -> SweepRow:
        for r in self.rows:
            if r.strategy == strategy and r.gpu_count == gpu_count:
                return r
        raise KeyError((strategy, gpu_count))


def sweep_max_scale(config: ScenarioConfig) -> SweepResult:
    """Largest feasible (scale, batch) per strategy per GPU count."""
    ladder = config.sweep.ladder()
    batches = config.sweep.batches
    template = config.model
    rows: List[SweepRow] = []
    for p in config.sweep.gpu_counts:
        pools = {GPU: DevicePool(GPU, config.hardware.gpu_bytes),
                 CPU: DevicePool(CPU, config.hardware.cpu_bytes)}
        for strategy in config.policy.strategies:
            if strategy == CHUNK:
                fn = chunk_verdict_fn(config.hardware, config.policy, p, template)
            else:
                fn = baseline_verdict_fn(
                    strategy, pools, p, config.policy.checkpointing,
                    vocab=template.vocab,
                    context_bytes=template.context_bytes,
                    fragmentation=template.fragmentation)
            best = max_feasible_scale(fn, ladder, batches)
            if best is None:
                rows.append(SweepRow(strategy, p, "", 0))
            else:
                rung, batch = best
                rows.append(SweepRow(strategy, p, rung.label, batch))
    return SweepResult(config=config, rows=rows)
