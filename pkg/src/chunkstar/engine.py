"""Iteration executor: drives the event timeline over the chunk lists.

Each operator event runs in three strokes: the moment grid's rising edge
(non-chunk footprint grows, payload chunks are fetched or gathered,
tensors enter COMPUTE, gradient staging is charged), the during-event
sample, and the falling edge (states advance, staging is released,
collectives complete, the footprint shrinks).  The optimizer event
walks parameter positions in list order, updating each position on the
device the placement plan assigned to its optimizer triplet.

All byte accounting is integer; the engine is deterministic and
single-threaded.  Illegal tensor transitions and location-constraint
violations abort the run — they are bug surfaces, not error verdicts.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .chunks import Chunk, ChunkKind, ChunkSet, chunk_movability, Movability
from .fsm import TensorState, TransitionError, Trigger
from .memory import (EvictionStrategy, MemoryManager, OOMError, TransferEvent)
from .model import (CPU, GPU, ModelSchema, OpKind, Phase, Timeline,
                    activation_bytes_at)
from .parallel import CollectiveEvent, DpRuntime
from .profiler import MomentSample, PlacementPlan, WarmupStats

EMBEDDING_LEDGER_ID = "embedding"


class LocationConstraintError(AssertionError):
    """A COMPUTE tensor's chunk was not resident on its compute device."""


@dataclass
class IterationReport:
    iteration: int
    warmup: bool
    feasible: bool = True
    failure_reason: Optional[str] = None  # GPU_OOM | CPU_OOM
    failure_moment: Optional[int] = None
    samples: List[MomentSample] = field(default_factory=list)
    transfers: List[TransferEvent] = field(default_factory=list)
    collectives: List[CollectiveEvent] = field(default_factory=list)
    cpu_to_gpu_bytes: int = 0
    gpu_to_cpu_bytes: int = 0
    intra_gpu_collective_bytes: int = 0
    peak_gpu_bytes: int = 0
    peak_cpu_bytes: int = 0

    @property
    def pcie_bytes(self) -> int:
        return self.cpu_to_gpu_bytes + self.gpu_to_cpu_bytes

    def validate_conservation(self) -> None:
        moved = sum(t.bytes for t in self.transfers)
        if self.pcie_bytes != moved:
            raise AssertionError("transfer ledger does not balance: %d != %d"
                                 % (self.pcie_bytes, moved))


class Engine:
    """Runs iterations of one timeline against one chunk layout."""

    def __init__(self, chunk_set: ChunkSet, timeline: Timeline,
                 manager: MemoryManager, schema: Optional[ModelSchema] = None,
                 dp: Optional[DpRuntime] = None,
                 limit_fraction: float = 0.8,
                 non_model_fn: Optional[Callable[[int], int]] = None,
                 trace_fn: Optional[Callable[[dict], None]] = None):
        self.chunk_set = chunk_set
        self.timeline = timeline
        self.manager = manager
        self.schema = schema
        self.dp = dp
        self.limit_fraction = limit_fraction
        self.trace_fn = trace_fn
        if non_model_fn is not None:
            self.non_model_fn = non_model_fn
        elif schema is not None:
            self.non_model_fn = lambda m: activation_bytes_at(
                schema, timeline, m, timeline.checkpointed)
        else:
            self.non_model_fn = lambda m: 0
        self.embedding_device = CPU
        self.measured_strategy = manager.strategy
        self.warmup_stats: Optional[WarmupStats] = None
        self.plan: Optional[PlacementPlan] = None
        self._check_single_gradient_write()

    def _check_single_gradient_write(self) -> None:
        """Gradients overwrite parameter payloads in place, so a tensor may
        appear in exactly one backward event — a later read would see
        gradient bytes where parameters are expected."""
        seen: Dict[int, int] = {}
        for ev in self.timeline.events:
            if ev.phase is Phase.BWD:
                for tid in ev.tensor_refs:
                    if tid in seen:
                        raise ValueError(
                            "tensor %d written by backward events %d and %d"
                            % (tid, seen[tid], ev.index))
                    seen[tid] = ev.index

    # -- helpers -------------------------------------------------------------

    def _param_tensors(self, ev) -> List:
        return [self.chunk_set.tensor(ChunkKind.PARAM_FP16, tid)
                for tid in ev.tensor_refs]

    def _assert_location(self, chunks: Sequence[Chunk], device: str,
                         moment: int) -> None:
        for chunk in chunks:
            if any(t.state is TensorState.COMPUTE for t in chunk.tensors):
                if not chunk.is_resident_on(device):
                    raise LocationConstraintError(
                        "chunk %d computes at moment %d but is not on %s"
                        % (chunk.chunk_id, moment, device))

    def validate_locations(self, moment: int) -> None:
        """Global location sweep: every PINNED chunk sits on a device."""
        for chunk in self.chunk_set.chunks.values():
            if chunk_movability(chunk) is Movability.PINNED and not chunk.copies:
                raise LocationConstraintError(
                    "chunk %d has COMPUTE tensors but no residence at moment %d"
                    % (chunk.chunk_id, moment))

    def _sample(self, moment: int, report: IterationReport,
                stats: Optional[WarmupStats], event_name: str) -> None:
        for pool in self.manager.pools.values():
            chunk_bytes = pool.chunk_bytes + pool.extra_model_bytes
            used = pool.used_bytes
            report.samples.append(MomentSample(
                moment=moment, device=pool.device, used_bytes=used,
                chunk_bytes=chunk_bytes, non_model_bytes=used - chunk_bytes))
        if stats is not None:
            stats.samples.extend(report.samples[-len(self.manager.pools):])
        self.validate_locations(moment)
        if self.trace_fn is not None:
            self.trace_fn({
                "moment": moment,
                "event": event_name,
                "device_usage": {p.device: p.used_bytes
                                 for p in self.manager.pools.values()},
                "transfers": len(self.manager.transfers),
            })

    def _set_non_model(self, moment: int) -> None:
        self.manager.set_non_model(GPU, self.non_model_fn(moment), moment)

    def _soft_limit(self, moment: int, warmup: bool) -> None:
        if warmup:
            cap = self.manager.pools[GPU].capacity_bytes
            self.manager.enforce_soft_limit(GPU, int(self.limit_fraction * cap),
                                            moment)

    def _measure_working_set(self, stats: Optional[WarmupStats]) -> None:
        if stats is not None:
            pinned = self.manager.pinned_bytes(GPU)
            if pinned > stats.working_set_bytes:
                stats.working_set_bytes = pinned

    # -- event bodies ---------------------------------------------------------

    def _compute_event(self, ev, moment: int, iteration: int,
                       stats: Optional[WarmupStats]) -> None:
        tensors = self._param_tensors(ev)
        chunks = self.chunk_set.param_chunks_for_tensors(ev.tensor_refs)
        if self.dp is not None:
            self.dp.on_param_access(ev.phase, chunks, moment, iteration)
        for chunk in chunks:
            self.manager.pin(chunk, GPU)
            self.manager.fetch_chunk(chunk, GPU, moment)
            self.manager.record_access(chunk, GPU, moment)
        for t in tensors:
            t.fire(Trigger.ACCESS_FOR_COMPUTE)
        self._assert_location(chunks, GPU, moment)
        if ev.phase is Phase.BWD and ev.param_bytes:
            self.manager.charge_temp(GPU, ev.param_bytes, moment)
        self._measure_working_set(stats)

    def _finish_compute_event(self, ev, moment: int, iteration: int) -> None:
        tensors = self._param_tensors(ev)
        chunks = self.chunk_set.param_chunks_for_tensors(ev.tensor_refs)
        if ev.phase is Phase.BWD:
            for t in tensors:
                t.fire(Trigger.FINISH_BWD_GRAD_OVERWRITE)
            for chunk in chunks:
                self.manager.note_write(chunk, GPU)
            if ev.param_bytes:
                self.manager.release_temp(GPU, ev.param_bytes)
        else:
            for t in tensors:
                t.fire(Trigger.FINISH_FWD)
        for chunk in chunks:
            self.manager.unpin(chunk)
        if self.dp is not None:
            if ev.phase is Phase.FWD:
                self.dp.after_fwd_event(chunks, moment)
            elif ev.phase is Phase.BWD:
                self.dp.after_bwd_event(chunks, moment, iteration)

    def _embedding_event(self, ev, moment: int) -> None:
        emb = self.chunk_set.embedding
        if emb is None:
            return
        if self.embedding_device == CPU:
            # Weights stay put; one activation block crosses per pass.
            act = (ev.activation_delta_bytes if ev.phase is Phase.FWD
                   else -ev.activation_delta_bytes)
            src, dst = (CPU, GPU) if ev.phase is Phase.FWD else (GPU, CPU)
            self.manager.record_extra_transfer(moment, EMBEDDING_LEDGER_ID,
                                               src, dst, act)
        else:
            # Compute on GPU: weights down at FWD, weight gradients up at BWD.
            self.manager.charge_temp(GPU, emb.fp16_bytes, moment)
            src, dst = (CPU, GPU) if ev.phase is Phase.FWD else (GPU, CPU)
            self.manager.record_extra_transfer(moment, EMBEDDING_LEDGER_ID,
                                               src, dst, emb.fp16_bytes)

    def _finish_embedding_event(self, ev) -> None:
        emb = self.chunk_set.embedding
        if emb is not None and self.embedding_device == GPU:
            self.manager.release_temp(GPU, emb.fp16_bytes)

    def _adam_event(self, moment: int, plan: PlacementPlan,
                    local_positions: Sequence[int]) -> None:
        staging = ChunkKind.PARAM_FP32.elem_bytes * self.chunk_set.capacity_elems
        for pos in local_positions:
            device = plan.device_of_position(pos)
            triplet = self.chunk_set.os_triplet(pos)
            param_chunk = self.chunk_set.param_chunk(pos)
            for chunk in triplet:
                self.manager.pin(chunk, device)
                if chunk.resident_device is None:
                    # First optimizer step of a lazily initialized state:
                    # the payload comes into existence directly on the
                    # planned device, so no wire traffic is billed.
                    self.manager.place_payload(chunk, device, moment)
                    for t in chunk.tensors:
                        t.fire(Trigger.INIT)
                else:
                    self.manager.fetch_chunk(chunk, device, moment)
                self.manager.record_access(chunk, device, moment)
            for chunk in triplet:
                for t in chunk.tensors:
                    t.fire(Trigger.ADAM_ACCESS)
            self._assert_location(triplet, device, moment)
            self.manager.pin(param_chunk, device)
            if not param_chunk.is_resident_on(device):
                self.manager.fetch_chunk(param_chunk, device, moment,
                                         reason="adam_copy")
            self.manager.record_access(param_chunk, device, moment)
            self.manager.charge_temp(device, staging, moment)
            for chunk in triplet:  # state update writes all three fp32 chunks
                self.manager.note_write(chunk, device)
            # Gradients consumed: the fp16 payload is dead until copy-back.
            for t in param_chunk.tensors:
                t.fire(Trigger.RELEASE)
            self.manager.release_chunk(param_chunk)
            # fp32 master -> fresh fp16 payload, produced on the update device.
            self.manager.place_payload(param_chunk, device, moment)
            for t in param_chunk.tensors:
                t.fire(Trigger.ALLGATHER_ARRIVAL)
            self.manager.unpin(param_chunk)
            if device != GPU:
                self.manager.fetch_chunk(param_chunk, GPU, moment,
                                         reason="adam_copy")
            self.manager.release_temp(device, staging)
            for chunk in triplet:
                for t in chunk.tensors:
                    t.fire(Trigger.ADAM_FINISH)
                self.manager.unpin(chunk)

    def _post_fwd_reset(self) -> None:
        for pos in range(self.chunk_set.positions):
            for t in self.chunk_set.param_chunk(pos).tensors:
                if t.state is TensorState.HOLD_AFTER_FWD:
                    t.fire(Trigger.POST_FWD_RESET)

    # -- iteration driver ------------------------------------------------------

    def run_iteration(self, iteration: int, warmup: bool,
                      plan_builder: Optional[Callable[[WarmupStats], PlacementPlan]] = None,
                      local_positions: Optional[Sequence[int]] = None) -> IterationReport:
        """Execute one iteration; returns an infeasible report on OOM.

        In warm-up mode the manager records accesses and the soft GPU
        limit is enforced; `plan_builder` is invoked when the optimizer
        event starts, so the freshly computed plan already steers the
        warm-up's own optimizer phase.  Measured iterations reuse
        `self.plan` and the strategy the manager was constructed with.
        """
        report = IterationReport(iteration=iteration, warmup=warmup)
        mgr = self.manager
        if warmup:
            mgr.strategy = EvictionStrategy.LIST_ORDER
            mgr.recording = True
            stats: Optional[WarmupStats] = WarmupStats()
            stats.access_moments = mgr.access_moments
            self.warmup_stats = stats
        else:
            mgr.strategy = self.measured_strategy
            mgr.recording = False
            stats = None
        plan = self.plan
        if local_positions is None:
            if self.dp is not None:
                local_positions = self.dp.partition.local_positions(self.dp.rank)
            else:
                local_positions = list(range(self.chunk_set.positions))

        transfers_before = len(mgr.transfers)
        c2g_before, g2c_before = mgr.cpu_to_gpu_bytes, mgr.gpu_to_cpu_bytes
        coll_before = len(self.dp.events) if self.dp else 0
        coll_bytes_before = self.dp.collective_bytes if self.dp else 0
        for pool in mgr.pools.values():
            pool.peak_bytes = pool.used_bytes

        try:
            self._set_non_model(0)
            self._soft_limit(0, warmup)
            self._sample(0, report, stats, "start")
            for ev in self.timeline.events:
                m_during = 2 * ev.index + 1
                m_end = 2 * ev.index + 2
                self._set_non_model(m_during)
                if ev.phase is Phase.ADAM:
                    if plan_builder is not None:
                        plan = plan_builder(stats)
                        self.plan = plan
                    if plan is None:
                        raise ValueError("optimizer event needs a placement plan")
                    self._adam_event(m_during, plan, local_positions)
                elif ev.kind is OpKind.EMBEDDING:
                    self._embedding_event(ev, m_during)
                else:
                    self._compute_event(ev, m_during, iteration, stats)
                self._soft_limit(m_during, warmup)
                self._sample(m_during, report, stats, ev.name)
                if ev.kind is OpKind.EMBEDDING:
                    self._finish_embedding_event(ev)
                elif ev.phase is not Phase.ADAM:
                    self._finish_compute_event(ev, m_during, iteration)
                if ev.index == self.timeline.last_fwd_index:
                    self._post_fwd_reset()
                self._set_non_model(m_end)
                self._soft_limit(m_end, warmup)
                self._sample(m_end, report, stats, ev.name + ".end")
        except OOMError as oom:
            report.feasible = False
            report.failure_reason = ("GPU_OOM" if oom.device == GPU else "CPU_OOM")
            report.failure_moment = oom.moment

        report.transfers = mgr.transfers[transfers_before:]
        report.cpu_to_gpu_bytes = mgr.cpu_to_gpu_bytes - c2g_before
        report.gpu_to_cpu_bytes = mgr.gpu_to_cpu_bytes - g2c_before
        if self.dp is not None:
            report.collectives = self.dp.events[coll_before:]
            report.intra_gpu_collective_bytes = (self.dp.collective_bytes
                                                 - coll_bytes_before)
        report.peak_gpu_bytes = mgr.pools[GPU].peak_bytes
        report.peak_cpu_bytes = mgr.pools[CPU].peak_bytes
        report.validate_conservation()
        return report
