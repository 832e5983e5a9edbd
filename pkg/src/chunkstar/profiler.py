"""Warm-up profiling statistics and the device-aware placement plan.

The first training iteration runs with plain list-order eviction while
every moment's memory usage and every chunk access is recorded.  From
those statistics the planner computes the GPU margin — capacity minus
the peak non-chunk footprint minus the forward/backward chunk working
set — and packs as many optimizer triplets as fit into it, lowest
parameter positions first.  The embedding operator's compute device is a
pure byte comparison: weights stay on the CPU side whenever shipping
them would cost more than shipping the activations both ways.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .chunks import ChunkSet
from .fsm import TensorState
from .memory import DevicePool
from .model import (CPU, GPU, ModelSchema, OpKind, Phase, Timeline,
                    activation_bytes_at)
from .parallel import DpPartition


class ProfileError(KeyError):
    """A statistic was requested for a moment that was never sampled."""


@dataclass(frozen=True)
class MomentSample:
    moment: int
    device: str
    used_bytes: int       # R: total device memory in use
    chunk_bytes: int      # C: bytes allocated by the chunk manager
    non_model_bytes: int  # R - C

    def __post_init__(self) -> None:
        if self.non_model_bytes < 0 or self.used_bytes < self.chunk_bytes:
            raise AssertionError("sample accounting violated at moment %d"
                                 % self.moment)


@dataclass
class WarmupStats:
    samples: List[MomentSample] = field(default_factory=list)
    access_moments: Dict[Tuple[str, int], List[int]] = field(default_factory=dict)
    working_set_bytes: int = 0

    def sample_index(self) -> Dict[Tuple[str, int], MomentSample]:
        return {(s.device, s.moment): s for s in self.samples}

    def peak_non_model(self, device: str = GPU) -> int:
        vals = [s.non_model_bytes for s in self.samples if s.device == device]
        return max(vals) if vals else 0

    def non_model_curve(self, device: str = GPU) -> List[Tuple[int, int]]:
        return [(s.moment, s.non_model_bytes) for s in self.samples
                if s.device == device]


def chunkable_memory(device_pool: DevicePool, moment: int,
                     samples: Sequence[MomentSample]) -> int:
    """Device capacity minus the moment's non-chunk footprint."""
    for s in samples:
        if s.device == device_pool.device and s.moment == moment:
            return device_pool.capacity_bytes - s.non_model_bytes
    raise ProfileError("no sample for device %s at moment %d"
                       % (device_pool.device, moment))


def embedding_compute_device(schema: ModelSchema) -> str:
    """CPU whenever the weights outweigh a round trip of their activations."""
    weight_bytes = 2 * schema.embedding_param_count
    activation_roundtrip = 2 * (2 * schema.batch * schema.seq_len * schema.hidden_dim)
    return CPU if weight_bytes > activation_roundtrip else GPU


@dataclass(frozen=True)
class PlacementPlan:
    gpu_margin_bytes: int
    peak_non_model_bytes: int
    working_set_bytes: int
    os_positions_on_gpu: Tuple[int, ...]
    embedding_device: str

    @property
    def os_chunks_on_gpu(self) -> int:
        return 3 * len(self.os_positions_on_gpu)

    def device_of_position(self, position: int) -> str:
        return GPU if position in self.os_positions_on_gpu else CPU


def compute_placement_plan(stats: WarmupStats, chunk_set: ChunkSet,
                           gpu_capacity_bytes: int, schema: Optional[ModelSchema],
                           local_positions: Optional[Sequence[int]] = None,
                           os_placement: str = "auto") -> PlacementPlan:
    """Margin-space packing of optimizer triplets, lowest positions first.

    `os_placement` overrides the margin arithmetic: "cpu" keeps every
    triplet on the CPU side, "gpu" forces them all onto the GPU.
    """
    return _pack_plan(stats.peak_non_model(GPU), stats.working_set_bytes,
                      chunk_set, gpu_capacity_bytes, schema,
                      local_positions, os_placement)


def _pack_plan(peak_nm: int, working_set: int, chunk_set: ChunkSet,
               gpu_capacity_bytes: int, schema: Optional[ModelSchema],
               local_positions: Optional[Sequence[int]],
               os_placement: str) -> PlacementPlan:
    margin = max(0, gpu_capacity_bytes - peak_nm - working_set)
    positions = (list(local_positions) if local_positions is not None
                 else list(range(chunk_set.positions)))
    positions.sort()
    triplet = chunk_set.os_triplet_bytes
    if os_placement == "cpu":
        on_gpu: Tuple[int, ...] = ()
    elif os_placement == "gpu":
        on_gpu = tuple(positions)
    elif os_placement == "auto":
        fit = margin // triplet if triplet else 0
        on_gpu = tuple(positions[:fit])
    else:
        raise ValueError("os_placement must be auto, cpu, or gpu")
    emb_device = embedding_compute_device(schema) if schema is not None else CPU
    return PlacementPlan(gpu_margin_bytes=margin,
                         peak_non_model_bytes=peak_nm,
                         working_set_bytes=working_set,
                         os_positions_on_gpu=on_gpu,
                         embedding_device=emb_device)


def engine_peak_non_model(schema: ModelSchema, timeline: Timeline) -> int:
    """Peak GPU non-chunk footprint as a warm-up run measures it.

    The activation curve alone undercounts: while a backward operator
    runs, its dead fp16 parameter payload is still held as a staging
    buffer until the gradients overwrite it, and when the embedding
    computes on the GPU its weights occupy a transient block for the
    duration of the operator.  Both transients are live at the moment
    the simulator samples, so they belong in the planning peak.
    """
    emb_on_gpu = embedding_compute_device(schema) == GPU
    emb_bytes = 2 * schema.embedding_param_count
    peak = activation_bytes_at(schema, timeline, 0, timeline.checkpointed)
    for ev in timeline.events:
        during = activation_bytes_at(schema, timeline, 2 * ev.index + 1,
                                     timeline.checkpointed)
        end = activation_bytes_at(schema, timeline, 2 * ev.index + 2,
                                  timeline.checkpointed)
        extra = 0
        if ev.kind is OpKind.EMBEDDING:
            extra = emb_bytes if emb_on_gpu else 0
        elif ev.phase is Phase.BWD:
            extra = ev.param_bytes
        peak = max(peak, during + extra, end)
    return peak


def analytic_placement_plan(schema: ModelSchema, timeline: Timeline,
                            chunk_set: ChunkSet, gpu_capacity_bytes: int,
                            partition: Optional[DpPartition] = None,
                            rank: int = 0,
                            os_placement: str = "auto") -> PlacementPlan:
    """The plan a warm-up would produce, derived without simulating.

    Uses the closed-form sampled-peak curve for the non-model footprint
    and the dry-run working-set scan, so layouts can be explained before
    (or instead of) running the event engine.  A real warm-up on the
    same inputs yields the same plan because both quantities are exact.
    """
    peak_nm = engine_peak_non_model(schema, timeline)
    working_set = analytic_working_set(chunk_set, timeline, partition, rank)
    local = partition.local_positions(rank) if partition is not None else None
    return _pack_plan(peak_nm, working_set, chunk_set, gpu_capacity_bytes,
                      schema, local, os_placement)


def analytic_working_set(chunk_set: ChunkSet, timeline: Timeline,
                         partition: Optional[DpPartition] = None,
                         rank: int = 0) -> int:
    """Forward/backward chunk working set without running the simulator.

    Replays the pin discipline over the timeline.  An operator pins the
    fp16 chunks it computes with for exactly its own duration; an
    all-gather pins the freshly arrived remote payloads, but the first
    later operator that touches such a chunk drops the pin when it
    finishes (gathered-but-idle chunks stay evictable and are fetched
    back for the reduce-scatter if needed).  Returns the byte peak of
    the pinned set at the sampling points — by construction equal to
    what a warm-up run measures.
    """
    states: Dict[int, TensorState] = {}
    local = set(range(chunk_set.positions)) if partition is None else {
        pos for pos in range(chunk_set.positions)
        if partition.owner_of_position(pos) == rank}
    for pos in range(chunk_set.positions):
        for t in chunk_set.param_chunk(pos).tensors:
            states[t.tensor_id] = (TensorState.HOLD if pos in local
                                   else TensorState.FREE)

    def chunk_tensor_states(pos: int) -> List[TensorState]:
        return [states[t.tensor_id] for t in chunk_set.param_chunk(pos).tensors]

    gathered_remote: Dict[int, List[int]] = {}  # group_id -> remote positions
    pinned: set = set()                         # positions currently pinned
    peak = 0
    for ev in timeline.events:
        if ev.phase is Phase.ADAM or not ev.tensor_refs:
            continue
        chunks = chunk_set.param_chunks_for_tensors(ev.tensor_refs)
        positions = [chunk_set.position_of_chunk(c) for c in chunks]
        groups = []
        if partition is not None and partition.nproc > 1:
            seen = {}
            for pos in positions:
                g = partition.group_of_position(pos)
                seen[g.group_id] = g
            groups = [seen[k] for k in sorted(seen)]
            for g in groups:
                member_states = [s for pos in g.real_positions
                                 for s in chunk_tensor_states(pos)]
                if any(s is TensorState.FREE for s in member_states):
                    remotes = [pos for pos in g.real_positions if pos not in local]
                    for pos in remotes:
                        for t in chunk_set.param_chunk(pos).tensors:
                            states[t.tensor_id] = TensorState.HOLD
                    gathered_remote[g.group_id] = remotes
                    pinned.update(remotes)
        for tid in ev.tensor_refs:
            states[tid] = TensorState.COMPUTE
        pinned.update(positions)
        footprint = len(pinned) * chunk_set.param_chunk_bytes
        peak = max(peak, footprint)
        next_state = (TensorState.HOLD_AFTER_BWD if ev.phase is Phase.BWD
                      else TensorState.HOLD_AFTER_FWD)
        for tid in ev.tensor_refs:
            states[tid] = next_state
        pinned.difference_update(positions)  # operator pins end with it
        for g in groups:
            member_states = [s for pos in g.real_positions
                             for s in chunk_tensor_states(pos)]
            done_fwd = (ev.phase is Phase.FWD and
                        all(s is TensorState.HOLD_AFTER_FWD for s in member_states))
            done_bwd = (ev.phase is Phase.BWD and
                        all(s is TensorState.HOLD_AFTER_BWD for s in member_states))
            if done_fwd or done_bwd:
                for pos in gathered_remote.pop(g.group_id, []):
                    for t in chunk_set.param_chunk(pos).tensors:
                        states[t.tensor_id] = TensorState.FREE
                    pinned.discard(pos)
        if ev.index == timeline.last_fwd_index:
            for tid, s in states.items():
                if s is TensorState.HOLD_AFTER_FWD:
                    states[tid] = TensorState.HOLD
    return peak
