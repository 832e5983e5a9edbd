"""Chunk-collective data parallelism (ZeRO-style sharding over chunks).

Chunk position k of every list belongs to process k mod p, so one
process's optimizer triplet always updates its own parameter chunk and
the optimizer phase needs no communication.  Parameter chunks form
communication groups of p consecutive positions — one chunk per process.
A group is all-gathered when some tensor in it is accessed while FREE,
its remote payloads are dropped once the whole group has passed forward,
re-gathered for backward, and reduce-scattered once every tensor holds a
gradient.

The simulation is rank 0's view: all ranks run the same timeline on the
same layout, so one process's trace plus the per-process collective cost
model (ring convention: (p-1)/p of the group payload per direction)
describes every rank.  Remote optimizer chunks are never materialized.
"""

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .chunks import Chunk, ChunkKind, ChunkSet
from .fsm import TensorState, Trigger
from .memory import MemoryManager
from .model import GPU, Phase


class CollectiveScheme(str, Enum):
    CHUNK_COLLECTIVE = "chunk_collective"
    BROADCAST_BASED = "broadcast_based"


def closed_form_volume(p: int, param_elems: int, scheme: CollectiveScheme) -> Fraction:
    """Per-process collective volume for one iteration, ring convention.

    Chunk-collective: two all-gathers (forward and backward) at
    2 x (p-1)/p x 2M plus one reduce-scatter at (p-1)/p x 2M, i.e.
    6(p-1)/p x M.  The broadcast-based alternative costs 10(p-1)/p x M,
    exactly 5/3 as much.  With M in parameter elements the value equals
    fp16 wire bytes per process, so it can be compared to simulated
    collective byte counters directly; pass the group-padded element
    count (DpPartition.padded_param_elems) for an exact match.
    """
    if p < 1 or param_elems < 0:
        raise ValueError("need p >= 1 and param_elems >= 0")
    factor = 6 if scheme is CollectiveScheme.CHUNK_COLLECTIVE else 10
    return Fraction(factor * (p - 1) * param_elems, p)


@dataclass(frozen=True)
class ParallelConfig:
    nproc: int
    total_cpu_bytes: int
    gpu_bytes: int

    def __post_init__(self) -> None:
        if self.nproc < 1:
            raise ValueError("nproc must be >= 1")

    @property
    def per_process_cpu_bytes(self) -> int:
        return self.total_cpu_bytes // self.nproc


class GroupPhase(str, Enum):
    IDLE = "idle"
    GATHERED = "gathered"
    REDUCED = "reduced"


@dataclass
class CommGroup:
    group_id: int
    member_positions: Tuple[Optional[int], ...]  # None = phantom padding
    phase_state: GroupPhase = GroupPhase.IDLE

    @property
    def includes_padding(self) -> bool:
        return any(pos is None for pos in self.member_positions)

    @property
    def real_positions(self) -> Tuple[int, ...]:
        return tuple(pos for pos in self.member_positions if pos is not None)


@dataclass(frozen=True)
class CollectiveEvent:
    iteration: int
    group_id: int
    kind: str  # allgather_fwd | allgather_bwd | regather_refwd | reduce_scatter
    bytes: int
    includes_padding: bool


@dataclass
class DpPartition:
    """Ownership map and communication groups for one parallel degree."""

    nproc: int
    positions: int
    groups: List[CommGroup] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.groups:
            p = self.nproc
            for g in range((self.positions + p - 1) // p):
                members = tuple(
                    pos if pos < self.positions else None
                    for pos in range(g * p, (g + 1) * p))
                self.groups.append(CommGroup(g, members))

    def owner_of_position(self, position: int) -> int:
        return position % self.nproc

    def local_positions(self, rank: int = 0) -> List[int]:
        return [pos for pos in range(self.positions)
                if self.owner_of_position(pos) == rank]

    def group_of_position(self, position: int) -> CommGroup:
        return self.groups[position // self.nproc]

    @property
    def slot_count(self) -> int:
        """Positions rounded up to a whole number of groups (phantoms included)."""
        return len(self.groups) * self.nproc

    def padded_param_elems(self, capacity_elems: int) -> int:
        """Chunk-managed parameter elements including phantom group padding.

        This is the M that makes the event-level collective accounting agree
        with closed_form_volume exactly: every group moves (p-1)/p of its
        payload per collective whether or not its tail slots are phantom.
        """
        return self.slot_count * capacity_elems


def partition_chunks(chunk_set: ChunkSet, nproc: int) -> DpPartition:
    """Position k of every list is owned by process k mod nproc; parameter
    positions form groups of nproc consecutive chunks (tail padded)."""
    return DpPartition(nproc=nproc, positions=chunk_set.positions)


class DpRuntime:
    """Collective protocol driver for the simulated rank (rank 0).

    Remote parameter chunks exist in the layout with FREE tensors and no
    payload; gathers materialize them on the GPU and pin them.  The pin
    is dropped once an operator that uses the chunk finishes, so idle
    gathered payloads stay evictable under pressure — the reduce-scatter
    fetches any evicted member back before reducing.  Padded-group
    collectives are still charged full wire volume but flagged.
    """

    def __init__(self, chunk_set: ChunkSet, partition: DpPartition,
                 manager: MemoryManager, rank: int = 0):
        self.chunk_set = chunk_set
        self.partition = partition
        self.manager = manager
        self.rank = rank
        self.events: List[CollectiveEvent] = []
        self.collective_bytes = 0
        self.regather_bytes = 0

    @property
    def nproc(self) -> int:
        return self.partition.nproc

    def group_wire_bytes(self) -> int:
        """Per-process ring volume of one collective over one group."""
        return (self.nproc - 1) * self.chunk_set.param_chunk_bytes

    def _remote_chunks(self, group: CommGroup) -> List[Chunk]:
        return [self.chunk_set.param_chunk(pos) for pos in group.real_positions
                if self.partition.owner_of_position(pos) != self.rank]

    def _group_chunks(self, group: CommGroup) -> List[Chunk]:
        return [self.chunk_set.param_chunk(pos) for pos in group.real_positions]

    def groups_of_chunks(self, chunks: Sequence[Chunk]) -> List[CommGroup]:
        seen: Dict[int, CommGroup] = {}
        for chunk in chunks:
            pos = self.chunk_set.position_of_chunk(chunk)
            group = self.partition.group_of_position(pos)
            seen[group.group_id] = group
        return [seen[g] for g in sorted(seen)]

    def _record(self, iteration: int, group: CommGroup, kind: str) -> None:
        nbytes = self.group_wire_bytes()
        self.events.append(CollectiveEvent(iteration, group.group_id, kind,
                                           nbytes, group.includes_padding))
        self.collective_bytes += nbytes
        if kind == "regather_refwd":
            self.regather_bytes += nbytes

    def on_param_access(self, phase: Phase, chunks: Sequence[Chunk], moment: int,
                        iteration: int) -> None:
        """All-gather every touched group that still has a FREE tensor."""
        if self.nproc == 1:
            return
        for group in self.groups_of_chunks(chunks):
            members = self._group_chunks(group)
            remotes = self._remote_chunks(group)
            if remotes:
                if not any(t.state is TensorState.FREE
                           for c in members for t in c.tensors):
                    continue
            elif group.phase_state is GroupPhase.GATHERED:
                # A tail group whose non-local slots are all phantom has
                # nothing to receive, but the ring transfer still runs
                # (the peers receive this rank's chunk), so it is billed
                # once per gather phase like any other group.
                continue
            for chunk in remotes:
                self.manager.place_payload(chunk, GPU, moment)
                for t in chunk.tensors:
                    t.fire(Trigger.ALLGATHER_ARRIVAL)
                self.manager.pin(chunk, GPU)
            kind = {Phase.FWD: "allgather_fwd",
                    Phase.BWD: "allgather_bwd",
                    Phase.RE_FWD: "regather_refwd"}[phase]
            self._record(iteration, group, kind)
            group.phase_state = GroupPhase.GATHERED

    def after_fwd_event(self, chunks: Sequence[Chunk], moment: int) -> None:
        """Drop remote payloads of groups whose forward pass just completed."""
        if self.nproc == 1:
            return
        for group in self.groups_of_chunks(chunks):
            members = self._group_chunks(group)
            if not all(t.state is TensorState.HOLD_AFTER_FWD
                       for c in members for t in c.tensors):
                continue
            for chunk in self._remote_chunks(group):
                for t in chunk.tensors:
                    t.fire(Trigger.RELEASE)
                self.manager.release_chunk(chunk)
                self.manager.unpin(chunk)
            group.phase_state = GroupPhase.IDLE

    def after_bwd_event(self, chunks: Sequence[Chunk], moment: int,
                        iteration: int) -> None:
        """Reduce-scatter groups whose every tensor now holds a gradient."""
        if self.nproc == 1:
            return
        for group in self.groups_of_chunks(chunks):
            members = self._group_chunks(group)
            if not all(t.state is TensorState.HOLD_AFTER_BWD
                       for c in members for t in c.tensors):
                continue
            for chunk in members:  # evicted members must return first
                if not chunk.is_resident_on(GPU):
                    self.manager.fetch_chunk(chunk, GPU, moment)
            self._record(iteration, group, "reduce_scatter")
            for chunk in self._remote_chunks(group):
                for t in chunk.tensors:
                    t.fire(Trigger.RELEASE)
                self.manager.release_chunk(chunk)
                self.manager.unpin(chunk)
            for pos in group.real_positions:
                if self.partition.owner_of_position(pos) == self.rank:
                    local = self.chunk_set.param_chunk(pos)
                    self.manager.note_write(local, GPU)  # averaged gradients
            group.phase_state = GroupPhase.REDUCED
