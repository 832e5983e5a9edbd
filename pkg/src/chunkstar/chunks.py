"""Chunks, chunk lists, and the preprocessing-stage tensor-to-chunk mapping.

A chunk is a fixed-capacity contiguous block holding several tensors of one
payload kind.  Four lists share a single packing layout: the fp16 parameter
list and the three fp32 optimizer lists (master parameter, momentum,
variance), so a parameter's tensors sit at identical (chunk position,
offset) coordinates in every list.  Gradients reuse the fp16 parameter
chunks in place; there is no gradient list.

Chunks carry no payload buffers — only byte accounting and a list of
devices currently holding a valid copy.  A chunk with two valid copies can
leave a device for free; a single-copy (dirty) chunk pays a transfer.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .fsm import TensorLifecycle, TensorState, Trigger, PINNING_STATES
from .model import CPU, FP16_BYTES, FP32_BYTES, ModelSchema, param_tensor_specs

DEFAULT_CAPACITY_ELEMS = 32 * 1024 * 1024  # 32 Mi elements


class PackingError(ValueError):
    pass


class TensorTooLargeError(PackingError):
    """A single tensor exceeds the chunk capacity (tensors never span chunks)."""


class ChunkKind(str, Enum):
    PARAM_FP16 = "param_fp16"
    PARAM_FP32 = "param_fp32"
    MOMENTUM = "momentum"
    VARIANCE = "variance"

    @property
    def elem_bytes(self) -> int:
        return FP16_BYTES if self is ChunkKind.PARAM_FP16 else FP32_BYTES


#: Global chunk ids are assigned list by list in this order.
KIND_ORDER: Tuple[ChunkKind, ...] = (
    ChunkKind.PARAM_FP16,
    ChunkKind.PARAM_FP32,
    ChunkKind.MOMENTUM,
    ChunkKind.VARIANCE,
)

#: The optimizer-state triplet: one chunk from each fp32 list per position.
OS_KINDS: Tuple[ChunkKind, ...] = (
    ChunkKind.PARAM_FP32,
    ChunkKind.MOMENTUM,
    ChunkKind.VARIANCE,
)


class Movability(str, Enum):
    RELEASABLE = "releasable"   # all tensors FREE: payload can be dropped
    MOVABLE = "movable"         # no COMPUTE tensor: payload may change tier
    PINNED = "pinned"           # a COMPUTE tensor binds it to its device


@dataclass
class TensorMeta:
    tensor_id: int
    list_kind: ChunkKind
    numel: int
    chunk_id: int
    offset_elems: int
    lifecycle: TensorLifecycle = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.lifecycle is None:
            self.lifecycle = TensorLifecycle(self.tensor_id)

    @property
    def state(self) -> TensorState:
        return self.lifecycle.state

    def fire(self, trigger: Trigger) -> TensorState:
        return self.lifecycle.fire(trigger)


@dataclass
class Chunk:
    chunk_id: int
    list_kind: ChunkKind
    capacity_elems: int
    tensors: List[TensorMeta] = field(default_factory=list)
    copies: List[str] = field(default_factory=list)  # devices with valid payload

    @property
    def elem_bytes(self) -> int:
        return self.list_kind.elem_bytes

    @property
    def bytes(self) -> int:
        """Full capacity is charged wherever the chunk is resident."""
        return self.capacity_elems * self.elem_bytes

    @property
    def used_elems(self) -> int:
        return sum(t.numel for t in self.tensors)

    @property
    def waste_elems(self) -> int:
        return self.capacity_elems - self.used_elems

    @property
    def resident_device(self) -> Optional[str]:
        """Primary residence (first valid copy); None when released."""
        return self.copies[0] if self.copies else None

    @property
    def dirty(self) -> bool:
        """True when no second valid copy exists to fall back on."""
        return len(self.copies) == 1

    def is_resident_on(self, device: str) -> bool:
        return device in self.copies

    def add_copy(self, device: str) -> None:
        if device not in self.copies:
            self.copies.append(device)

    def drop_copy(self, device: str) -> None:
        self.copies.remove(device)

    def invalidate_except(self, device: str) -> None:
        """A write on `device` makes every other copy stale."""
        self.copies = [device]

    def release_payload(self) -> None:
        self.copies = []


def chunk_movability(chunk: Chunk) -> Movability:
    states = [t.state for t in chunk.tensors]
    if any(s in PINNING_STATES for s in states):
        return Movability.PINNED
    if all(s == TensorState.FREE for s in states):
        return Movability.RELEASABLE
    return Movability.MOVABLE


@dataclass
class ChunkList:
    kind: ChunkKind
    chunks: List[Chunk]
    tensor_index: Dict[int, Tuple[int, int]]  # tensor_id -> (chunk_id, offset)

    def __len__(self) -> int:
        return len(self.chunks)

    def tensor(self, tensor_id: int) -> TensorMeta:
        chunk_id, offset = self.tensor_index[tensor_id]
        for chunk in self.chunks:
            if chunk.chunk_id == chunk_id:
                for t in chunk.tensors:
                    if t.tensor_id == tensor_id:
                        return t
        raise KeyError(tensor_id)


def map_tensors_to_chunks(tensor_sizes: Sequence[int], capacity_elems: int,
                          kind: ChunkKind = ChunkKind.PARAM_FP16,
                          first_chunk_id: int = 0,
                          tensor_ids: Optional[Sequence[int]] = None) -> ChunkList:
    """First-fit-sequential packing in initialization order.

    Each tensor is placed immediately after the previous one; a fresh chunk
    is opened whenever the remaining space is insufficient.  Tensors never
    span chunks; one larger than the capacity is an error.
    """
    if capacity_elems <= 0:
        raise PackingError("capacity_elems must be positive")
    ids = list(tensor_ids) if tensor_ids is not None else list(range(len(tensor_sizes)))
    if len(ids) != len(tensor_sizes):
        raise PackingError("tensor_ids length mismatch")

    chunks: List[Chunk] = []
    index: Dict[int, Tuple[int, int]] = {}
    cursor = capacity_elems  # remaining-space trick: force a chunk on first tensor
    for tid, numel in zip(ids, tensor_sizes):
        if numel <= 0:
            raise PackingError("tensor %d has non-positive size %d" % (tid, numel))
        if numel > capacity_elems:
            raise TensorTooLargeError(
                "tensor %d (%d elems) exceeds chunk capacity %d"
                % (tid, numel, capacity_elems))
        if numel > capacity_elems - cursor:
            chunks.append(Chunk(first_chunk_id + len(chunks), kind, capacity_elems))
            cursor = 0
        chunk = chunks[-1]
        chunk.tensors.append(TensorMeta(tid, kind, numel, chunk.chunk_id, cursor))
        index[tid] = (chunk.chunk_id, cursor)
        cursor += numel
    return ChunkList(kind, chunks, index)


@dataclass(frozen=True)
class EmbeddingAllocation:
    """Dedicated non-chunked allocation for the embedding parameters.

    The fp16 weights live in a pinned CPU allocation; the operator may
    still compute on either device (see the placement plan): a CPU-placed
    embedding ships activations (one fp16 activation block down at FWD,
    its gradient back up at BWD), a GPU-placed one ships the weights down
    and the weight gradients up each iteration.
    """

    numel: int  # vocab * hidden

    @property
    def fp16_bytes(self) -> int:
        return FP16_BYTES * self.numel

    def roundtrip_bytes(self, schema: ModelSchema, device: str) -> int:
        """Per-iteration CPU<->GPU traffic when computed on `device`."""
        act = FP16_BYTES * schema.batch * schema.seq_len * schema.hidden_dim
        return 2 * act if device == CPU else 2 * self.fp16_bytes


@dataclass
class ChunkSet:
    """The four chunk lists plus the global chunk registry.

    `positions` is the shared per-list chunk count: position k means the
    k-th chunk of each list, and the optimizer triplet at position k holds
    the fp32 states of exactly the parameters packed into fp16 chunk k.
    """

    capacity_elems: int
    lists: Dict[ChunkKind, ChunkList]
    embedding: Optional[EmbeddingAllocation] = None

    def __post_init__(self) -> None:
        self.chunks: Dict[int, Chunk] = {}
        for kind in KIND_ORDER:
            for chunk in self.lists[kind].chunks:
                self.chunks[chunk.chunk_id] = chunk
        lengths = {kind: len(self.lists[kind]) for kind in KIND_ORDER}
        if len(set(lengths.values())) != 1:
            raise PackingError("list lengths diverge: %r" % lengths)
        self._tensors: Dict[Tuple[ChunkKind, int], TensorMeta] = {}
        for kind in KIND_ORDER:
            for chunk in self.lists[kind].chunks:
                for t in chunk.tensors:
                    self._tensors[(kind, t.tensor_id)] = t

    @property
    def positions(self) -> int:
        return len(self.lists[ChunkKind.PARAM_FP16])

    def chunk_at(self, kind: ChunkKind, position: int) -> Chunk:
        return self.lists[kind].chunks[position]

    def param_chunk(self, position: int) -> Chunk:
        return self.chunk_at(ChunkKind.PARAM_FP16, position)

    def os_triplet(self, position: int) -> Tuple[Chunk, Chunk, Chunk]:
        return tuple(self.chunk_at(kind, position) for kind in OS_KINDS)

    def tensor(self, kind: ChunkKind, tensor_id: int) -> TensorMeta:
        return self._tensors[(kind, tensor_id)]

    def position_of_chunk(self, chunk: Chunk) -> int:
        return self.lists[chunk.list_kind].chunks.index(chunk)

    def param_chunks_for_tensors(self, tensor_ids: Iterable[int]) -> List[Chunk]:
        """Distinct fp16 chunks hosting the given tensors, in id order."""
        seen: Dict[int, Chunk] = {}
        for tid in tensor_ids:
            chunk_id, _ = self.lists[ChunkKind.PARAM_FP16].tensor_index[tid]
            seen[chunk_id] = self.chunks[chunk_id]
        return [seen[k] for k in sorted(seen)]

    @property
    def os_triplet_bytes(self) -> int:
        return sum(kind.elem_bytes for kind in OS_KINDS) * self.capacity_elems

    @property
    def param_chunk_bytes(self) -> int:
        return ChunkKind.PARAM_FP16.elem_bytes * self.capacity_elems

    @property
    def padded_param_elems(self) -> int:
        return self.positions * self.capacity_elems

    @property
    def waste_elems(self) -> int:
        return sum(c.waste_elems for c in self.lists[ChunkKind.PARAM_FP16].chunks)

    def init_on_cpu(self, positions: Optional[Iterable[int]] = None,
                    kinds: Optional[Sequence[ChunkKind]] = None) -> None:
        """Populate payloads: chosen positions of the chosen lists start on CPU.

        Unlisted positions stay FREE with no copies (a data-parallel peer
        owns their payload).  Passing ``kinds=(ChunkKind.PARAM_FP16,)``
        defers the optimizer-state lists entirely: their chunks then
        materialize on whatever device the placement plan selects at the
        first optimizer step, so a host that cannot stage the full layout
        can still run when the steady-state placement fits.
        """
        chosen = set(range(self.positions)) if positions is None else set(positions)
        for kind in (KIND_ORDER if kinds is None else kinds):
            for pos, chunk in enumerate(self.lists[kind].chunks):
                if pos in chosen:
                    chunk.add_copy(CPU)
                    for t in chunk.tensors:
                        t.fire(Trigger.INIT)

    def layout_rows(self) -> List[Tuple[int, str, int, int, int]]:
        rows = []
        for kind in KIND_ORDER:
            for chunk in self.lists[kind].chunks:
                for t in chunk.tensors:
                    rows.append((t.tensor_id, kind.value, chunk.chunk_id,
                                 t.offset_elems, t.numel))
        return rows


def build_chunk_lists_from_sizes(tensor_sizes: Sequence[int], capacity_elems: int,
                                 embedding: Optional[EmbeddingAllocation] = None) -> ChunkSet:
    """Build the four lists for an explicit tensor-size sequence.

    The fp16 parameter list is packed first; the three fp32 lists replicate
    its layout position for position, so offsets agree across lists.
    Global chunk ids run list by list: all fp16 chunks, then param fp32,
    momentum, variance.
    """
    base = map_tensors_to_chunks(tensor_sizes, capacity_elems, ChunkKind.PARAM_FP16)
    n = len(base.chunks)
    lists: Dict[ChunkKind, ChunkList] = {ChunkKind.PARAM_FP16: base}
    for i, kind in enumerate(OS_KINDS):
        offset = (i + 1) * n
        chunks = []
        index: Dict[int, Tuple[int, int]] = {}
        for pos, src in enumerate(base.chunks):
            clone = Chunk(offset + pos, kind, capacity_elems)
            for t in src.tensors:
                clone.tensors.append(TensorMeta(t.tensor_id, kind, t.numel,
                                                clone.chunk_id, t.offset_elems))
                index[t.tensor_id] = (clone.chunk_id, t.offset_elems)
            chunks.append(clone)
        lists[kind] = ChunkList(kind, chunks, index)
    return ChunkSet(capacity_elems, lists, embedding)


def build_model_chunk_lists(schema: ModelSchema,
                            capacity_elems: int = DEFAULT_CAPACITY_ELEMS) -> ChunkSet:
    """Chunk lists for a model schema (embedding parameters excluded).

    Embedding parameters are not chunk-managed; they get a dedicated
    CPU-resident allocation recorded on the returned set.
    """
    sizes = [s.numel for s in param_tensor_specs(schema)]
    emb = EmbeddingAllocation(schema.embedding_param_count)
    return build_chunk_lists_from_sizes(sizes, capacity_elems, emb)
