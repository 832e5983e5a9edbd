"""Model schemas, memory budgets, and the operator-event timeline.

A training iteration is modeled as a flat sequence of operator events:
one embedding lookup, four compute operators per transformer layer
(attention QKV, attention output projection, MLP in, MLP out), the same
operators mirrored for the backward pass in exact reverse order, and a
single optimizer event at the end.  Every event carries the parameter
tensors it computes with and a signed activation delta, so the
non-model-data "tide" curve of an iteration can be evaluated
analytically at any moment without running the simulator.

All byte quantities are integers.  GB is decimal (1 GB = 1e9 bytes);
chunk capacities elsewhere in the package are binary (Mi elements).
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

FP16_BYTES = 2
FP32_BYTES = 4

CPU = "cpu"
GPU = "gpu"

DEFAULT_CONTEXT_BYTES = 1 << 30  # CUDA context + allocator reserve (1 GiB)


class Phase(str, Enum):
    FWD = "fwd"
    BWD = "bwd"
    RE_FWD = "re_fwd"
    ADAM = "adam"


class OpKind(str, Enum):
    COMPUTE_INTENSIVE = "compute_intensive"
    MEMORY_INTENSIVE = "memory_intensive"
    EMBEDDING = "embedding"


class SchemaError(ValueError):
    """Invalid model dimensions."""


@dataclass(frozen=True)
class ModelSchema:
    """GPT-like model description.

    param_count follows the standard decomposition 12 * L * H^2 + V * H:
    each layer holds 12 H^2 parameters (QKV 3H^2, attention output H^2,
    MLP in 4H^2, MLP out 4H^2) and the embedding holds V * H.
    """

    layers: int
    hidden_dim: int
    heads: int = 16
    seq_len: int = 1024
    vocab: int = 50304
    batch: int = 8
    context_bytes: int = DEFAULT_CONTEXT_BYTES
    fragmentation: float = 1.0

    def __post_init__(self) -> None:
        for name in ("layers", "hidden_dim", "heads", "seq_len", "vocab", "batch"):
            if getattr(self, name) <= 0:
                raise SchemaError("invalid dimension: %s=%r must be > 0" % (name, getattr(self, name)))
        if self.hidden_dim % self.heads != 0:
            raise SchemaError(
                "invalid dimension: hidden_dim=%d not divisible by heads=%d"
                % (self.hidden_dim, self.heads)
            )
        if self.context_bytes < 0 or self.fragmentation < 1.0:
            raise SchemaError("context_bytes must be >= 0 and fragmentation >= 1.0")

    @property
    def layer_param_count(self) -> int:
        return 12 * self.hidden_dim * self.hidden_dim

    @property
    def chunked_param_count(self) -> int:
        """Parameters managed by the chunk lists (embedding excluded)."""
        return self.layers * self.layer_param_count

    @property
    def embedding_param_count(self) -> int:
        return self.vocab * self.hidden_dim

    @property
    def param_count(self) -> int:
        return self.chunked_param_count + self.embedding_param_count


def build_gpt_schema(layers: int, hidden_dim: int, heads: int = 16, seq_len: int = 1024,
                     vocab: int = 50304, batch: int = 8, **kwargs) -> ModelSchema:
    """Construct and validate a GPT-like schema (raises SchemaError on bad dims)."""
    return ModelSchema(layers=layers, hidden_dim=hidden_dim, heads=heads,
                       seq_len=seq_len, vocab=vocab, batch=batch, **kwargs)


@dataclass(frozen=True)
class MemoryBudget:
    """Model-data byte budget for M parameters under fp16/fp32 mixed precision.

    param fp16 = 2M, grad fp16 = 2M, optimizer states = 12M
    (momentum fp32 4M + variance fp32 4M + master param fp32 4M).

    component_total counts each component once (16M).  paper_total is the
    conventional 18M figure that counts the fp16 parameter bytes once more
    on top of the component sum; both are exposed because published
    capacity arithmetic uses 18M while phase-level accounting uses 16M.
    """

    param_count: int

    @property
    def param_fp16_bytes(self) -> int:
        return FP16_BYTES * self.param_count

    @property
    def grad_fp16_bytes(self) -> int:
        return FP16_BYTES * self.param_count

    @property
    def momentum_bytes(self) -> int:
        return FP32_BYTES * self.param_count

    @property
    def variance_bytes(self) -> int:
        return FP32_BYTES * self.param_count

    @property
    def param_fp32_bytes(self) -> int:
        return FP32_BYTES * self.param_count

    @property
    def os_bytes(self) -> int:
        return self.momentum_bytes + self.variance_bytes + self.param_fp32_bytes

    @property
    def component_total_bytes(self) -> int:
        return self.param_fp16_bytes + self.grad_fp16_bytes + self.os_bytes

    @property
    def paper_total_bytes(self) -> int:
        return self.param_fp16_bytes + self.component_total_bytes


def memory_budget_from_param_count(param_count: int) -> MemoryBudget:
    if param_count <= 0:
        raise SchemaError("param_count must be > 0")
    return MemoryBudget(param_count)


def model_data_bytes(schema: ModelSchema) -> MemoryBudget:
    return MemoryBudget(schema.param_count)


# Per-layer operator slots.  Tensor shapes per slot, as multiples of H^2:
# QKV holds three H x H projections, attention output one, and each MLP
# weight (H x 4H and 4H x H) is split into two H x 2H halves so that no
# single tensor exceeds 2H^2 = 2^25 elements at H = 4096.
OP_SLOTS: Tuple[Tuple[str, Tuple[int, ...]], ...] = (
    ("qkv", (1, 1, 1)),
    ("attn_out", (1,)),
    ("mlp_in", (2, 2)),
    ("mlp_out", (2, 2)),
)


@dataclass(frozen=True)
class TensorSpec:
    tensor_id: int
    name: str
    numel: int
    layer: int
    op_slot: int


def param_tensor_specs(schema: ModelSchema) -> List[TensorSpec]:
    """Chunk-managed parameter tensors in model (init) order."""
    h2 = schema.hidden_dim * schema.hidden_dim
    specs: List[TensorSpec] = []
    tid = 0
    for layer in range(schema.layers):
        for slot, (op_name, shape) in enumerate(OP_SLOTS):
            for j, mult in enumerate(shape):
                specs.append(TensorSpec(tid, "l%d.%s.%d" % (layer, op_name, j),
                                        mult * h2, layer, slot))
                tid += 1
    return specs


@dataclass(frozen=True)
class OperatorEvent:
    index: int
    name: str
    phase: Phase
    kind: OpKind
    layer: int                      # -1 for embedding / optimizer events
    tensor_refs: Tuple[int, ...]    # param fp16 tensor ids this event computes with
    activation_delta_bytes: int     # signed; + charged at start, - at finish
    param_bytes: int                # fp16 bytes of tensor_refs (temp grad buffer size)


@dataclass(frozen=True)
class Timeline:
    """Operator events of one training iteration plus the activation curve.

    Moment grid: an iteration with E events has 2E + 1 moments.  Moment 2i
    samples the boundary before event i starts, moment 2i+1 samples while
    event i runs (its positive activation delta charged), and moment 2E is
    the boundary after the final event (negative deltas apply at finish).
    """

    events: Tuple[OperatorEvent, ...]
    checkpointed: bool
    activation_cum: Tuple[int, ...] = field(repr=False)

    @property
    def moment_count(self) -> int:
        return 2 * len(self.events) + 1

    @property
    def last_fwd_index(self) -> int:
        """Index of the final FWD-phase event (-1 if none)."""
        last = -1
        for ev in self.events:
            if ev.phase == Phase.FWD:
                last = ev.index
        return last


def _layer_fwd_deltas(schema: ModelSchema, checkpointing: bool) -> Tuple[int, int, int, int]:
    """Activation bytes retained by each FWD operator of one layer.

    u = B*S*H fp16 bytes; attention scores add B*heads*S^2 fp16 bytes.
    Without checkpointing the whole set (10u + scores) persists until the
    layer's BWD; with checkpointing only the layer-boundary u persists and
    the rest is re-materialized by the RE_FWD window.
    """
    u = schema.batch * schema.seq_len * schema.hidden_dim * FP16_BYTES
    sc = schema.batch * schema.heads * schema.seq_len * schema.seq_len * FP16_BYTES
    if checkpointing:
        return (u, 0, 0, 0)
    return (3 * u, sc + 2 * u, 4 * u, u)


def _refwd_deltas(schema: ModelSchema) -> Tuple[int, int, int, int]:
    u = schema.batch * schema.seq_len * schema.hidden_dim * FP16_BYTES
    sc = schema.batch * schema.heads * schema.seq_len * schema.seq_len * FP16_BYTES
    return (3 * u, sc + 2 * u, 4 * u, 0)


def _ckpt_bwd_deltas(schema: ModelSchema) -> Tuple[int, int, int, int]:
    # Reverse op order (mlp_out first).  The last BWD op of the layer also
    # frees the layer-boundary activation charged during FWD.
    u = schema.batch * schema.seq_len * schema.hidden_dim * FP16_BYTES
    sc = schema.batch * schema.heads * schema.seq_len * schema.seq_len * FP16_BYTES
    return (0, -4 * u, -(sc + 2 * u), -4 * u)


def build_event_timeline(schema: ModelSchema, checkpointing: bool = False) -> Timeline:
    """Build the operator-event sequence of one iteration.

    Event count: (4L + 1) FWD + (4L + 1) BWD + 1 ADAM, plus 4L RE_FWD
    events when checkpointing is enabled.  BWD events appear in exact
    reverse order of their FWD counterparts.
    """
    specs = param_tensor_specs(schema)
    by_op: Dict[Tuple[int, int], List[int]] = {}
    for s in specs:
        by_op.setdefault((s.layer, s.op_slot), []).append(s.tensor_id)

    numel_by_id = {s.tensor_id: s.numel for s in specs}

    def op_param_bytes(layer: int, slot: int) -> int:
        return FP16_BYTES * sum(numel_by_id[t] for t in by_op[(layer, slot)])

    u = schema.batch * schema.seq_len * schema.hidden_dim * FP16_BYTES
    events: List[OperatorEvent] = []

    def add(name, phase, kind, layer, refs, delta, pbytes):
        events.append(OperatorEvent(len(events), name, phase, kind, layer,
                                    tuple(refs), delta, pbytes))

    add("embedding.fwd", Phase.FWD, OpKind.EMBEDDING, -1, (), u, 0)
    fwd_deltas = _layer_fwd_deltas(schema, checkpointing)
    for layer in range(schema.layers):
        for slot, (op_name, _) in enumerate(OP_SLOTS):
            add("l%d.%s.fwd" % (layer, op_name), Phase.FWD, OpKind.COMPUTE_INTENSIVE,
                layer, by_op[(layer, slot)], fwd_deltas[slot], op_param_bytes(layer, slot))

    if checkpointing:
        refwd = _refwd_deltas(schema)
        bwd = _ckpt_bwd_deltas(schema)
        for layer in range(schema.layers - 1, -1, -1):
            for slot, (op_name, _) in enumerate(OP_SLOTS):
                add("l%d.%s.refwd" % (layer, op_name), Phase.RE_FWD,
                    OpKind.COMPUTE_INTENSIVE, layer, by_op[(layer, slot)],
                    refwd[slot], op_param_bytes(layer, slot))
            for slot in (3, 2, 1, 0):
                op_name = OP_SLOTS[slot][0]
                add("l%d.%s.bwd" % (layer, op_name), Phase.BWD,
                    OpKind.COMPUTE_INTENSIVE, layer, by_op[(layer, slot)],
                    bwd[slot], op_param_bytes(layer, slot))
    else:
        for layer in range(schema.layers - 1, -1, -1):
            for slot in (3, 2, 1, 0):
                op_name = OP_SLOTS[slot][0]
                add("l%d.%s.bwd" % (layer, op_name), Phase.BWD,
                    OpKind.COMPUTE_INTENSIVE, layer, by_op[(layer, slot)],
                    -fwd_deltas[slot], op_param_bytes(layer, slot))

    add("embedding.bwd", Phase.BWD, OpKind.EMBEDDING, -1, (), -u, 0)
    add("adam", Phase.ADAM, OpKind.MEMORY_INTENSIVE, -1, (), 0, 0)

    cum: List[int] = [0]
    for ev in events:
        delta = ev.activation_delta_bytes
        cum.append(cum[-1] + max(delta, 0))   # allocated at operator start
        cum.append(cum[-1] + min(delta, 0))   # freed at operator finish
    if cum[-1] != 0:
        raise AssertionError("activation deltas do not balance: tail=%d" % cum[-1])
    if min(cum) < 0:
        raise AssertionError("activation curve went negative")

    return Timeline(events=tuple(events), checkpointed=checkpointing,
                    activation_cum=tuple(cum))


def activation_bytes_at(schema: ModelSchema, timeline: Timeline, moment_index: int,
                        checkpoint_enabled: bool) -> int:
    """Analytical non-model-data footprint at a moment.

    Cumulative activation bytes up to the moment, scaled by the
    fragmentation multiplier, plus the constant runtime-context overhead.
    """
    if checkpoint_enabled != timeline.checkpointed:
        raise ValueError("checkpoint flag does not match the timeline")
    if not 0 <= moment_index < timeline.moment_count:
        raise ValueError("moment index %d out of range [0, %d)"
                         % (moment_index, timeline.moment_count))
    acts = timeline.activation_cum[moment_index]
    return schema.context_bytes + int(round(schema.fragmentation * acts))


def peak_activation_bytes(schema: ModelSchema, timeline: Timeline) -> int:
    """Peak of the non-model-data curve over all moments of the iteration."""
    return schema.context_bytes + int(round(schema.fragmentation * max(timeline.activation_cum)))


@dataclass(frozen=True)
class LadderRung:
    label: str
    layers: int
    hidden_dim: int
    heads: int = 16
    seq_len: int = 1024

    def schema(self, batch: int, vocab: int = 50304, **kwargs) -> ModelSchema:
        kwargs.setdefault("seq_len", self.seq_len)
        return ModelSchema(layers=self.layers, hidden_dim=self.hidden_dim,
                           heads=self.heads, vocab=vocab,
                           batch=batch, **kwargs)


def default_ladder() -> Tuple[LadderRung, ...]:
    """Model-scale ladder used by feasibility sweeps (smallest first)."""
    return (
        LadderRung("0.11B", 12, 768),
        LadderRung("0.7B", 12, 2048),
        LadderRung("1B", 20, 2048),
        LadderRung("2B", 40, 2048),
        LadderRung("4B", 64, 2304),
        LadderRung("6B", 53, 3072),
        LadderRung("8B", 72, 3072),
        LadderRung("10B", 50, 4096),
        LadderRung("12B", 60, 4096),
    )


def ladder_rung(label: str) -> LadderRung:
    for rung in default_ladder():
        if rung.label == label:
            return rung
    raise KeyError("unknown ladder rung %r" % label)
