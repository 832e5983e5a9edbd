"""Schema, memory-budget, and operator-timeline unit tests."""

import random

import pytest

from chunkstar.model import (
    FP16_BYTES,
    FP32_BYTES,
    OP_SLOTS,
    Phase,
    SchemaError,
    activation_bytes_at,
    build_event_timeline,
    build_gpt_schema,
    default_ladder,
    ladder_rung,
    memory_budget_from_param_count,
    model_data_bytes,
    param_tensor_specs,
    peak_activation_bytes,
)

from conftest import small_schema


def test_layer_param_count_is_12_h_squared():
    schema = small_schema(hidden_dim=64)
    assert schema.layer_param_count == 12 * 64 * 64
    assert schema.chunked_param_count == schema.layers * schema.layer_param_count
    assert schema.param_count == (schema.chunked_param_count
                                  + schema.vocab * schema.hidden_dim)


def test_op_slots_cover_a_layer():
    # qkv + attn projection + two MLP mats must sum to 12 H^2
    total = sum(sum(mults) for _, mults in OP_SLOTS)
    assert total == 12


def test_param_tensor_specs_eight_per_layer():
    schema = small_schema(layers=3, hidden_dim=64)
    specs = param_tensor_specs(schema)
    assert len(specs) == 3 * 8
    assert sum(s.numel for s in specs) == schema.chunked_param_count
    # deterministic ids in definition order
    assert [s.tensor_id for s in specs] == list(range(len(specs)))


@pytest.mark.parametrize("bad", [
    dict(layers=0),
    dict(hidden_dim=0),
    dict(heads=0),
    dict(hidden_dim=65),      # not divisible by heads=4
    dict(seq_len=0),
    dict(vocab=0),
    dict(batch=0),
    dict(fragmentation=0.5),
])
def test_schema_validation(bad):
    kwargs = dict(layers=2, hidden_dim=64, heads=4, seq_len=32, vocab=100,
                  batch=2)
    kwargs.update(bad)
    with pytest.raises(SchemaError):
        build_gpt_schema(**kwargs)


def test_budget_components_and_totals():
    m = 1000
    budget = memory_budget_from_param_count(m)
    assert budget.param_fp16_bytes == FP16_BYTES * m
    assert budget.grad_fp16_bytes == FP16_BYTES * m
    assert budget.os_bytes == 3 * FP32_BYTES * m
    assert budget.component_total_bytes == 16 * m
    assert budget.paper_total_bytes == 18 * m


def test_model_data_bytes_on_schema():
    schema = small_schema()
    budget = model_data_bytes(schema)
    assert budget.component_total_bytes == 16 * schema.param_count


def test_timeline_event_order_and_phases():
    schema = small_schema(layers=2)
    tl = build_event_timeline(schema, checkpointing=False)
    phases = [ev.phase for ev in tl.events]
    # embedding fwd, 4 ops x 2 layers fwd, mirrored bwd, embedding bwd, adam
    assert phases[0] is Phase.FWD and tl.events[0].kind.value == "embedding"
    assert phases[-1] is Phase.ADAM
    assert tl.events[-2].kind.value == "embedding" and phases[-2] is Phase.BWD
    assert len(tl.events) == 1 + 4 * 2 + 4 * 2 + 1 + 1
    assert tl.moment_count == 2 * len(tl.events) + 1
    bwd_names = [ev.name for ev in tl.events if ev.phase is Phase.BWD][:-1]
    fwd_names = [ev.name for ev in tl.events if ev.phase is Phase.FWD][1:]
    assert bwd_names == [n.replace(".fwd", ".bwd") for n in reversed(fwd_names)]


def test_timeline_activation_balance():
    """Cumulative activation deltas return to zero after backward."""
    for ckpt in (False, True):
        schema = small_schema(layers=3)
        tl = build_event_timeline(schema, checkpointing=ckpt)
        assert tl.activation_cum[-1] == 0
        assert min(tl.activation_cum) >= 0


def test_checkpointing_lowers_peak():
    schema = small_schema(layers=4, batch=4)
    plain = build_event_timeline(schema, checkpointing=False)
    ckpt = build_event_timeline(schema, checkpointing=True)
    assert peak_activation_bytes(schema, ckpt) < peak_activation_bytes(schema, plain)


def test_checkpointed_bwd_interleaves_refwd():
    schema = small_schema(layers=2)
    tl = build_event_timeline(schema, checkpointing=True)
    kinds = [ev.phase for ev in tl.events]
    assert Phase.RE_FWD in kinds
    # every RE_FWD block precedes its layer's BWD block
    first_refwd = kinds.index(Phase.RE_FWD)
    first_bwd = kinds.index(Phase.BWD)
    assert first_refwd < first_bwd


def test_activation_bytes_at_moments():
    schema = small_schema()
    tl = build_event_timeline(schema, checkpointing=False)
    assert activation_bytes_at(schema, tl, 0, False) == schema.context_bytes
    peak = max(activation_bytes_at(schema, tl, m, False)
               for m in range(tl.moment_count))
    assert peak == peak_activation_bytes(schema, tl)
    with pytest.raises(ValueError):
        activation_bytes_at(schema, tl, tl.moment_count, False)
    with pytest.raises(ValueError):
        activation_bytes_at(schema, tl, 0, True)  # flag must match timeline


def test_activation_curve_rises_then_falls():
    """The non-model tide: maximum at the FWD/BWD boundary region."""
    schema = small_schema(layers=3, batch=4)
    tl = build_event_timeline(schema, checkpointing=False)
    cum = tl.activation_cum
    peak_at = cum.index(max(cum))
    boundary = 2 * (tl.last_fwd_index + 1)
    assert abs(peak_at - boundary) <= 1


def test_fragmentation_scales_activations():
    base = small_schema(batch=4)
    frag = small_schema(batch=4, fragmentation=1.5)
    tl_b = build_event_timeline(base, checkpointing=False)
    tl_f = build_event_timeline(frag, checkpointing=False)
    mid = 2 * (tl_b.last_fwd_index + 1)
    raw_b = activation_bytes_at(base, tl_b, mid, False) - base.context_bytes
    raw_f = activation_bytes_at(frag, tl_f, mid, False) - frag.context_bytes
    assert raw_f == int(round(raw_b * 1.5))


def test_ladder_is_ascending_and_lookup_works():
    ladder = default_ladder()
    counts = [r.schema(batch=1).param_count for r in ladder]
    assert counts == sorted(counts)
    assert ladder_rung("1B").layers == 20
    with pytest.raises(KeyError):
        ladder_rung("3B")


def test_zero_layer_schema_rejected():
    with pytest.raises(SchemaError):
        small_schema(layers=0)


def test_random_schemas_timeline_invariants():
    rng = random.Random(20240817)
    for _ in range(25):
        heads = rng.choice([1, 2, 4])
        schema = small_schema(layers=rng.randint(1, 5),
                              hidden_dim=heads * rng.choice([16, 32]),
                              heads=heads,
                              seq_len=rng.choice([16, 32]),
                              batch=rng.randint(1, 4))
        ckpt = rng.random() < 0.5
        tl = build_event_timeline(schema, checkpointing=ckpt)
        assert tl.checkpointed is ckpt
        assert tl.activation_cum[0] == 0 and tl.activation_cum[-1] == 0
        assert len(tl.activation_cum) == tl.moment_count
        assert all(c >= 0 for c in tl.activation_cum)
        grads = [ev for ev in tl.events if ev.phase is Phase.BWD and ev.tensor_refs]
        # every parameter tensor receives exactly one gradient write
        seen = [t for ev in grads for t in ev.tensor_refs]
        assert sorted(seen) == sorted(set(seen))
