"""Event engine: iteration mechanics, sampling, and failure reporting."""

import pytest

from chunkstar.engine import EMBEDDING_LEDGER_ID
from chunkstar.fsm import TensorState
from chunkstar.memory import EvictionStrategy
from chunkstar.model import CPU, GPU, activation_bytes_at

from conftest import SmallSim, small_schema


def test_warmup_then_measured_runs_feasible(sim):
    warm = sim.warmup()
    assert warm.warmup and warm.feasible
    assert sim.engine.plan is not None
    plan = sim.engine.plan
    first = sim.measured(1)
    second = sim.measured(2)
    assert first.feasible and second.feasible
    assert sim.engine.plan is plan  # measured iterations reuse the plan
    assert sim.manager.strategy is EvictionStrategy.LATEST_NEXT_USE


def test_warmup_switches_to_list_order_eviction(sim):
    assert sim.manager.strategy is EvictionStrategy.LATEST_NEXT_USE
    sim.warmup()
    assert sim.manager.strategy is EvictionStrategy.LIST_ORDER
    sim.measured(1)
    assert sim.manager.strategy is EvictionStrategy.LATEST_NEXT_USE


def test_sample_grid_covers_every_moment(sim):
    sim.warmup()
    report = sim.measured(1)
    moments = sim.timeline.moment_count
    assert moments == 2 * len(sim.timeline.events) + 1
    assert len(report.samples) == 2 * moments  # one sample per pool per moment
    gpu_moments = [s.moment for s in report.samples if s.device == GPU]
    assert gpu_moments == sorted(gpu_moments) == list(range(moments))


def test_non_model_matches_curve_at_boundaries(sim):
    sim.warmup()
    report = sim.measured(1)
    for s in report.samples:
        if s.device != GPU:
            continue
        curve = activation_bytes_at(sim.schema, sim.timeline, s.moment, False)
        if s.moment % 2 == 0:
            # boundary moments: transient staging released, curve exact
            assert s.non_model_bytes == curve
        else:
            assert s.non_model_bytes >= curve


def test_transfer_ledger_balances(sim):
    sim.warmup()
    report = sim.measured(1)
    moved = sum(t.bytes for t in report.transfers)
    assert report.pcie_bytes == report.cpu_to_gpu_bytes + report.gpu_to_cpu_bytes
    assert report.pcie_bytes == moved
    peak_used = max(s.used_bytes for s in report.samples if s.device == GPU)
    assert report.peak_gpu_bytes >= peak_used


def test_gpu_oom_becomes_infeasible_report():
    s = SmallSim(gpu_bytes=150_000)  # smaller than the activation peak
    report = s.warmup()
    assert not report.feasible
    assert report.failure_reason == "GPU_OOM"
    assert isinstance(report.failure_moment, int)
    assert 0 <= report.failure_moment < s.timeline.moment_count


def test_measured_iteration_requires_plan():
    s = SmallSim()
    with pytest.raises(ValueError):
        s.engine.run_iteration(1, warmup=False)


def test_embedding_on_cpu_ships_activations():
    s = SmallSim(schema=small_schema(vocab=200))  # weights > activation trip
    assert s.engine.embedding_device == CPU
    s.warmup()
    report = s.measured(1)
    emb = [t for t in report.transfers if t.chunk_id == EMBEDDING_LEDGER_ID]
    fwd_delta = s.timeline.events[0].activation_delta_bytes
    assert [(t.src, t.dst, t.bytes) for t in emb] == [
        (CPU, GPU, fwd_delta),   # forward output crosses to the GPU
        (GPU, CPU, fwd_delta),   # its gradient comes back
    ]


def test_embedding_on_gpu_ships_weights():
    s = SmallSim(schema=small_schema(vocab=100))  # cheap enough to move
    assert s.engine.embedding_device == GPU
    s.warmup()
    report = s.measured(1)
    emb = [t for t in report.transfers if t.chunk_id == EMBEDDING_LEDGER_ID]
    weights = s.chunk_set.embedding.fp16_bytes
    assert [(t.src, t.dst, t.bytes) for t in emb] == [
        (CPU, GPU, weights),
        (GPU, CPU, weights),
    ]
    assert s.pools[GPU].temp_bytes == 0  # transient weight block released


def test_cpu_side_optimizer_copies_params_both_ways():
    s = SmallSim(gpu_bytes=400_000)  # margin too small for any fp32 triplet
    assert s.warmup().feasible
    assert s.engine.plan.os_positions_on_gpu == ()
    report = s.measured(1)
    copies = [t for t in report.transfers if t.reason == "adam_copy"]
    assert any(t.src == GPU and t.dst == CPU for t in copies)
    assert any(t.src == CPU and t.dst == GPU for t in copies)
    for pos in range(s.chunk_set.positions):
        assert s.chunk_set.param_chunk(pos).is_resident_on(GPU)


def test_measured_iterations_are_steady_state(sim):
    sim.warmup()
    first = sim.measured(1)
    second = sim.measured(2)
    assert first.pcie_bytes == second.pcie_bytes
    assert len(first.transfers) == len(second.transfers)
    curve1 = [(s.moment, s.used_bytes) for s in first.samples if s.device == GPU]
    curve2 = [(s.moment, s.used_bytes) for s in second.samples if s.device == GPU]
    assert curve1 == curve2


def test_tensor_states_settle_after_iteration(sim):
    sim.warmup()
    sim.measured(1)
    for pos in range(sim.chunk_set.positions):
        for t in sim.chunk_set.param_chunk(pos).tensors:
            assert t.state is TensorState.HOLD
        for chunk in sim.chunk_set.os_triplet(pos):
            for t in chunk.tensors:
                assert t.state is TensorState.HOLD


def test_trace_hook_fires_once_per_moment(sim):
    records = []
    sim.engine.trace_fn = records.append
    sim.warmup()
    assert len(records) == sim.timeline.moment_count
    assert [r["moment"] for r in records] == list(range(sim.timeline.moment_count))
    assert all("device_usage" in r and GPU in r["device_usage"] for r in records)
