"""Warm-up statistics, placement planning, and their analytic twins."""

import random

import pytest

from chunkstar.chunks import build_chunk_lists_from_sizes
from chunkstar.memory import DevicePool
from chunkstar.model import CPU, GPU
from chunkstar.profiler import (
    MomentSample,
    ProfileError,
    WarmupStats,
    analytic_placement_plan,
    analytic_working_set,
    chunkable_memory,
    compute_placement_plan,
    embedding_compute_device,
)

from conftest import SmallSim, small_schema


def make_stats(peak_nm: int, working_set: int) -> WarmupStats:
    stats = WarmupStats(working_set_bytes=working_set)
    stats.samples = [
        MomentSample(0, GPU, peak_nm // 2, 0, peak_nm // 2),
        MomentSample(1, GPU, peak_nm, 0, peak_nm),
        MomentSample(0, CPU, 10, 10, 0),
    ]
    return stats


def test_moment_sample_accounting_guard():
    MomentSample(3, GPU, used_bytes=100, chunk_bytes=60, non_model_bytes=40)
    with pytest.raises(AssertionError):
        MomentSample(3, GPU, used_bytes=50, chunk_bytes=60, non_model_bytes=40)
    with pytest.raises(AssertionError):
        MomentSample(3, GPU, used_bytes=100, chunk_bytes=60, non_model_bytes=-1)


def test_warmup_stats_peaks_and_curves():
    stats = make_stats(peak_nm=800, working_set=0)
    assert stats.peak_non_model(GPU) == 800
    assert stats.peak_non_model(CPU) == 0
    assert stats.non_model_curve(GPU) == [(0, 400), (1, 800)]
    assert WarmupStats().peak_non_model(GPU) == 0


def test_chunkable_memory_and_profile_error():
    pool = DevicePool(GPU, 1000)
    samples = [MomentSample(5, GPU, 300, 0, 300)]
    assert chunkable_memory(pool, 5, samples) == 700
    with pytest.raises(ProfileError):
        chunkable_memory(pool, 6, samples)
    assert issubclass(ProfileError, KeyError)


@pytest.mark.parametrize("vocab,expected", [
    (100, GPU),   # weights cheaper than re-shipping activations
    (128, GPU),   # tie goes to the GPU
    (129, CPU),   # weights outweigh one activation round trip
])
def test_embedding_compute_device_threshold(vocab, expected):
    schema = small_schema(vocab=vocab)  # batch=2, seq_len=32: 2*B*S == 128
    assert embedding_compute_device(schema) == expected


def test_auto_placement_packs_lowest_positions_first():
    cs = build_chunk_lists_from_sizes([100] * 4, capacity_elems=100)
    triplet = cs.os_triplet_bytes  # 3 fp32 chunks: 1200 bytes
    assert triplet == 1200
    # margin = 10_000 - 5000 - 2200 = 2800 -> room for 2 triplets
    stats = make_stats(peak_nm=5000, working_set=2200)
    plan = compute_placement_plan(stats, cs, gpu_capacity_bytes=10_000,
                                  schema=None)
    assert plan.gpu_margin_bytes == 2800
    assert plan.os_positions_on_gpu == (0, 1)
    assert plan.os_chunks_on_gpu == 6
    assert plan.device_of_position(0) == GPU
    assert plan.device_of_position(2) == CPU


def test_placement_respects_local_positions_subset():
    cs = build_chunk_lists_from_sizes([100] * 4, capacity_elems=100)
    stats = make_stats(peak_nm=5000, working_set=2200)  # fits 2 triplets
    plan = compute_placement_plan(stats, cs, gpu_capacity_bytes=10_000,
                                  schema=None, local_positions=[3, 1])
    assert plan.os_positions_on_gpu == (1, 3)  # sorted, and only local ones


def test_placement_overrides_and_margin_clamp():
    cs = build_chunk_lists_from_sizes([100] * 4, capacity_elems=100)
    stats = make_stats(peak_nm=5000, working_set=2200)
    cpu_plan = compute_placement_plan(stats, cs, 10_000, None,
                                      os_placement="cpu")
    assert cpu_plan.os_positions_on_gpu == ()
    gpu_plan = compute_placement_plan(stats, cs, 10_000, None,
                                      os_placement="gpu")
    assert gpu_plan.os_positions_on_gpu == (0, 1, 2, 3)
    with pytest.raises(ValueError):
        compute_placement_plan(stats, cs, 10_000, None, os_placement="maybe")
    # oversubscribed device: margin clamps to zero, nothing packed
    tight = compute_placement_plan(make_stats(9000, 2000), cs, 10_000, None)
    assert tight.gpu_margin_bytes == 0
    assert tight.os_positions_on_gpu == ()


@pytest.mark.parametrize("nproc", [1, 2])
@pytest.mark.parametrize("checkpointing", [False, True])
def test_analytic_plan_matches_warmup(nproc, checkpointing):
    s = SmallSim(nproc=nproc, checkpointing=checkpointing)
    report = s.warmup()
    assert report.feasible
    expected = s.engine.plan
    derived = analytic_placement_plan(s.schema, s.timeline, s.chunk_set,
                                      s.pools[GPU].capacity_bytes,
                                      partition=s.partition, rank=0)
    assert derived == expected


@pytest.mark.parametrize("nproc", [1, 2])
def test_analytic_working_set_matches_measured(nproc):
    s = SmallSim(nproc=nproc)
    s.warmup()
    measured = s.engine.warmup_stats.working_set_bytes
    derived = analytic_working_set(s.chunk_set, s.timeline, s.partition, rank=0)
    assert derived == measured


def test_analytic_working_set_random_schemas():
    rng = random.Random(7)
    for _ in range(8):
        schema = small_schema(layers=rng.randint(1, 3),
                              hidden_dim=rng.choice([32, 64]),
                              heads=rng.choice([2, 4]),
                              batch=rng.randint(1, 3))
        s = SmallSim(schema=schema, capacity_elems=rng.choice([15000, 30000]))
        s.warmup()
        assert (analytic_working_set(s.chunk_set, s.timeline, s.partition, 0)
                == s.engine.warmup_stats.working_set_bytes)
