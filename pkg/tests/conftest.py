"""Shared fixtures: small schemas and fully wired simulators.

Everything here is sized to run in milliseconds; scale-realistic
configurations live only in the acceptance tests.
"""

from typing import Optional

import pytest

from chunkstar.chunks import ChunkSet, build_model_chunk_lists
from chunkstar.engine import Engine
from chunkstar.memory import DevicePool, EvictionStrategy, MemoryManager
from chunkstar.model import CPU, GPU, ModelSchema, build_event_timeline, build_gpt_schema
from chunkstar.parallel import DpRuntime, partition_chunks
from chunkstar.profiler import compute_placement_plan, embedding_compute_device


def small_schema(layers: int = 2, hidden_dim: int = 64, heads: int = 4,
                 seq_len: int = 32, vocab: int = 100, batch: int = 2,
                 context_bytes: int = 1000, **kwargs) -> ModelSchema:
    return build_gpt_schema(layers=layers, hidden_dim=hidden_dim, heads=heads,
                            seq_len=seq_len, vocab=vocab, batch=batch,
                            context_bytes=context_bytes, **kwargs)


class SmallSim:
    """Hand-wired simulator over a small schema for unit tests."""

    def __init__(self, schema: Optional[ModelSchema] = None,
                 capacity_elems: int = 20000,
                 gpu_bytes: int = 10**9, cpu_bytes: int = 10**9,
                 nproc: int = 1, checkpointing: bool = False,
                 strategy: EvictionStrategy = EvictionStrategy.LATEST_NEXT_USE,
                 limit_fraction: float = 0.8,
                 os_placement: str = "auto"):
        self.schema = schema or small_schema()
        self.timeline = build_event_timeline(self.schema, checkpointing=checkpointing)
        self.chunk_set: ChunkSet = build_model_chunk_lists(
            self.schema, capacity_elems=capacity_elems)
        self.partition = partition_chunks(self.chunk_set, nproc)
        self.local = self.partition.local_positions(0)
        self.chunk_set.init_on_cpu(self.local)
        self.pools = {GPU: DevicePool(GPU, gpu_bytes),
                      CPU: DevicePool(CPU, cpu_bytes)}
        self.manager = MemoryManager(self.pools, strategy)
        self.manager.register_chunks(self.chunk_set.chunks.values())
        self.manager.add_extra_model_bytes(CPU, self.chunk_set.embedding.fp16_bytes)
        self.dp = DpRuntime(self.chunk_set, self.partition, self.manager)
        self.engine = Engine(self.chunk_set, self.timeline, self.manager,
                             schema=self.schema, dp=self.dp,
                             limit_fraction=limit_fraction)
        self.engine.embedding_device = embedding_compute_device(self.schema)
        self._os_placement = os_placement

    def plan_builder(self):
        gpu_cap = self.pools[GPU].capacity_bytes

        def build(stats):
            return compute_placement_plan(stats, self.chunk_set, gpu_cap,
                                          self.schema, self.local,
                                          os_placement=self._os_placement)
        return build

    def warmup(self):
        return self.engine.run_iteration(0, warmup=True,
                                         plan_builder=self.plan_builder())

    def measured(self, iteration: int):
        return self.engine.run_iteration(iteration, warmup=False)


@pytest.fixture
def sim() -> SmallSim:
    return SmallSim()
