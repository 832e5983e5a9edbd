"""chunkstar: deterministic simulator for chunk-based CPU/GPU memory
management of large-model training.

The library models parameter/gradient/optimizer payloads as fixed-size
chunks moved between host and device memory by a warm-up-profiled,
greedily evicting manager, optionally sharded ZeRO-style across
processes, and compares the result against static offloading, plain
data parallelism, and layer-streaming baselines.
"""

from .baselines import (
    CHUNK,
    DDP,
    L2L,
    STATIC_OFFLOAD,
    BaselineVerdict,
    FailureReason,
    max_feasible_scale,
    simulate_ddp,
    simulate_l2l,
    simulate_static_offload,
)
from .chunks import (
    DEFAULT_CAPACITY_ELEMS,
    Chunk,
    ChunkKind,
    ChunkSet,
    Movability,
    PackingError,
    TensorTooLargeError,
    build_model_chunk_lists,
    map_tensors_to_chunks,
)
from .config import (
    ConfigError,
    HardwareSpec,
    PolicySpec,
    ScenarioConfig,
    SweepSpec,
    load_config,
    parse_config,
)
from .engine import Engine, IterationReport
from .fsm import PINNING_STATES, TensorState, TransitionError, Trigger, next_state
from .memory import (
    DevicePool,
    EvictionStrategy,
    MemoryManager,
    OOMError,
    TransferEvent,
    oracle_min_transfers,
    simulate_cache_fetches,
)
from .model import (
    CPU,
    GPU,
    LadderRung,
    MemoryBudget,
    ModelSchema,
    Phase,
    Timeline,
    build_event_timeline,
    build_gpt_schema,
    default_ladder,
    ladder_rung,
    memory_budget_from_param_count,
    model_data_bytes,
)
from .parallel import (
    CollectiveScheme,
    DpPartition,
    DpRuntime,
    closed_form_volume,
    partition_chunks,
)
from .profiler import (
    MomentSample,
    PlacementPlan,
    WarmupStats,
    analytic_placement_plan,
    analytic_working_set,
    compute_placement_plan,
    embedding_compute_device,
    engine_peak_non_model,
)
from .scenario import (
    ChunkRunResult,
    ScenarioResult,
    Simulator,
    SweepResult,
    TimeEstimate,
    run_scenario,
    sweep_max_scale,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineVerdict", "CHUNK", "CPU", "Chunk", "ChunkKind", "ChunkRunResult",
    "ChunkSet", "CollectiveScheme", "ConfigError", "DDP",
    "DEFAULT_CAPACITY_ELEMS", "DevicePool", "DpPartition", "DpRuntime",
    "Engine", "EvictionStrategy", "FailureReason", "GPU", "HardwareSpec",
    "IterationReport", "L2L", "LadderRung", "MemoryBudget", "MemoryManager",
    "ModelSchema", "MomentSample", "Movability", "OOMError", "PINNING_STATES",
    "PackingError", "Phase", "PlacementPlan", "PolicySpec", "STATIC_OFFLOAD",
    "ScenarioConfig", "ScenarioResult", "Simulator", "SweepResult",
    "SweepSpec", "TensorState", "TensorTooLargeError", "TimeEstimate",
    "Timeline", "TransferEvent", "TransitionError", "Trigger", "WarmupStats",
    "analytic_placement_plan", "analytic_working_set", "build_event_timeline",
    "build_gpt_schema", "build_model_chunk_lists", "closed_form_volume",
    "compute_placement_plan", "default_ladder", "embedding_compute_device",
    "engine_peak_non_model",
    "ladder_rung", "load_config", "map_tensors_to_chunks",
    "max_feasible_scale", "memory_budget_from_param_count",
    "model_data_bytes", "next_state", "oracle_min_transfers",
    "parse_config", "partition_chunks", "run_scenario",
    "simulate_cache_fetches", "simulate_ddp", "simulate_l2l",
    "simulate_static_offload", "sweep_max_scale",
]
