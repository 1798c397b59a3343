"""Speculative decoding with a draft model that cross-attends into the target's KV cache."""

from .bench import (
    ExperimentConfig,
    MetricsRecord,
    acceptance_rate_exact,
    expected_speedup,
    flop_cost_coefficient,
    measure_cost_coefficient,
    run_experiment,
    sweep,
)
from .errors import CapacityError, CheckpointFormatError, ContractError, TrainingDivergedError
from .masks import AttentionMask, PositionMap, block_mask, cape_mask, causal_mask
from .model import (
    GlideConfig,
    GlideDraft,
    KVCache,
    TargetConfig,
    TargetModel,
    glide_forward,
    load_checkpoint,
    save_checkpoint,
    target_forward,
)
from .speculation import SpeculationConfig, expand, linearize, propose
from .verification import decode_session, target_greedy_decode, verify_cape, verify_greedy, verify_sampling

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "CapacityError",
    "CheckpointFormatError",
    "ContractError",
    "ExperimentConfig",
    "GlideConfig",
    "GlideDraft",
    "KVCache",
    "MetricsRecord",
    "PositionMap",
    "SpeculationConfig",
    "TargetConfig",
    "TargetModel",
    "TrainingDivergedError",
    "acceptance_rate_exact",
    "block_mask",
    "cape_mask",
    "causal_mask",
    "decode_session",
    "expand",
    "expected_speedup",
    "flop_cost_coefficient",
    "glide_forward",
    "linearize",
    "load_checkpoint",
    "measure_cost_coefficient",
    "propose",
    "run_experiment",
    "save_checkpoint",
    "sweep",
    "target_forward",
    "target_greedy_decode",
    "verify_cape",
    "verify_greedy",
    "verify_sampling",
]
