"""A desk-scale vision backbone with self-guided token reallocation.

Pure numpy/scipy: a taped reverse-mode autodiff engine, hybrid-scale window
attention with attention-derived significance maps, importance-guided K/V
token reallocation, a four-stage pyramid classifier with a variant registry
and cost audit, and a deterministic training harness with bit-exact binary
serialization.
"""

from .attention import (AttentionGroupSpec, GlobalAttention, HybridScaleAttention,
                        merge_tokens, multi_head_attention, scaled_window_attention,
                        significance_accumulate, window_partition, window_reverse)
from .data import Dataset, gen_salient_dataset
from .errors import ConfigurationError, ContractError, DimensionError
from .gradcheck import finite_diff_check, max_rel_error
from .model import (Model, ModelConfig, StageConfig, VARIANTS, build_variant,
                    count_flops, count_params)
from .reallocation import (AggregationParams, GUIDANCE_SOURCES, ReallocationPlan,
                           SelfGuidedAttention, aggregate_group, iam, make_guidance,
                           rank_and_group)
from .rng import named_rng, pack_state, sample_rng, unpack_state
from .serial import (Checkpoint, FormatError, MagicError, TruncatedError, VersionError,
                     load_checkpoint, load_dataset, save_checkpoint, save_dataset,
                     write_pgm)
from .tensor import Tensor, backward, mac_counter, no_grad
from .training import (AdamW, TrainConfig, cosine_lr, cross_entropy, evaluate,
                       model_from_checkpoint, snapshot, train)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AggregationParams", "AttentionGroupSpec", "Checkpoint",
    "ConfigurationError", "ContractError", "Dataset", "DimensionError",
    "FormatError", "GUIDANCE_SOURCES", "GlobalAttention", "HybridScaleAttention",
    "MagicError", "Model", "ModelConfig", "ReallocationPlan", "SelfGuidedAttention",
    "StageConfig", "Tensor", "TrainConfig", "TruncatedError", "VARIANTS",
    "VersionError", "aggregate_group", "backward", "build_variant", "cosine_lr",
    "count_flops", "count_params", "cross_entropy", "evaluate", "finite_diff_check",
    "gen_salient_dataset", "iam", "load_checkpoint", "load_dataset", "mac_counter",
    "make_guidance", "max_rel_error", "merge_tokens", "model_from_checkpoint",
    "multi_head_attention", "named_rng", "no_grad", "pack_state", "rank_and_group",
    "sample_rng", "save_checkpoint", "save_dataset", "scaled_window_attention",
    "significance_accumulate", "snapshot", "train", "unpack_state",
    "window_partition", "window_reverse", "write_pgm",
]
