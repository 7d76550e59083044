"""Rank-augmented linear attention: numerics, autodiff, backbone, analysis and CLI."""

from .attention import (
    AlphaWeights,
    AttentionConfig,
    KVBuffer,
    build_kv_buffer,
    compute_alpha,
    efficient_attention_baseline,
    linear_attention_vanilla,
    multi_head_attention,
    rala_attention,
    softmax_attention,
)
from .backbone import ModelConfig, count_flops, count_params, init_weights, model_forward, preset
from .estimator import RankAugmentedAttention, RAVLTClassifier
from .linalg import DimensionError, NumericalError, RankReport, numerical_rank, svd

__version__ = "0.1.0"

__all__ = [
    "AlphaWeights",
    "AttentionConfig",
    "DimensionError",
    "KVBuffer",
    "ModelConfig",
    "NumericalError",
    "RAVLTClassifier",
    "RankAugmentedAttention",
    "RankReport",
    "build_kv_buffer",
    "compute_alpha",
    "count_flops",
    "count_params",
    "efficient_attention_baseline",
    "init_weights",
    "linear_attention_vanilla",
    "model_forward",
    "multi_head_attention",
    "numerical_rank",
    "preset",
    "rala_attention",
    "softmax_attention",
    "svd",
]
