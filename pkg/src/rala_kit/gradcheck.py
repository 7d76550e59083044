"""Finite-difference checks for every registered op and the composite attention paths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, multi_head_attention, rala_attention
from . import attention as attn
from .backbone import ModelConfig, block_forward, param_shapes
from .linalg import rng


@dataclass(frozen=True)
class GradCase:
    name: str
    expr: Callable
    make_leaves: Callable[[np.random.Generator], list[np.ndarray]]


def _normal(*shapes):
    return lambda g: [g.standard_normal(s) for s in shapes]


def _positive_den(g):
    return [g.standard_normal((3, 4)), 1.5 + np.abs(g.standard_normal((3, 1)))]


_LABELS = np.array([0, 3, 1])
_RALA_CFG = AttentionConfig(variant="rala", head_dim=4)
_MHA_CFG = AttentionConfig(variant="rala", heads=2, head_dim=2)
_BLOCK_CFG = ModelConfig(stage_blocks=(1, 1, 1, 1), stage_channels=(4, 4, 4, 4), stage_heads=(2, 2, 2, 2),
                         num_classes=2, input_resolution=32)
_BLOCK_NAMES = [n[len("stages.0.blocks.0."):] for n in param_shapes(_BLOCK_CFG) if n.startswith("stages.0.blocks.0.")]
_BLOCK_SHAPES = [param_shapes(_BLOCK_CFG)["stages.0.blocks.0." + n] for n in _BLOCK_NAMES]
_MHA_NAMES = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_phi", "b_phi", "w_out", "b_out"]


def _block_leaves(g):
    x = g.standard_normal((64, 4))
    params = []
    for name, shape in zip(_BLOCK_NAMES, _BLOCK_SHAPES):
        scale = 0.5 if name.endswith(("weight", "w1", "w2")) or ".w_" in name else 0.2
        base = 1.0 if name.endswith("gamma") else 0.0
        params.append(base + scale * g.standard_normal(shape))
    return [x] + params


def _block_expr(x, *params):
    weights = dict(zip(_BLOCK_NAMES, params))
    return block_forward(x, 8, 8, _BLOCK_CFG, 0, weights)


def _mha_leaves(g):
    x = g.standard_normal((4, 4))
    params = [g.standard_normal((4, 4)) * 0.5 if n.startswith("w_") else g.standard_normal((1, 4)) * 0.2
              for n in _MHA_NAMES]
    return [x] + params


def _mha_expr(x, *params):
    return multi_head_attention(x, _MHA_CFG, dict(zip(_MHA_NAMES, params)))


CASES: dict[str, GradCase] = {
    c.name: c
    for c in [
        GradCase("matmul", ad.matmul, _normal((3, 4), (4, 3))),
        GradCase("hadamard", ad.hadamard, _normal((3, 4), (3, 4))),
        GradCase("add", ad.add, _normal((3, 4), (1, 4))),
        GradCase("divide", ad.divide, _positive_den),
        GradCase("scale", lambda a: ad.scale(a, 0.7), _normal((3, 4))),
        GradCase("transpose", ad.transpose, _normal((3, 4))),
        GradCase("softmax_rows", ad.softmax_rows, _normal((3, 4))),
        GradCase("kernel_elu1", ad.kernel_elu1, _normal((3, 4))),
        GradCase("relu", ad.relu, _normal((3, 4))),
        GradCase("tanh", ad.tanh, _normal((3, 4))),
        GradCase("gelu", ad.gelu, _normal((3, 4))),
        GradCase("mean_rows", ad.mean_rows, _normal((3, 4))),
        GradCase("sum_rows", ad.sum_rows, _normal((3, 4))),
        GradCase("layer_norm", ad.layer_norm, _normal((3, 4), (1, 4), (1, 4))),
        GradCase("depthwise_conv3x3", lambda x, w: ad.depthwise_conv3x3(x, w, 4, 4), _normal((16, 3), (3, 3, 3))),
        GradCase("conv3x3_s2", lambda x, w: ad.conv3x3_s2(x, w, 4, 4), _normal((16, 2), (3, 3, 2, 3))),
        GradCase("split_heads", lambda x: ad.split_heads(x, 2), _normal((3, 4))),
        GradCase("merge_heads", ad.merge_heads, _normal((2, 3, 2))),
        GradCase("reshape", lambda x: ad.reshape(x, (4, 3)), _normal((3, 4))),
        GradCase("cross_entropy", lambda z: ad.cross_entropy(z, _LABELS), _normal((3, 4))),
        GradCase("softmax_attention", attn.softmax_attention, _normal((3, 4), (3, 4), (3, 4))),
        GradCase("linear_attention_vanilla", attn.linear_attention_vanilla, _normal((3, 4), (3, 4), (3, 4))),
        GradCase("efficient_attention", attn.efficient_attention_baseline, _normal((3, 4), (3, 4), (3, 4))),
        GradCase(
            "rala_attention",
            lambda x, q, k, v, w, b: rala_attention(x, q, k, v, _RALA_CFG, {"weight": w, "bias": b}),
            _normal((3, 4), (3, 4), (3, 4), (3, 4), (4, 4), (1, 4)),
        ),
        GradCase("multi_head_attention", _mha_expr, _mha_leaves),
        GradCase("rala_block", _block_expr, _block_leaves),
    ]
}

PRIMITIVE_OPS = [name for name in CASES if name in ad.OPS]


def check_op(name: str, trials: int = 20, h: float = 1e-5, seed: int = 0) -> ad.GradCheckReport:
    """Worst relative error of ``name`` over ``trials`` seeded draws."""
    case = CASES[name]
    worst = None
    for trial in range(trials):
        leaves = case.make_leaves(rng(seed, f"gradcheck.{name}.{trial}"))
        rep = ad.finite_diff_check(case.expr, leaves, h=h, seed=seed + trial, name=name)
        if worst is None or rep.max_rel_error > worst.max_rel_error:
            worst = rep
    return worst


def run_gradcheck(ops="all", trials: int = 20, h: float = 1e-5, seed: int = 0) -> list[ad.GradCheckReport]:
    names = list(CASES) if ops == "all" else ([ops] if isinstance(ops, str) else list(ops))
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"no gradient check registered for {unknown}; known: {sorted(CASES)}")
    return [check_op(n, trials, h, seed) for n in names]
