"""Softmax, linear and rank-augmented linear attention.

All functions take token matrices of shape ``(..., N, d)`` and are written
against the :mod:`rala_kit.autodiff` op set, so they run on plain arrays or
record onto a tape when handed :class:`~rala_kit.autodiff.Node` inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .linalg import DimensionError, NumericalError

VARIANTS = ("softmax", "linear_vanilla", "efficient", "rala")
KERNELS = ("elu1", "relu", "softmax_rows")
PHIS = ("linear_projection", "identity", "tanh")


@dataclass(frozen=True)
class AttentionConfig:
    variant: str = "rala"
    heads: int = 1
    head_dim: int = 64
    kernel: str = "elu1"
    phi: str = "linear_projection"
    kv_augment: bool = True
    out_augment: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.phi not in PHIS:
            raise ValueError(f"unknown phi {self.phi!r}; expected one of {PHIS}")
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AlphaWeights:
    """Per-token KV-buffer weights; positive and summing to the token count."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("alpha weights must be strictly positive")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class KVBuffer:
    buffer: np.ndarray  # (d, d)
    key_sum: np.ndarray  # (1, d)


def apply_kernel(x, kernel: str):
    if kernel == "elu1":
        return ad.kernel_elu1(x)
    if kernel == "relu":
        return ad.relu(x)
    if kernel == "softmax_rows":
        return ad.softmax_rows(x)
    raise ValueError(f"unknown kernel {kernel!r}")


def _check_tokens(*mats):
    shapes = [ad.value_of(m).shape for m in mats]
    ref = shapes[0]
    for s in shapes[1:]:
        if s[-2] != ref[-2]:
            raise DimensionError(f"token counts differ: {shapes}")
    return ref


def _check_qkv(q, k, v):
    _check_tokens(q, k, v)
    qs, ks = ad.value_of(q).shape, ad.value_of(k).shape
    if qs[-1] != ks[-1]:
        raise DimensionError(f"query width {qs[-1]} != key width {ks[-1]}")


def softmax_attention(q, k, v):
    """``softmax(Q K^T / sqrt(d)) V``."""
    _check_qkv(q, k, v)
    d = ad.value_of(q).shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    return ad.matmul(ad.softmax_rows(scores), v)


def softmax_attention_weights(q, k):
    d = ad.value_of(q).shape[-1]
    return ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)))


def _weighted_buffer(kk, v, weights):
    """KV buffer and key sum; ``weights`` is an ``(..., N, 1)`` column or None."""
    n = ad.value_of(kk).shape[-2]
    if weights is None:
        weights = np.ones(ad.value_of(kk).shape[:-2] + (n, 1))
    buffer = ad.matmul(ad.transpose(kk), ad.hadamard(weights, v))
    key_sum = ad.matmul(ad.transpose(weights), kk)
    return buffer, key_sum


def _linear_core(kq, kk, v, weights, normalize: bool):
    buffer, key_sum = _weighted_buffer(kk, v, weights)
    num = ad.matmul(kq, buffer)
    if not normalize:
        return num, buffer
    den = ad.matmul(kq, ad.transpose(key_sum))
    if np.any(ad.value_of(den) == 0):
        raise NumericalError("linear attention: zero normalizer (kernel produced an all-zero row)")
    return ad.divide(num, den), buffer


def linear_attention_vanilla(q, k, v, kernel: str = "elu1", normalize: bool = True):
    """``kappa(Q) (kappa(K)^T V)``, optionally divided by ``kappa(Q) sum_m kappa(K_m)^T``."""
    _check_qkv(q, k, v)
    out, _ = _linear_core(apply_kernel(q, kernel), apply_kernel(k, kernel), v, None, normalize)
    return out


def linear_attention_quadratic(q, k, v, kernel: str = "elu1", normalize: bool = True):
    """Same quantity evaluated as ``(kappa(Q) kappa(K)^T) V``; O(N^2 d)."""
    _check_qkv(q, k, v)
    kq, kk = apply_kernel(q, kernel), apply_kernel(k, kernel)
    sim = ad.matmul(kq, ad.transpose(kk))
    num = ad.matmul(sim, v)
    if not normalize:
        return num
    den = ad.matmul(sim, np.ones(ad.value_of(sim).shape[:-1] + (1,)))
    return ad.divide(num, den)


def efficient_attention_baseline(q, k, v):
    """Row-softmaxed Q times (column-softmaxed K)^T V."""
    _check_qkv(q, k, v)
    rho_q = ad.softmax_rows(q)
    rho_k = ad.transpose(ad.softmax_rows(ad.transpose(k)))
    return ad.matmul(rho_q, ad.matmul(ad.transpose(rho_k), v))


def alpha_column(q, k, kernel: str = "elu1"):
    """Alpha weights as an ``(..., N, 1)`` column (tape-friendly form)."""
    _check_qkv(q, k, k)
    n = ad.value_of(k).shape[-2]
    q_global = ad.mean_rows(q)
    scores = ad.matmul(q_global, ad.transpose(apply_kernel(k, kernel)))
    return ad.transpose(ad.scale(ad.softmax_rows(scores), float(n)))


def compute_alpha(q, k, kernel: str = "elu1") -> AlphaWeights:
    """Weights from the mean query's softmax attention over the keys, scaled to sum to N."""
    col = alpha_column(np.asarray(q, dtype=np.float64), np.asarray(k, dtype=np.float64), kernel)
    return AlphaWeights(col[..., 0])


def build_kv_buffer(k, v, alpha: AlphaWeights | None, kernel: str = "elu1") -> KVBuffer:
    k, v = np.asarray(k, dtype=np.float64), np.asarray(v, dtype=np.float64)
    _check_tokens(k, v)
    weights = None
    if alpha is not None:
        if alpha.n != k.shape[-2]:
            raise DimensionError(f"alpha has {alpha.n} weights for {k.shape[-2]} tokens")
        weights = alpha.values[..., None]
    buffer, key_sum = _weighted_buffer(apply_kernel(k, kernel), v, weights)
    return KVBuffer(buffer, key_sum)


def phi_transform(x, phi: str, params: Mapping | None = None):
    if phi == "identity":
        return x
    if phi == "tanh":
        return ad.tanh(x)
    if phi == "linear_projection":
        if params is None or "weight" not in params:
            raise ValueError("phi=linear_projection needs phi_params with 'weight' (and optional 'bias')")
        out = ad.matmul(x, params["weight"])
        if params.get("bias") is not None:
            out = ad.add(out, params["bias"])
        return out
    raise ValueError(f"unknown phi {phi!r}")


def rala_attention(x, q, k, v, config: AttentionConfig, phi_params: Mapping | None = None, capture=None):
    """Rank-augmented linear attention for one head.

    ``Y_i = phi(X_i) * (kappa(Q_i) B)`` with ``B`` the alpha-weighted KV buffer;
    rows are divided by ``kappa(Q_i) key_sum^T`` when ``config.normalize``.
    ``capture``, if a dict, receives the intermediate matrices.
    """
    _check_qkv(q, k, v)
    if config.out_augment:
        _check_tokens(x, q)
    kq, kk = apply_kernel(q, config.kernel), apply_kernel(k, config.kernel)
    weights = alpha_column(q, k, config.kernel) if config.kv_augment else None
    pre, buffer = _linear_core(kq, kk, v, weights, config.normalize)
    out = pre
    if config.out_augment:
        out = ad.hadamard(phi_transform(x, config.phi, phi_params), pre)
    if capture is not None:
        capture.update(kernel_q=ad.value_of(kq), kv_buffer=ad.value_of(buffer),
                       pre_modulation=ad.value_of(pre), output=ad.value_of(out))
        if weights is not None:
            capture["alpha"] = ad.value_of(weights)[..., 0]
    return out


def attention_core(x, q, k, v, config: AttentionConfig, phi_params=None, capture=None):
    """Dispatch on ``config.variant``."""
    if config.variant == "softmax":
        return softmax_attention(q, k, v)
    if config.variant == "efficient":
        return efficient_attention_baseline(q, k, v)
    if config.variant == "linear_vanilla":
        kq, kk = apply_kernel(q, config.kernel), apply_kernel(k, config.kernel)
        out, buffer = _linear_core(kq, kk, v, None, config.normalize)
        if capture is not None:
            capture.update(kernel_q=ad.value_of(kq), kv_buffer=ad.value_of(buffer),
                           pre_modulation=ad.value_of(out), output=ad.value_of(out))
        return out
    return rala_attention(x, q, k, v, config, phi_params, capture)


def mha_param_names(config: AttentionConfig) -> list[str]:
    names = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v"]
    if config.variant == "rala" and config.out_augment and config.phi == "linear_projection":
        names += ["w_phi", "b_phi"]
    return names + ["w_out", "b_out"]


def init_mha_weights(config: AttentionConfig, gen: np.random.Generator, std: float = 0.02) -> dict:
    c = config.width
    weights = {}
    for name in mha_param_names(config):
        if name.startswith("w_"):
            weights[name] = truncated_normal(gen, (c, c), std)
        else:
            weights[name] = np.zeros((1, c))
    return weights


def truncated_normal(gen: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled outside +-2 std."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def multi_head_attention(x, config: AttentionConfig, weights: Mapping, capture=None):
    """Project, split channels into heads, attend per head, merge, project out.

    ``x`` is ``(..., N, C)`` with ``C = heads * head_dim``.  Each head computes
    its own alpha weights from its own query/key slices.
    """
    c = ad.value_of(x).shape[-1]
    if c % config.heads:
        raise DimensionError(f"{c} channels are not divisible by {config.heads} heads")
    if c != config.width:
        raise DimensionError(f"input width {c} != heads*head_dim = {config.width}")
    q = ad.split_heads(_linear(x, weights["w_q"], weights["b_q"]), config.heads)
    k = ad.split_heads(_linear(x, weights["w_k"], weights["b_k"]), config.heads)
    v = ad.split_heads(_linear(x, weights["w_v"], weights["b_v"]), config.heads)
    phi_in, phi_params = x, None
    if config.variant == "rala" and config.out_augment:
        if config.phi == "linear_projection":
            phi_in = _linear(x, weights["w_phi"], weights["b_phi"])
        elif config.phi == "tanh":
            phi_in = ad.tanh(x)
        phi_in = ad.split_heads(phi_in, config.heads)
        head_config = AttentionConfig(**{**config.to_dict(), "phi": "identity"})
    else:
        phi_in = None
        head_config = config
    out = attention_core(phi_in, q, k, v, head_config, phi_params, capture)
    return _linear(ad.merge_heads(out), weights["w_out"], weights["b_out"])
