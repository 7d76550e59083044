"""Hierarchical vision backbone built from CPE + attention + FFN blocks.

Activations are token matrices ``(B, H*W, C)``; the spatial layout travels
alongside as ``(H, W)``.  Weights live in a flat ``dict`` keyed by dotted
names, e.g. ``stages.2.blocks.0.attn.w_q``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, mha_param_names, multi_head_attention, truncated_normal
from .linalg import DimensionError, rng

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    stage_blocks: tuple[int, int, int, int] = (1, 1, 2, 1)
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    ffn_ratio: float = 4.0
    num_classes: int = 10
    input_resolution: int = 64
    cpe_enabled: bool = True
    kv_augment: bool = True
    out_augment: bool = True
    kernel: str = "elu1"
    phi: str = "linear_projection"
    normalize: bool = True
    variant: str = "rala"
    pre_norm: bool = True

    def __post_init__(self):
        for name in ("stage_blocks", "stage_channels", "stage_heads"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ValueError(f"{name} needs 4 entries, got {len(value)}")
            object.__setattr__(self, name, value)
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h:
                raise ValueError(f"stage width {c} is not divisible by {h} heads")
        if self.input_resolution % 32:
            raise ValueError(f"input resolution {self.input_resolution} is not divisible by 32")
        if self.stage_channels[0] % 2:
            raise ValueError("first stage width must be even (stem halves it)")
        self.attention_config(0)  # validates kernel/phi/variant

    def attention_config(self, stage: int) -> AttentionConfig:
        c, h = self.stage_channels[stage], self.stage_heads[stage]
        return AttentionConfig(
            variant=self.variant,
            heads=h,
            head_dim=c // h,
            kernel=self.kernel,
            phi=self.phi,
            kv_augment=self.kv_augment,
            out_augment=self.out_augment,
            normalize=self.normalize,
        )

    def hidden_width(self, stage: int) -> int:
        return int(round(self.stage_channels[stage] * self.ffn_ratio))

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("stage_blocks", "stage_channels", "stage_heads"):
            d[name] = list(d[name])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


PRESETS: dict[str, ModelConfig] = {
    "ravlt-t": ModelConfig((2, 2, 6, 2), (64, 128, 256, 512), (1, 2, 4, 8), num_classes=1000, input_resolution=224),
    "ravlt-s": ModelConfig((3, 5, 9, 3), (64, 128, 320, 512), (1, 2, 5, 8), num_classes=1000, input_resolution=224),
    "ravlt-b": ModelConfig((4, 6, 12, 6), (96, 192, 384, 512), (1, 2, 6, 8), num_classes=1000, input_resolution=224),
    "ravlt-l": ModelConfig((4, 7, 19, 8), (96, 192, 448, 640), (1, 2, 7, 10), num_classes=1000, input_resolution=224),
    "toy": ModelConfig(),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        config = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return config.replace(**overrides) if overrides else config


# ------------------------------------------------------------------ weights


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c0 = config.stage_channels[0]
    shapes["stem.conv1.weight"] = (3, 3, 3, c0 // 2)
    shapes["stem.conv1.bias"] = (1, c0 // 2)
    shapes["stem.conv2.weight"] = (3, 3, c0 // 2, c0)
    shapes["stem.conv2.bias"] = (1, c0)
    for s in range(4):
        c = config.stage_channels[s]
        if s > 0:
            shapes[f"stages.{s}.down.weight"] = (3, 3, config.stage_channels[s - 1], c)
            shapes[f"stages.{s}.down.bias"] = (1, c)
        attn_names = mha_param_names(config.attention_config(s))
        hid = config.hidden_width(s)
        for b in range(config.stage_blocks[s]):
            p = f"stages.{s}.blocks.{b}."
            if config.cpe_enabled:
                shapes[p + "cpe.weight"] = (3, 3, c)
                shapes[p + "cpe.bias"] = (1, c)
            shapes[p + "norm1.gamma"] = (1, c)
            shapes[p + "norm1.beta"] = (1, c)
            for name in attn_names:
                shapes[p + "attn." + name] = (c, c) if name.startswith("w_") else (1, c)
            shapes[p + "norm2.gamma"] = (1, c)
            shapes[p + "norm2.beta"] = (1, c)
            shapes[p + "ffn.w1"] = (c, hid)
            shapes[p + "ffn.b1"] = (1, hid)
            shapes[p + "ffn.w2"] = (hid, c)
            shapes[p + "ffn.b2"] = (1, c)
    c3 = config.stage_channels[3]
    shapes["head.norm.gamma"] = (1, c3)
    shapes["head.norm.beta"] = (1, c3)
    shapes["head.weight"] = (c3, config.num_classes)
    shapes["head.bias"] = (1, config.num_classes)
    return shapes


def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) weights, zero biases, unit norm gains."""
    gen = rng(seed, "backbone.init")
    weights = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            weights[name] = np.ones(shape)
        elif leaf in ("beta", "bias") or leaf.startswith("b_") or leaf in ("b1", "b2"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = truncated_normal(gen, shape, INIT_STD)
    return weights


def _sub(weights: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in weights.items() if k.startswith(prefix)}


# ------------------------------------------------------------------ forward


def cpe_forward(x, height: int, width: int, weight, bias=None):
    """Conditional positional encoding: ``x + dwconv3x3(x)`` (zero padding)."""
    n = ad.value_of(x).shape[-2]
    if n != height * width:
        raise DimensionError(f"{n} tokens do not form a {height}x{width} grid")
    conv = ad.depthwise_conv3x3(x, weight, height, width)
    if bias is not None:
        conv = ad.add(conv, bias)
    return ad.add(x, conv)


def ffn_forward(x, weights: Mapping):
    hidden = ad.gelu(ad.add(ad.matmul(x, weights["w1"]), weights["b1"]))
    return ad.add(ad.matmul(hidden, weights["w2"]), weights["b2"])


def block_forward(x, height: int, width: int, config: ModelConfig, stage: int, weights: Mapping, capture=None):
    """CPE, then attention and FFN sublayers with residuals (pre-norm by default)."""
    if config.cpe_enabled:
        x = cpe_forward(x, height, width, weights["cpe.weight"], weights["cpe.bias"])
    attn_cfg = config.attention_config(stage)
    attn_w = _sub(weights, "attn.")
    if config.pre_norm:
        h = ad.layer_norm(x, weights["norm1.gamma"], weights["norm1.beta"])
        x = ad.add(x, multi_head_attention(h, attn_cfg, attn_w, capture))
        h = ad.layer_norm(x, weights["norm2.gamma"], weights["norm2.beta"])
        return ad.add(x, ffn_forward(h, _sub(weights, "ffn.")))
    x = ad.add(x, multi_head_attention(x, attn_cfg, attn_w, capture))
    x = ad.layer_norm(x, weights["norm1.gamma"], weights["norm1.beta"])
    x = ad.add(x, ffn_forward(x, _sub(weights, "ffn.")))
    return ad.layer_norm(x, weights["norm2.gamma"], weights["norm2.beta"])


def downsample_forward(x, height: int, width: int, weight, bias=None):
    """3x3 stride-2 convolution with padding 1; returns ``(tokens, H/2, W/2)``."""
    if height % 2 or width % 2:
        raise DimensionError(f"cannot halve odd spatial dims {height}x{width}")
    out = ad.conv3x3_s2(x, weight, height, width)
    if bias is not None:
        out = ad.add(out, bias)
    return out, height // 2, width // 2


def images_to_tokens(images) -> tuple[np.ndarray, int, int]:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DimensionError(f"expected images of shape (B, H, W, 3), got {arr.shape}")
    b, h, w, c = arr.shape
    return arr.reshape(b, h * w, c), h, w


def model_forward(images, config: ModelConfig, weights: Mapping, capture: list | None = None, head: int = 0):
    """Class logits ``(B, num_classes)`` for images ``(B, H, W, 3)``.

    ``capture``, if a list, receives one dict per block (network order) with
    the attention intermediates of image 0, head ``head``.
    """
    x, h, w = images_to_tokens(images)
    if h % 32 or w % 32:
        raise DimensionError(f"input resolution {h}x{w} is not divisible by 32")
    x, h, w = downsample_forward(x, h, w, weights["stem.conv1.weight"], weights["stem.conv1.bias"])
    x = ad.gelu(x)
    x, h, w = downsample_forward(x, h, w, weights["stem.conv2.weight"], weights["stem.conv2.bias"])
    for s in range(4):
        if s > 0:
            x, h, w = downsample_forward(x, h, w, weights[f"stages.{s}.down.weight"], weights[f"stages.{s}.down.bias"])
        for b in range(config.stage_blocks[s]):
            cap = {} if capture is not None else None
            x = block_forward(x, h, w, config, s, _sub(weights, f"stages.{s}.blocks.{b}."), cap)
            if cap is not None:
                capture.append({"stage": s, "block": b, "head": head, **{k: v[0, head] for k, v in cap.items()}})
    x = ad.layer_norm(x, weights["head.norm.gamma"], weights["head.norm.beta"])
    pooled = ad.mean_rows(x)
    logits = ad.add(ad.matmul(pooled, weights["head.weight"]), weights["head.bias"])
    shape = ad.value_of(logits).shape
    return ad.reshape(logits, (shape[0], shape[-1]))


def predict_proba(images, config: ModelConfig, weights: Mapping) -> np.ndarray:
    from .linalg import softmax_rows

    return softmax_rows(model_forward(images, config, weights))


# ------------------------------------------------------------------- costs


@dataclass
class CostReport:
    """Parameter count or multiply-accumulate count with a per-part breakdown.

    ``macs`` counts one multiply-accumulate per inner-product term of every
    matmul and convolution; ``flops`` is ``2 * macs``.
    """

    parameter_count: int = 0
    macs: int = 0
    resolution: int | None = None
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def total(self) -> int:
        return self.parameter_count if self.resolution is None else self.macs


def _part_of(name: str) -> str:
    head = name.split(".")
    return f"stage{head[1]}" if head[0] == "stages" else head[0]


def count_params(config: ModelConfig) -> CostReport:
    breakdown: dict[str, int] = {}
    for name, shape in param_shapes(config).items():
        part = _part_of(name)
        breakdown[part] = breakdown.get(part, 0) + int(np.prod(shape))
    return CostReport(parameter_count=sum(breakdown.values()), breakdown=breakdown)


def attention_macs(variant: str, n: int, channels: int, heads: int, config: ModelConfig | None = None) -> int:
    """Matmul MACs of the token-mixing core (projections excluded)."""
    dh = channels // heads
    if variant == "softmax":
        per_head = 2 * n * n * dh
    elif variant == "efficient":
        per_head = 2 * n * dh * dh
    elif variant == "linear_vanilla":
        normalize = config.normalize if config is not None else True
        per_head = 2 * n * dh * dh + (2 * n * dh if normalize else 0)
    elif variant == "rala":
        normalize = config.normalize if config is not None else True
        kv_aug = config.kv_augment if config is not None else True
        per_head = 2 * n * dh * dh
        per_head += 2 * n * dh if normalize else 0
        per_head += n * dh if kv_aug else 0
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return heads * per_head


def block_macs(config: ModelConfig, stage: int, n: int) -> int:
    c = config.stage_channels[stage]
    attn_cfg = config.attention_config(stage)
    n_proj = sum(1 for name in mha_param_names(attn_cfg) if name.startswith("w_"))
    macs = n_proj * n * c * c
    macs += attention_macs(config.variant, n, c, config.stage_heads[stage], config)
    macs += 2 * n * c * config.hidden_width(stage)
    if config.cpe_enabled:
        macs += 9 * n * c
    return macs


def count_flops(config: ModelConfig, resolution: int | None = None) -> CostReport:
    """Analytic multiply-accumulate count for one image (no execution)."""
    r = config.input_resolution if resolution is None else int(resolution)
    if r % 32:
        raise ValueError(f"resolution {r} is not divisible by 32")
    c0 = config.stage_channels[0]
    breakdown = {
        "stem": (r // 2) ** 2 * 9 * 3 * (c0 // 2) + (r // 4) ** 2 * 9 * (c0 // 2) * c0,
    }
    for s in range(4):
        side = r // 2 ** (s + 2)
        n = side * side
        c = config.stage_channels[s]
        macs = 0
        if s > 0:
            macs += n * 9 * config.stage_channels[s - 1] * c
        macs += config.stage_blocks[s] * block_macs(config, s, n)
        breakdown[f"stage{s}"] = macs
    breakdown["head"] = config.stage_channels[3] * config.num_classes
    return CostReport(macs=sum(breakdown.values()), resolution=r, breakdown=breakdown)


def stage_token_counts(resolution: int) -> list[int]:
    return [(resolution // 2 ** (s + 2)) ** 2 for s in range(4)]
