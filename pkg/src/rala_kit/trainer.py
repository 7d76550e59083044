"""Toy-scale supervised training: synthetic images, Adam, cosine schedule, checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .backbone import ModelConfig, init_weights, model_forward, preset
from .linalg import rng

logger = logging.getLogger(__name__)

MAGIC = b"RAVLT001"
MAGIC_PREFIX = b"RAVLT"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


# ------------------------------------------------------------------ dataset


def synth_dataset(
    seed: int,
    n_samples: int,
    n_classes: int = 10,
    resolution: int = 64,
    noise: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced class-conditional sinusoid images ``(n, res, res, 3)`` and labels.

    Every class owns a fixed random spatial frequency, orientation and
    per-channel phase; samples add i.i.d. Gaussian noise of std ``noise``.
    Labels cycle through the classes so any prefix stays balanced.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if resolution < 32 or resolution % 32:
        raise ValueError(f"resolution {resolution} must be a positive multiple of 32")
    gen = rng(seed, "synth.patterns")
    # distinct integer (fx, fy) frequency pairs, one per class
    grid = [(fx, fy) for fx in range(1, 7) for fy in range(-6, 7) if (fx, fy) != (0, 0)]
    picks = gen.permutation(len(grid))[:n_classes]
    if len(picks) < n_classes:
        raise ValueError(f"at most {len(grid)} classes supported")
    coords = np.arange(resolution) / resolution
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    patterns = np.empty((n_classes, resolution, resolution, 3))
    for c, idx in enumerate(picks):
        fx, fy = grid[idx]
        phases = gen.uniform(0.0, 2.0 * np.pi, size=3)
        arg = 2.0 * np.pi * (fx * xx + fy * yy)
        for ch in range(3):
            patterns[c, :, :, ch] = np.sin(arg + phases[ch])
    labels = np.arange(n_samples) % n_classes
    noise_gen = rng(seed, "synth.noise")
    images = patterns[labels] + noise * noise_gen.standard_normal((n_samples, resolution, resolution, 3))
    return images, labels


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class AdamHyperparams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    weights: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hp: AdamHyperparams,
    t: int,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with decoupled weight decay."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    new_w, new_m, new_v = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {w.shape} for {name}")
        m = hp.beta1 * state.m.get(name, 0.0) + (1.0 - hp.beta1) * g
        v = hp.beta2 * state.v.get(name, 0.0) + (1.0 - hp.beta2) * g * g
        m_hat = m / (1.0 - hp.beta1**t)
        v_hat = v / (1.0 - hp.beta2**t)
        new_w[name] = w - hp.lr * (m_hat / (np.sqrt(v_hat) + hp.eps) + hp.weight_decay * w)
        new_m[name], new_v[name] = m, v
    return new_w, AdamState(new_m, new_v)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up then cosine decay reaching 0 at the last step (0-based)."""
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 0.0
    progress = (step - warmup_steps + 1) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    seed: int = 0
    preset: str = "toy"
    n_samples: int = 200
    n_classes: int = 10
    noise: float = 0.3
    target_accuracy: float | None = None
    model_overrides: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        overrides = {"num_classes": self.n_classes, **self.model_overrides}
        return preset(self.preset, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainResult:
    model_config: ModelConfig
    weights: dict[str, np.ndarray]
    history: list[EpochMetrics]

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].accuracy if self.history else float("nan")


def loss_and_grads(weights: Mapping, images, labels, config: ModelConfig):
    tape = ad.Tape()
    names = list(weights)
    nodes = {name: tape.leaf(weights[name]) for name in names}
    logits = model_forward(images, config, nodes)
    loss = ad.cross_entropy(logits, labels)
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), logits.value, dict(zip(names, grads))


def evaluate(weights, images, labels, config: ModelConfig, batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy without recording a tape."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(labels), batch_size):
        xb, yb = images[start : start + batch_size], labels[start : start + batch_size]
        logits = model_forward(xb, config, weights)
        total_loss += float(ad.cross_entropy(logits, yb)[0, 0]) * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total_loss / len(labels), correct / len(labels)


def fit_weights(
    weights: dict[str, np.ndarray],
    model_config: ModelConfig,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> tuple[dict[str, np.ndarray], list[EpochMetrics]]:
    """Mini-batch Adam over ``(images, labels)``; returns final weights and history."""
    n = len(labels)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    order_gen = rng(config.seed, "trainer.order")
    state = AdamState()
    history: list[EpochMetrics] = []
    t = 0
    for epoch in range(config.epochs):
        order = order_gen.permutation(n)
        lr = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            lr = lr_schedule(t, total, warmup, config.base_lr)
            loss, _, grads = loss_and_grads(weights, images[idx], labels[idx], model_config)
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            t += 1
            hp = AdamHyperparams(lr=lr, weight_decay=config.weight_decay)
            weights, state = adam_step(weights, grads, state, hp, t)
        loss, acc = evaluate(weights, images, labels, model_config)
        if not math.isfinite(loss):
            raise DivergenceError(epoch)
        metrics = EpochMetrics(epoch, loss, acc, lr)
        history.append(metrics)
        logger.info("epoch %d loss %.4f acc %.3f lr %.2e", epoch, loss, acc, lr)
        if on_epoch is not None:
            on_epoch(metrics)
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break
    return weights, history


def train_loop(config: TrainConfig, on_epoch=None) -> TrainResult:
    model_config = config.model_config()
    images, labels = synth_dataset(
        config.seed, config.n_samples, config.n_classes, model_config.input_resolution, config.noise
    )
    weights = init_weights(model_config, config.seed)
    weights, history = fit_weights(weights, model_config, images, labels, config, on_epoch)
    return TrainResult(model_config, weights, history)


def history_csv(history: list[EpochMetrics]) -> str:
    lines = ["epoch,loss,accuracy,lr"]
    lines += [f"{m.epoch},{m.loss!r},{m.accuracy!r},{m.lr!r}" for m in history]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- checkpoints


def _pack_bytes(buf: io.BytesIO, data: bytes) -> None:
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def save_checkpoint(
    path,
    model_config: ModelConfig,
    weights: Mapping[str, np.ndarray],
    metrics: Mapping | None = None,
) -> None:
    """Write magic, config JSON, float32 weight blobs and metrics JSON.

    Every variable-length field is preceded by its byte length as a
    little-endian uint64; blobs also carry their shape.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    _pack_bytes(buf, model_config.to_json().encode("utf-8"))
    buf.write(struct.pack("<I", len(weights)))
    for name, arr in weights.items():
        arr = np.asarray(arr)
        _pack_bytes(buf, name.encode("utf-8"))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _pack_bytes(buf, arr.astype("<f4").tobytes())
    _pack_bytes(buf, json.dumps(metrics or {}, sort_keys=True).encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} (need {n} bytes at offset {self.pos}, file has {len(self.data)})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self, what: str) -> bytes:
        (n,) = self.unpack("<Q", what + " length")
        return self.take(n, what)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`; weights come back as float64."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        if magic.startswith(MAGIC_PREFIX):
            raise CheckpointVersionError(f"unsupported checkpoint version {magic[5:]!r}; expected {MAGIC[5:]!r}")
        raise CheckpointError(f"not a checkpoint: bad magic {magic!r}")
    try:
        config = ModelConfig.from_json(r.blob("config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    (count,) = r.unpack("<I", "blob count")
    weights = {}
    for _ in range(count):
        name = r.blob("blob name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        raw = r.blob(f"{name} data")
        if len(raw) != 4 * int(np.prod(shape)):
            raise CheckpointError(f"blob {name} holds {len(raw)} bytes for shape {shape}")
        weights[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    metrics = json.loads(r.blob("metrics").decode("utf-8"))
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after metrics block")
    return config, weights, metrics
