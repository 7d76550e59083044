"""Rank instrumentation and complexity benchmarking.

Produces tabular records (CSV or JSON) of the numerical rank of attention
intermediates and of attention wall time versus token count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import attention as attn
from .backbone import ModelConfig, model_forward
from .linalg import DEFAULT_REL_EPS, RankReport, kernel_elu1_inverse, numerical_rank, rng

RANK_COLUMNS = ["layer_index", "matrix_name", "rows", "cols", "numerical_rank", "sigma_max", "sigma_min", "tolerance"]
SCALING_COLUMNS = ["variant", "N", "d", "flops", "wall_time_s", "seed"]
TRACED = ("kernel_q", "kv_buffer", "pre_modulation", "output")


@dataclass(frozen=True)
class RankRecord:
    layer_index: int
    matrix_name: str
    rows: int
    cols: int
    numerical_rank: int
    sigma_max: float
    sigma_min: float
    tolerance: float

    @classmethod
    def from_report(cls, layer_index: int, report: RankReport) -> "RankRecord":
        return cls(layer_index, report.name, report.rows, report.cols, report.numerical_rank,
                   report.sigma_max, report.sigma_min, report.tolerance)


@dataclass
class LayerRankTrace:
    records: list[RankRecord]
    fingerprint: str
    seed: int
    head: int = 0

    def layer(self, index: int) -> dict[str, RankRecord]:
        return {r.matrix_name: r for r in self.records if r.layer_index == index}

    @property
    def n_layers(self) -> int:
        return len({r.layer_index for r in self.records})


@dataclass(frozen=True)
class ScalingRecord:
    variant: str
    N: int
    d: int
    flops: int
    wall_time_s: float
    seed: int


def _fingerprint(payload: Mapping) -> str:
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _rank_captured(layer_index: int, captured: Mapping, rel_eps: float) -> list[RankRecord]:
    out = []
    for name in TRACED:
        if name in captured:
            rep = numerical_rank(captured[name], rel_eps, name=name)
            out.append(RankRecord.from_report(layer_index, rep))
    return out


def layer_rank_trace(
    config: ModelConfig,
    weights: Mapping,
    images,
    rel_eps: float = DEFAULT_REL_EPS,
    head: int = 0,
    seed: int = 0,
) -> LayerRankTrace:
    """Rank of kappa(Q), the KV buffer, the pre-modulation and final outputs per block.

    Uses the first image of ``images`` and attention head ``head`` in every
    block; layers are numbered in network order.
    """
    captured: list[dict] = []
    model_forward(np.asarray(images)[:1], config, weights, capture=captured, head=head)
    records = []
    for i, cap in enumerate(captured):
        records += _rank_captured(i, cap, rel_eps)
    fp = _fingerprint({"config": config.to_dict(), "head": head, "rel_eps": rel_eps})
    return LayerRankTrace(records, fp, seed, head)


def constructed_inputs(n: int, d: int, key_rank: int | None, seed: int, kernel: str = "elu1"):
    """Random ``X, Q, K, V`` with ``kernel(K)`` of exact rank ``key_rank``.

    The kernel image is built as a product of two entrywise-positive factors
    and pulled back through the kernel, so ``kernel(K)`` is positive and has
    the requested rank.
    """
    gen = rng(seed, "analysis.constructed")
    x = gen.standard_normal((n, d))
    q = gen.standard_normal((n, d))
    v = gen.standard_normal((n, d))
    if key_rank is None:
        k = gen.standard_normal((n, d))
    else:
        if not 1 <= key_rank <= min(n, d):
            raise ValueError(f"key rank {key_rank} outside [1, {min(n, d)}]")
        target = np.abs(gen.standard_normal((n, key_rank))) @ np.abs(gen.standard_normal((key_rank, d)))
        target /= key_rank
        if kernel == "elu1":
            k = kernel_elu1_inverse(target)
        elif kernel == "relu":
            k = target
        elif kernel == "softmax_rows":
            k = np.log(target)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
    phi_params = {
        "weight": gen.standard_normal((d, d)) / math.sqrt(d),
        "bias": gen.standard_normal((1, d)),
    }
    return x, q, k, v, phi_params


def constructed_rank_trace(
    variant: str = "rala",
    n: int = 196,
    d: int = 64,
    key_rank: int | None = 8,
    seed: int = 0,
    rel_eps: float = DEFAULT_REL_EPS,
    config: attn.AttentionConfig | None = None,
) -> LayerRankTrace:
    """Single-head rank trace on constructed inputs (layer index 0)."""
    if config is None:
        config = attn.AttentionConfig(variant=variant, head_dim=d)
    x, q, k, v, phi_params = constructed_inputs(n, d, key_rank, seed, config.kernel)
    cap: dict = {}
    if config.variant in ("rala", "linear_vanilla"):
        attn.attention_core(x, q, k, v, config, phi_params, cap)
    elif config.variant == "efficient":
        cap["output"] = attn.efficient_attention_baseline(q, k, v)
    else:
        cap["output"] = attn.softmax_attention(q, k, v)
    fp = _fingerprint({"attention": config.to_dict(), "n": n, "d": d, "key_rank": key_rank,
                       "rel_eps": rel_eps, "head": 0})
    return LayerRankTrace(_rank_captured(0, cap, rel_eps), fp, seed, 0)


# ---------------------------------------------------------------- scaling


def attention_flops(variant: str, n: int, d: int) -> int:
    """Closed-form FLOPs of one single-head attention call (2 per multiply-add).

    Elementwise ops count 1 per entry; a row softmax counts 5 per entry
    (max, subtract, exp, sum, divide).
    """
    if variant == "softmax":
        return 4 * n * n * d + n * n + 5 * n * n
    kernel = 2 * n * d
    buffer = 2 * n * d * d
    normalizer = 2 * n * d + 2 * n * d + n * d  # key sum, denominator, divide
    if variant == "linear_vanilla":
        return kernel + 2 * buffer + normalizer
    if variant == "rala":
        alpha = n * d + 2 * n * d + 5 * n + n
        weighting = n * d
        modulation = n * d
        return kernel + alpha + weighting + 2 * buffer + normalizer + modulation
    if variant == "efficient":
        return 2 * 5 * n * d + 2 * buffer
    raise ValueError(f"unknown variant {variant!r}")


def _bench_call(variant: str, x, q, k, v):
    if variant == "softmax":
        return lambda: attn.softmax_attention(q, k, v)
    if variant == "efficient":
        return lambda: attn.efficient_attention_baseline(q, k, v)
    if variant == "linear_vanilla":
        return lambda: attn.linear_attention_vanilla(q, k, v)
    if variant == "rala":
        cfg = attn.AttentionConfig(variant="rala", head_dim=q.shape[-1], phi="identity")
        return lambda: attn.rala_attention(x, q, k, v, cfg)
    raise ValueError(f"unknown variant {variant!r}")


def _thread_limit(threads: int | None):
    if threads is None or threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def scaling_benchmark(
    variants: Sequence[str],
    n_list: Sequence[int],
    d: int = 64,
    repeats: int = 5,
    seed: int = 0,
    threads: int | None = 1,
) -> list[ScalingRecord]:
    """Median wall time of each attention variant at each token count.

    One untimed warm-up call precedes the timed repeats.  BLAS is pinned to
    ``threads`` threads while timing.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be strictly increasing with at least two entries")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    records = []
    with _thread_limit(threads):
        for variant in variants:
            for n in n_list:
                gen = rng(seed, f"bench.{variant}.{n}")
                x, q, k, v = (gen.standard_normal((n, d)) for _ in range(4))
                call = _bench_call(variant, x, q, k, v)
                call()
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    call()
                    times.append(time.perf_counter() - t0)
                records.append(ScalingRecord(variant, n, d, attention_flops(variant, n, d),
                                             statistics.median(times), seed))
    return records


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float))
    lx_c = lx - lx.mean()
    return float(np.dot(lx_c, ly - ly.mean()) / np.dot(lx_c, lx_c))


def fitted_slopes(records: Iterable[ScalingRecord], field_name: str = "wall_time_s") -> dict[str, float]:
    by_variant: dict[str, list[ScalingRecord]] = {}
    for r in records:
        by_variant.setdefault(r.variant, []).append(r)
    return {
        name: loglog_slope([r.N for r in rs], [getattr(r, field_name) for r in rs])
        for name, rs in by_variant.items()
    }


# ----------------------------------------------------------------- export


def _columns_for(records: Sequence) -> list[str]:
    first = records[0]
    if isinstance(first, RankRecord):
        return RANK_COLUMNS
    if isinstance(first, ScalingRecord):
        return SCALING_COLUMNS
    raise TypeError(f"cannot export records of type {type(first).__name__}")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_table(records: Sequence, fmt: str = "csv") -> str:
    if not records:
        raise ValueError("no records to export")
    columns = _columns_for(records)
    rows = [asdict(r) for r in records]
    if fmt == "json":
        return json.dumps([{c: row[c] for c in columns} for row in rows], indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}; expected csv or json")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def export_table(records: Sequence, fmt: str = "csv", path=None) -> str:
    """Serialize ``records``; written UTF-8 with ``\\n`` line endings when ``path`` is given."""
    text = format_table(records, fmt)
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise OSError(f"could not write table to {path}: {exc.strerror}") from exc
    return text


_RANK_TYPES = {"layer_index": int, "matrix_name": str, "rows": int, "cols": int, "numerical_rank": int,
               "sigma_max": float, "sigma_min": float, "tolerance": float}
_SCALING_TYPES = {"variant": str, "N": int, "d": int, "flops": int, "wall_time_s": float, "seed": int}


def parse_table(text: str, fmt: str = "csv") -> list:
    """Inverse of :func:`format_table`."""
    if fmt == "json":
        rows = json.loads(text)
    else:
        rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return []
    if set(rows[0]) == set(RANK_COLUMNS):
        cls, types = RankRecord, _RANK_TYPES
    elif set(rows[0]) == set(SCALING_COLUMNS):
        cls, types = ScalingRecord, _SCALING_TYPES
    else:
        raise ValueError(f"unrecognized columns {sorted(rows[0])}")
    return [cls(**{k: types[k](v) for k, v in row.items()}) for row in rows]


def read_table(path, fmt: str = "csv") -> list:
    return parse_table(Path(path).read_text(encoding="utf-8"), fmt)
