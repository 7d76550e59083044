"""Dense matrix primitives shared by every other module.

A "matrix" here is a float64 :class:`numpy.ndarray` with at least two
dimensions; the last two axes are rows and columns and any leading axes are a
stack of independent matrices (batch, heads).  All functions are pure.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "DimensionError",
    "NumericalError",
    "RankReport",
    "SVDResult",
    "as_matrix",
    "rng",
    "matmul",
    "hadamard",
    "add",
    "transpose",
    "softmax_rows",
    "kernel_elu1",
    "kernel_elu1_inverse",
    "kernel_relu",
    "mean_rows",
    "sum_rows",
    "svd",
    "singular_values",
    "numerical_rank",
    "low_rank_factory",
]

DEFAULT_REL_EPS = 1e-6
SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, zero denominator, ...)."""


def _shape(a) -> str:
    return "x".join(str(s) for s in np.shape(a))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a float64 array with ndim >= 2."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim < 2:
        raise DimensionError(f"{name} must be at least 2-D, got shape {_shape(arr)}")
    return arr


def rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based generator for ``(seed, stream)``.

    Streams with different names are statistically independent; the same pair
    always yields the same sequence.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    key = [seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(stream.encode("utf-8"))]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    try:
        return np.matmul(a, b)
    except ValueError as exc:
        raise DimensionError(f"matmul: {_shape(a)} and {_shape(b)}: {exc}") from None


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {_shape(a)} and {_shape(b)} differ") from None


def hadamard(a, b) -> np.ndarray:
    """Entrywise product.  Size-1 axes broadcast (row/column scaling)."""
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _broadcast_check("hadamard", a, b)
    return a * b


def add(a, b) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    _broadcast_check("add", a, b)
    return a + b


def transpose(a) -> np.ndarray:
    return np.swapaxes(as_matrix(a), -1, -2)


def softmax_rows(a) -> np.ndarray:
    a = as_matrix(a)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kernel_elu1(a) -> np.ndarray:
    """``elu(x) + 1``: ``x + 1`` for positive entries, ``exp(x)`` otherwise."""
    a = as_matrix(a)
    return np.where(a > 0, a + 1.0, np.exp(np.minimum(a, 0.0)))


def kernel_elu1_inverse(p) -> np.ndarray:
    """Inverse of :func:`kernel_elu1` on strictly positive input."""
    p = as_matrix(p)
    if np.any(p <= 0):
        raise ValueError("kernel_elu1_inverse needs strictly positive entries")
    return np.where(p > 1.0, p - 1.0, np.log(np.minimum(p, 1.0)))


def kernel_relu(a) -> np.ndarray:
    return np.maximum(as_matrix(a), 0.0)


def mean_rows(a) -> np.ndarray:
    a = as_matrix(a)
    if a.shape[-2] < 1:
        raise DimensionError("mean_rows: matrix has no rows")
    return a.mean(axis=-2, keepdims=True)


def sum_rows(a) -> np.ndarray:
    return as_matrix(a).sum(axis=-2, keepdims=True)


class SVDResult(NamedTuple):
    singular_values: np.ndarray
    u: np.ndarray | None
    vt: np.ndarray | None


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q), p < q, with disjoint pairs per step."""
    m = n + (n % 2)
    players = list(range(m))
    steps = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        steps.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return steps


def _jacobi(a: np.ndarray, want_v: bool) -> tuple[np.ndarray, np.ndarray | None, int]:
    """One-sided Jacobi on the columns of ``a`` (rows >= cols)."""
    work = a.copy()
    n = work.shape[1]
    v = np.eye(n) if want_v else None
    if n < 2:
        return work, v, 0
    steps = _round_robin(n)
    fro2 = float(np.sum(work * work))
    # pairs whose columns are both at the roundoff floor are left alone
    floor = (np.finfo(np.float64).eps * 1e-3) ** 2 * fro2
    for sweep in range(1, SVD_MAX_SWEEPS + 1):
        rotated = False
        for ps, qs in steps:
            cp, cq = work[:, ps], work[:, qs]
            alpha = np.einsum("ij,ij->j", cp, cp)
            beta = np.einsum("ij,ij->j", cq, cq)
            gamma = np.einsum("ij,ij->j", cp, cq)
            scale = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > SVD_TOL * scale) & (scale > floor)
            if not active.any():
                continue
            rotated = True
            ps, qs = ps[active], qs[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            cp, cq = work[:, ps], work[:, qs]
            work[:, ps] = c * cp - s * cq
            work[:, qs] = s * cp + c * cq
            if v is not None:
                vp, vq = v[:, ps], v[:, qs]
                v[:, ps] = c * vp - s * vq
                v[:, qs] = s * vp + c * vq
        if not rotated:
            return work, v, sweep
    raise NumericalError(f"svd: Jacobi sweeps did not converge after {SVD_MAX_SWEEPS} sweeps")


def svd(a, compute_factors: bool = False) -> SVDResult:
    """Singular values (descending) of a single 2-D matrix by one-sided Jacobi.

    With ``compute_factors`` the thin factors are returned as well, so that
    ``u @ diag(s) @ vt`` reconstructs ``a``.
    """
    a = as_matrix(a)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a single 2-D matrix, got {_shape(a)}")
    if min(a.shape) < 1:
        raise DimensionError(f"svd: empty matrix {_shape(a)}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd: non-finite input")
    flipped = a.shape[0] < a.shape[1]
    work_in = a.T if flipped else a
    work, v, _ = _jacobi(work_in, compute_factors)
    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    if not compute_factors:
        return SVDResult(sv, None, None)
    work, v = work[:, order], v[:, order]
    safe = np.where(sv > 0, sv, 1.0)
    u = work / safe
    if flipped:
        return SVDResult(sv, v, u.T)
    return SVDResult(sv, u, v.T)


def singular_values(a) -> np.ndarray:
    return svd(a).singular_values


@dataclass(frozen=True)
class RankReport:
    name: str
    rows: int
    cols: int
    numerical_rank: int
    sigma_max: float
    sigma_min: float
    tolerance: float
    rel_eps: float = DEFAULT_REL_EPS


def numerical_rank(a, rel_eps: float = DEFAULT_REL_EPS, name: str = "") -> RankReport:
    """Count singular values strictly above ``rel_eps * sigma_max``."""
    if not 0.0 < rel_eps < 1.0:
        raise ValueError(f"rel_eps must lie in (0, 1), got {rel_eps}")
    a = as_matrix(a)
    sv = singular_values(a)
    sigma_max = float(sv[0])
    tol = rel_eps * sigma_max
    rank = int(np.count_nonzero(sv > tol)) if sigma_max > 0 else 0
    return RankReport(
        name=name,
        rows=int(a.shape[0]),
        cols=int(a.shape[1]),
        numerical_rank=rank,
        sigma_max=sigma_max,
        sigma_min=float(sv[-1]),
        tolerance=tol,
        rel_eps=rel_eps,
    )


def low_rank_factory(rows: int, cols: int, r: int, seed: int) -> np.ndarray:
    """``U @ W`` with seeded standard-normal ``U`` (rows x r) and ``W`` (r x cols)."""
    if not 1 <= r <= min(rows, cols):
        raise ValueError(f"rank {r} outside [1, {min(rows, cols)}] for a {rows}x{cols} matrix")
    gen = rng(seed, "low_rank_factory")
    u = gen.standard_normal((rows, r))
    w = gen.standard_normal((r, cols))
    return u @ w
