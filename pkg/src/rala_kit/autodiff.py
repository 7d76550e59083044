"""Reverse-mode automatic differentiation over a closed set of matrix ops.

Every op is a plain function of arrays.  Passing a :class:`Node` for any
argument records the call on that node's :class:`Tape`; passing only arrays
runs the same forward kernel with no bookkeeping, so taped and untaped
evaluation produce identical values.

>>> tape = Tape()
>>> a = tape.leaf([[2.0]])
>>> out = matmul(a, [[3.0]])
>>> tape.backward(out, [[1.0]])[0]
array([[3.]])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import linalg
from .linalg import DimensionError, as_matrix

__all__ = [
    "Node",
    "Tape",
    "OpDef",
    "OPS",
    "GradCheckReport",
    "apply",
    "forward",
    "backward",
    "finite_diff_check",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-6


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "op", "inputs", "attrs", "name")

    def __init__(self, tape, index, value, op, inputs, attrs, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, op={self.op}, shape={self.value.shape})"


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable
    backward: Callable  # (grad, input values, output value, **attrs) -> tuple of input grads


OPS: dict[str, OpDef] = {}


def _register(name, fwd, bwd):
    OPS[name] = OpDef(name, fwd, bwd)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []
        self.output: Node | None = None

    def leaf(self, value, name: str | None = None) -> Node:
        node = Node(self, len(self.nodes), as_matrix(value).copy(), None, (), {}, name)
        self.nodes.append(node)
        self.leaves.append(node)
        return node

    def constant(self, value) -> Node:
        node = Node(self, len(self.nodes), np.asarray(value, dtype=np.float64), "const", (), {})
        self.nodes.append(node)
        return node

    def record(self, op: str, inputs: tuple[Node, ...], value, attrs) -> Node:
        node = Node(self, len(self.nodes), value, op, inputs, attrs)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns values in tape order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None or node.op == "const":
                values.append(node.value)
            else:
                args = [values[i.index] for i in node.inputs]
                values.append(OPS[node.op].forward(*args, **node.attrs))
        return values

    def backward(self, output: Node | None = None, seed_grad=None) -> list[np.ndarray]:
        """Gradients of ``<seed_grad, output>`` w.r.t. every leaf, in leaf order."""
        output = output if output is not None else self.output
        if output is None:
            raise ValueError("backward: no output node")
        if seed_grad is None:
            seed_grad = np.ones_like(output.value)
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != output.value.shape:
            raise DimensionError(
                f"backward: seed gradient shape {seed_grad.shape} != output shape {output.value.shape}"
            )
        grads: dict[int, np.ndarray] = {output.index: seed_grad}
        for node in reversed(self.nodes[: output.index + 1]):
            if node.op is None or node.op == "const":
                continue
            g = grads.pop(node.index, None)
            if g is None:
                continue
            opdef = OPS[node.op]
            in_vals = [i.value for i in node.inputs]
            in_grads = opdef.backward(g, *in_vals, out=node.value, **node.attrs)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or inp.op == "const":
                    continue
                if inp.index in grads:
                    grads[inp.index] = grads[inp.index] + ig
                else:
                    grads[inp.index] = ig
        return [grads.get(leaf.index, np.zeros_like(leaf.value)) for leaf in self.leaves]


def apply(op: str, *args, **attrs):
    """Run ``op``; record it if any argument is a :class:`Node`."""
    opdef = OPS[op]
    tape = next((a.tape for a in args if isinstance(a, Node)), None)
    if tape is None:
        return opdef.forward(*[as_matrix(a) for a in args], **attrs)
    inputs = tuple(
        a if isinstance(a, Node) else tape.constant(as_matrix(a)) for a in args
    )
    try:
        value = opdef.forward(*[i.value for i in inputs], **attrs)
    except DimensionError as exc:
        shapes = ", ".join(str(i.value.shape) for i in inputs)
        path = " <- ".join(_node_path(inputs))
        raise DimensionError(
            f"{op} at tape node {len(tape.nodes)} (inputs {shapes}; from {path}): {exc}"
        ) from None
    return tape.record(op, inputs, value, attrs)


def _node_path(inputs, depth=4):
    path = []
    node = next((i for i in inputs if i.op not in (None, "const")), None)
    while node is not None and len(path) < depth:
        path.append(f"{node.op}#{node.index}")
        node = next((i for i in node.inputs if i.op not in (None, "const")), None)
    return path or ["leaves"]


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else x


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- op kernels


def _matmul_bwd(g, a, b, out):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_register("matmul", linalg.matmul, _matmul_bwd)
_register(
    "hadamard",
    linalg.hadamard,
    lambda g, a, b, out: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
_register(
    "add",
    linalg.add,
    lambda g, a, b, out: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)


def _divide(a, b):
    a, b = as_matrix(a), as_matrix(b)
    linalg._broadcast_check("divide", a, b)
    if np.any(b == 0):
        raise linalg.NumericalError("divide: zero denominator")
    return a / b


_register(
    "divide",
    _divide,
    lambda g, a, b, out: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
)
_register("scale", lambda a, factor: a * factor, lambda g, a, out, factor: (g * factor,))
_register("transpose", linalg.transpose, lambda g, a, out: (np.swapaxes(g, -1, -2),))


def _softmax_bwd(g, a, out):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


_register("softmax_rows", linalg.softmax_rows, _softmax_bwd)
_register(
    "kernel_elu1",
    linalg.kernel_elu1,
    lambda g, a, out: (g * np.where(a > 0, 1.0, out),),
)
_register("relu", linalg.kernel_relu, lambda g, a, out: (g * (a > 0),))
_register("tanh", np.tanh, lambda g, a, out: (g * (1.0 - out * out),))

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(a):
    return 0.5 * a * (1.0 + erf(a / _SQRT2))


def _gelu_bwd(g, a, out):
    cdf = 0.5 * (1.0 + erf(a / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    return (g * (cdf + a * pdf),)


_register("gelu", _gelu, _gelu_bwd)
_register(
    "mean_rows",
    linalg.mean_rows,
    lambda g, a, out: (np.broadcast_to(g / a.shape[-2], a.shape).copy(),),
)
_register(
    "sum_rows",
    linalg.sum_rows,
    lambda g, a, out: (np.broadcast_to(g, a.shape).copy(),),
)


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + LAYER_NORM_EPS) * gamma + beta


def _layer_norm_bwd(g, x, gamma, beta, out):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LAYER_NORM_EPS)
    xhat = xc * inv
    gxh = g * gamma
    gx = inv * (
        gxh
        - gxh.mean(axis=-1, keepdims=True)
        - xhat * np.mean(gxh * xhat, axis=-1, keepdims=True)
    )
    return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)


_register("layer_norm", _layer_norm, _layer_norm_bwd)


def _grid(x, height, width):
    if x.shape[-2] != height * width:
        raise DimensionError(f"{x.shape[-2]} tokens do not form a {height}x{width} grid")
    return x.reshape(x.shape[:-2] + (height, width, x.shape[-1]))


def _pad_hw(x):
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    return np.pad(x, pad)


def _depthwise_conv3x3(x, w, height, width):
    if w.shape != (3, 3, x.shape[-1]):
        raise DimensionError(f"depthwise weight {w.shape} does not match {x.shape[-1]} channels")
    xp = _pad_hw(_grid(x, height, width))
    out = np.zeros(x.shape[:-2] + (height, width, x.shape[-1]))
    for i in range(3):
        for j in range(3):
            out += xp[..., i : i + height, j : j + width, :] * w[i, j]
    return out.reshape(x.shape)


def _depthwise_conv3x3_bwd(g, x, w, out, height, width):
    xp = _pad_hw(_grid(x, height, width))
    gg = _grid(g, height, width)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    lead = tuple(range(gg.ndim - 1))
    for i in range(3):
        for j in range(3):
            gxp[..., i : i + height, j : j + width, :] += gg * w[i, j]
            gw[i, j] = np.sum(gg * xp[..., i : i + height, j : j + width, :], axis=lead)
    gx = gxp[..., 1:-1, 1:-1, :].reshape(x.shape)
    return gx, gw


_register("depthwise_conv3x3", _depthwise_conv3x3, _depthwise_conv3x3_bwd)


def _im2col_s2(x, height, width):
    if height % 2 or width % 2:
        raise DimensionError(f"stride-2 conv needs even spatial dims, got {height}x{width}")
    xp = _pad_hw(_grid(x, height, width))
    ho, wo = height // 2, width // 2
    patches = [xp[..., i : i + height : 2, j : j + width : 2, :] for i in range(3) for j in range(3)]
    cols = np.stack(patches, axis=-2)  # (..., ho, wo, 9, cin)
    return cols.reshape(x.shape[:-2] + (ho * wo, 9 * x.shape[-1]))


def _conv3x3_s2(x, w, height, width):
    cin = x.shape[-1]
    if w.shape[:3] != (3, 3, cin):
        raise DimensionError(f"conv weight {w.shape} does not match {cin} input channels")
    cols = _im2col_s2(x, height, width)
    return cols @ w.reshape(9 * cin, w.shape[3])


def _conv3x3_s2_bwd(g, x, w, out, height, width):
    cin, cout = w.shape[2], w.shape[3]
    cols = _im2col_s2(x, height, width)
    wm = w.reshape(9 * cin, cout)
    gw = np.swapaxes(cols, -1, -2) @ g
    gw = gw.reshape((-1, 9 * cin, cout)).sum(axis=0).reshape(w.shape)
    gcols = (g @ wm.T).reshape(x.shape[:-2] + (height // 2, width // 2, 9, cin))
    xp_shape = x.shape[:-2] + (height + 2, width + 2, cin)
    gxp = np.zeros(xp_shape)
    k = 0
    for i in range(3):
        for j in range(3):
            gxp[..., i : i + height : 2, j : j + width : 2, :] += gcols[..., k, :]
            k += 1
    return gxp[..., 1:-1, 1:-1, :].reshape(x.shape), gw


_register("conv3x3_s2", _conv3x3_s2, _conv3x3_s2_bwd)


def _split_heads(x, heads):
    n, c = x.shape[-2:]
    if c % heads:
        raise DimensionError(f"{c} channels are not divisible by {heads} heads")
    y = x.reshape(x.shape[:-1] + (heads, c // heads))
    return np.swapaxes(y, -3, -2)


def _merge_heads(x):
    y = np.swapaxes(x, -3, -2)
    return y.reshape(y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


_register("split_heads", _split_heads, lambda g, x, out, heads: (_merge_heads(g),))
_register(
    "merge_heads", _merge_heads, lambda g, x, out: (_split_heads(g, x.shape[-3]),)
)
_register(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, x, out, shape: (g.reshape(x.shape),),
)


def _cross_entropy(logits, labels):
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    nll = logz - shifted[np.arange(len(labels)), labels]
    return np.array([[nll.mean()]])


def _cross_entropy_bwd(g, logits, out, labels):
    p = linalg.softmax_rows(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return (p * (g[0, 0] / len(labels)),)


_register("cross_entropy", _cross_entropy, _cross_entropy_bwd)


# ------------------------------------------------------------ public wrappers


def matmul(a, b):
    return apply("matmul", a, b)


def hadamard(a, b):
    return apply("hadamard", a, b)


def add(a, b):
    return apply("add", a, b)


def divide(a, b):
    return apply("divide", a, b)


def scale(a, factor: float):
    return apply("scale", a, factor=float(factor))


def transpose(a):
    return apply("transpose", a)


def softmax_rows(a):
    return apply("softmax_rows", a)


def kernel_elu1(a):
    return apply("kernel_elu1", a)


def relu(a):
    return apply("relu", a)


def tanh(a):
    return apply("tanh", a)


def gelu(a):
    return apply("gelu", a)


def mean_rows(a):
    return apply("mean_rows", a)


def sum_rows(a):
    return apply("sum_rows", a)


def layer_norm(x, gamma, beta):
    return apply("layer_norm", x, gamma, beta)


def depthwise_conv3x3(x, w, height: int, width: int):
    return apply("depthwise_conv3x3", x, w, height=height, width=width)


def conv3x3_s2(x, w, height: int, width: int):
    return apply("conv3x3_s2", x, w, height=height, width=width)


def split_heads(x, heads: int):
    return apply("split_heads", x, heads=heads)


def merge_heads(x):
    return apply("merge_heads", x)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def cross_entropy(logits, labels):
    return apply("cross_entropy", logits, labels=np.asarray(labels, dtype=np.intp))


# ------------------------------------------------------------------ driving


def forward(expr: Callable, leaves: Sequence) -> tuple[np.ndarray, Tape]:
    """Evaluate ``expr(*leaf_nodes)`` on a fresh tape."""
    tape = Tape()
    nodes = [tape.leaf(v) for v in leaves]
    out = expr(*nodes)
    if not isinstance(out, Node):
        out = tape.constant(out)
    tape.output = out
    return out.value, tape


def backward(tape: Tape, seed_grad) -> list[np.ndarray]:
    return tape.backward(tape.output, seed_grad)


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    h: float
    shapes: list[tuple[int, ...]] = field(default_factory=list)


def finite_diff_check(
    expr: Callable,
    leaves: Sequence,
    h: float = 1e-5,
    seed: int = 0,
    name: str = "expr",
) -> GradCheckReport:
    """Compare taped gradients with central differences of ``<G, expr>``.

    ``G`` is a seeded standard-normal projection of the output.  The error per
    entry is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h must lie in (0, 1e-2], got {h}")
    leaves = [as_matrix(v).copy() for v in leaves]
    value, tape = forward(expr, leaves)
    proj = linalg.rng(seed, "gradcheck.projection").standard_normal(value.shape)
    analytic = backward(tape, proj)

    def objective(vals):
        tmp = Tape()
        out = expr(*[tmp.leaf(v) for v in vals])
        return float(np.sum(proj * value_of(out)))

    worst = 0.0
    for k, leaf in enumerate(leaves):
        flat = leaf.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = objective(leaves)
            flat[idx] = orig - h
            f_minus = objective(leaves)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[k].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return GradCheckReport(name, float(worst), float(h), [tuple(v.shape) for v in leaves])
