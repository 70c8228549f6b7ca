"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, attaches a closure that maps the output cotangent to input
cotangents. The graph lives only as long as the output tensors referencing
it, so nothing persists across minibatches.

All arithmetic is float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

PROB_FLOOR = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class Tensor:
    """An n-dimensional float64 array that is also a node of the graph.

    ``op`` is the primitive tag that produced the tensor (``"leaf"`` for
    inputs), ``parents`` the input tensors and ``kink`` an optional array
    recording the branch a nondifferentiable primitive took. Leaves created
    with ``requires_grad=False`` are constants.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "id", "kink", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward=None, kink=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.id = next(_ids)
        self.kink = kink

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul_scalar(self, -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.requires_grad:
                raise TypeError("mul: only constant multipliers are supported")
            other = other.data
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward, kink=None) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, op=op, parents=parents, backward=backward, kink=kink)
    # constant subgraph: keep op and kink so signatures stay comparable
    return Tensor(data, False, op=op, kink=kink)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        ga = gb = None
        if a.requires_grad:
            if ad.ndim == 2:
                ga = g @ bd.T if bd.ndim == 2 else np.outer(g, bd)
            else:
                ga = bd @ g if bd.ndim == 2 else g * bd
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.T @ g if ad.ndim == 2 else np.outer(ad, g)
            else:
                gb = ad.T @ g if ad.ndim == 2 else g * ad
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, "add", (a, b), backward)


def mul_scalar(a, c) -> Tensor:
    """Multiply by a constant scalar or a broadcastable constant array."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    try:
        out = a.data * c
    except ValueError:
        raise ShapeError("mul-scalar", a.shape, c.shape) from None

    def backward(g):
        return (_unbroadcast(g * c, a.shape),)

    return _make(out, "mul-scalar", (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # relu'(0) = 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), backward, kink=mask)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), backward)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (a,), backward)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log-softmax", (a,), backward)


def log(a, floor: float | None = None, counter: "FloorCounter | None" = None) -> Tensor:
    """Natural log. Without ``floor`` non-positive inputs raise DomainError.

    With ``floor`` set, entries below it are replaced by the floor (zero
    gradient there) and the number of replacements is added to ``counter``.
    """
    a = as_tensor(a)
    x = a.data
    if floor is None:
        if np.any(x <= 0.0):
            raise DomainError(f"log: non-positive input (min {x.min()!r})")
        clipped = np.zeros(x.shape, dtype=bool)
    else:
        clipped = x < floor
        n = int(clipped.sum())
        if n and counter is not None:
            counter.count += n
        x = np.where(clipped, floor, x)
    out = np.log(x)

    def backward(g):
        return (np.where(clipped, 0.0, g / x),)

    return _make(out, "log", (a,), backward, kink=clipped if floor is not None else None)


def summation(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, "sum", (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul_scalar(summation(a, axis), 1.0 / n)


def index_select(a, index) -> Tensor:
    """Pick one entry per row along the last axis.

    For a 1-D input ``index`` is a single integer; for shape (B, C) it is a
    length-B integer array.
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim == 1:
        if idx.ndim != 0 or not 0 <= idx < a.shape[0]:
            raise ShapeError("index-select", a.shape, idx.shape)
        out = a.data[idx]
    else:
        if idx.shape != a.shape[:-1] or np.any(idx < 0) or np.any(idx >= a.shape[-1]):
            raise ShapeError("index-select", a.shape, idx.shape)
        out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ga = np.zeros(a.shape)
        if a.data.ndim == 1:
            ga[idx] = g
        else:
            np.put_along_axis(ga, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (ga,)

    return _make(out, "index-select", (a,), backward, kink=idx)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation. x: (B, C, H, W), w: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((B, O, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
            out += np.einsum("bchw,oc->bohw", patch, w.data[:, :, i, j], optimize=False)

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += np.einsum(
                        "bohw,oc->bchw", g, w.data[:, :, i, j], optimize=False)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        if w.requires_grad:
            gw = np.zeros(w.shape)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
                    gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=False)
        return gx, gw

    return _make(out, "conv2d", (x, w), backward)


def avg_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    s = stride or kernel
    if x.data.ndim != 4:
        raise ShapeError("avg-pool2d", x.shape, (kernel, kernel))
    B, C, H, W = x.shape
    Ho = (H - kernel) // s + 1
    Wo = (W - kernel) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("avg-pool2d", x.shape, (kernel, kernel))
    out = np.zeros((B, C, Ho, Wo))
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
    out /= kernel * kernel

    def backward(g):
        gx = np.zeros(x.shape)
        g = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += g
        return (gx,)

    return _make(out, "avg-pool2d", (x,), backward)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul-scalar": mul_scalar,
    "relu": relu,
    "conv2d": conv2d,
    "avg-pool2d": avg_pool2d,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "log": log,
    "mean": mean,
    "sum": summation,
    "index-select": index_select,
    "reshape": reshape,
}


def forward_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the primitive named ``kind`` to ``inputs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Gradient of scalar ``root`` w.r.t. every reachable node, keyed by id."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {root.id: np.ones(root.shape)}
    for node in reversed(topological_order(root)):
        g = grads.get(node.id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. each tensor in ``wrt`` (zeros if unreachable)."""
    grads = backward(root)
    return [grads.get(t.id, np.zeros(t.shape)) for t in wrt]


def kink_signature(root: Tensor) -> tuple:
    """Branch record of every nondifferentiable primitive in the graph."""
    sig, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        if node.kink is not None:
            sig.append((node.op, node.kink.shape, node.kink.tobytes()))
        stack.extend(node.parents)
    return tuple(sorted(sig))


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    coord_pass: np.ndarray
    coord_error: np.ndarray
    kink_mask: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    nonfinite: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               tol: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradient of ``fn`` at ``point`` to central differences.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Coordinates where ``x ± step`` changes the branch of a relu, a max
    selection or the probability floor are masked out as kinks. A perturbed
    point outside the domain of ``log`` counts as a non-finite value.
    """
    x0 = np.array(point, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = fn(xt)
    analytic = grad(out, [xt])[0].reshape(-1)
    base_sig = kink_signature(out)

    n = x0.size
    numeric = np.zeros(n)
    kinks = np.zeros(n, dtype=bool)
    nonfinite = np.zeros(n, dtype=bool)
    flat = x0.reshape(-1)
    for i in range(n):
        vals = []
        for sgn in (1.0, -1.0):
            xp = flat.copy()
            xp[i] += sgn * step
            try:
                o = fn(Tensor(xp.reshape(x0.shape), requires_grad=True))
            except DomainError:
                vals.append(np.nan)
                continue
            vals.append(o.data.reshape(-1)[0])
            if kink_signature(o) != base_sig:
                kinks[i] = True
        if not np.all(np.isfinite(vals)):
            nonfinite[i] = True
        numeric[i] = (vals[0] - vals[1]) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    err = np.where(nonfinite | ~np.isfinite(err), np.inf, err)
    checked = ~kinks | nonfinite
    coord_pass = (err <= tol) | ~checked
    max_err = float(err[checked].max()) if checked.any() else 0.0
    return GradCheckReport(max_err, bool(coord_pass.all()) and not nonfinite.any(), coord_pass,
                           err, kinks, analytic, numeric, nonfinite)


# ---------------------------------------------------------------------------
# losses


class LossKind(str, Enum):
    CE_PROB = "ce-prob"
    CE_LOGITS = "ce-logits"
    MARGIN = "margin"


@dataclass
class FloorCounter:
    """Counts how often the probability floor was applied."""

    count: int = 0


def runner_up(logits: np.ndarray, labels) -> np.ndarray:
    """Index of the largest logit other than the label (lowest index on ties)."""
    z = np.array(logits, dtype=np.float64, copy=True)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim == 1:
        z[labels] = -np.inf
    else:
        np.put_along_axis(z, labels[..., None], -np.inf, axis=-1)
    return np.argmax(z, axis=-1)


def per_example_loss(kind: LossKind | str, output, labels, counter: FloorCounter | None = None) -> Tensor:
    """Loss value per example (shape of ``labels``).

    ``ce-prob`` expects probabilities, the other two kinds expect logits.
    Margin is Z[t] - max_{i != t} Z[i].
    """
    kind = LossKind(kind)
    output = as_tensor(output)
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = output.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise ValueError(f"label out of range for {n_cls} classes")
    if kind is LossKind.CE_PROB:
        return -index_select(log(output, floor=PROB_FLOOR, counter=counter), labels)
    if kind is LossKind.CE_LOGITS:
        return -index_select(log_softmax(output), labels)
    if n_cls < 2:
        raise ValueError("margin needs at least two classes")
    other = runner_up(output.data, labels)
    return index_select(output, labels) - index_select(output, other)


def loss(kind: LossKind | str, model_output, true_label, counter: FloorCounter | None = None) -> Tensor:
    """Scalar loss: the batch mean of :func:`per_example_loss`."""
    return mean(per_example_loss(kind, model_output, true_label, counter))
