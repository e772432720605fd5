"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Values are computed eagerly when an op is called; each result remembers its
parents and a closure mapping the output adjoint to parent adjoints.
:func:`backward` walks the graph in reverse topological order. Graphs are
meant to be built once per training step and dropped after ``backward``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    # make ``ndarray - Tensor`` dispatch to Tensor.__rsub__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _node(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
        "pow",
    )


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, so finite differences behave."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _node(out, (a,), bw, "gelu")


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("log_sigmoid received non-finite input")
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    # d/dx log sigma(x) = sigma(-x)
    sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return _node(out, (a,), lambda g: (g * sig_neg,), "log_sigmoid")


def stop_gradient(a) -> Tensor:
    """Same forward value; contributes nothing to any upstream adjoint."""
    a = as_tensor(a)
    return Tensor(a.data, False, op="stop_gradient")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul requires at least 1-d operands")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from exc

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim >= 2 and bd.ndim == 2:
            # weight-style right operand: fold batch dims instead of summing a stack
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if ad.ndim == 1:
            ad = ad[None, :]
            g = np.expand_dims(g, -2)
        if bd.ndim == 1:
            bd = bd[:, None]
            g = np.expand_dims(g, -1)
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if a.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if b.ndim == 1:
            gb = gb.reshape(gb.shape[:-1])
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), bw, "getitem")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, bw, "stack")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def gather(a, indices) -> Tensor:
    """Select ``a[..., indices[...]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather: index shape {idx.shape} does not match {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _node(out, (a,), bw, "gather")


def forward(root: Tensor) -> np.ndarray:
    """Value of a graph root. Ops evaluate eagerly, so this is a lookup."""
    return root.data


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Returns the adjoint table keyed by ``id(tensor)``.
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    adjoints: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    if not root.requires_grad:
        return adjoints
    for node in reversed(_topological(root)):
        g = adjoints.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = pg if key not in adjoints else adjoints[key] + pg
    return adjoints


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int
    tol: float
    nonfinite: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_err < self.tol


def rel_err(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    return 0.0 if scale == 0.0 else abs(analytic - numeric) / scale


def numeric_partial(fn: Callable[[float], float], x0: float, step: float) -> float:
    """Central difference at step h and h/2 combined by Richardson extrapolation."""
    h = step * max(1.0, abs(x0))

    def central(hh):
        hi, lo = x0 + hh, x0 - hh
        return (fn(hi) - fn(lo)) / (hi - lo)

    d1, d2 = central(h), central(h / 2)
    return (4.0 * d2 - d1) / 3.0


def grad_check(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray] | np.ndarray,
    tol: float = 1e-6,
    *,
    max_coords: int | None = 256,
    step: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` with finite differences.

    ``loss_fn`` receives a dict of parameter tensors and must return a scalar
    tensor. ``max_coords=None`` checks every coordinate; otherwise a seeded
    sample of at least ``min(64, total)`` coordinates is drawn.
    """
    if isinstance(params, np.ndarray):
        params = {"x": params}
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    loss = loss_fn(leaves)
    if not np.all(np.isfinite(loss.data)):
        return GradCheckReport(math.inf, None, 0, tol, nonfinite=[("<loss>", ())])
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    coords = [(k, idx) for k, v in base.items() for idx in np.ndindex(v.shape)]
    if max_coords is not None and len(coords) > max(64, max_coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max(64, max_coords), replace=False)
        coords = [coords[i] for i in sorted(picks)]

    report = GradCheckReport(0.0, None, 0, tol)
    for name, idx in coords:
        work = {k: v.copy() for k, v in base.items()}

        def at(value, name=name, idx=idx, work=work):
            work[name][idx] = value
            with no_grad():
                out = loss_fn({k: Tensor(v) for k, v in work.items()})
            return float(out.data)

        numeric = numeric_partial(at, float(base[name][idx]), step)
        if not math.isfinite(numeric):
            report.nonfinite.append((name, idx))
            continue
        err = rel_err(float(analytic[name][idx]), numeric)
        report.n_checked += 1
        if err > report.max_rel_err or report.worst is None:
            report.max_rel_err = max(err, report.max_rel_err)
            report.worst = (name, idx)
    return report
