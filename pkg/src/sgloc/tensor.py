"""Dense tensors with reverse-mode automatic differentiation.

A small tape-based engine over numpy arrays: every differentiable op returns
a Tensor that remembers its parents and a closure computing parent gradients.
`backward()` walks the tape once and returns a GradientMap for the leaves.

Layout convention used throughout the package: feature maps of shape
d x w x h are flattened to (w*h) x d matrices with spatial index s = y*w + x
selecting row s.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class PrecisionError(RuntimeError):
    """Raised when an operation requires a precision that is not active."""


class NonFiniteError(RuntimeError):
    """Raised when a NaN/inf value reaches a place that must stay finite."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = os.environ.get("SGL_PRECISION", "f32")
if _precision not in _DTYPES:
    raise PrecisionError(f"SGL_PRECISION must be f32 or f64, got {_precision!r}")


def set_precision(name: str) -> None:
    """Select the global scalar precision: 'f32' (training) or 'f64' (verification)."""
    global _precision
    if name not in _DTYPES:
        raise PrecisionError(f"unknown precision {name!r}; expected 'f32' or 'f64'")
    _precision = name


def get_precision() -> str:
    return _precision


def current_dtype() -> type:
    return _DTYPES[_precision]


class Tensor:
    """A rank-<=4 dense array, optionally tracked on the gradient tape.

    Data is never mutated by ops; the optimizer updates leaf `.data` in place
    between passes, which is safe because tapes do not outlive a step.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=current_dtype())
        if arr.ndim > 4:
            raise ShapeError(f"tensors support rank <= 4, got shape {arr.shape}")
        if arr.size == 0:
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bw: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=current_dtype()), requires_grad)


def _make(arr: np.ndarray, parents: tuple, bw: Callable) -> Tensor:
    """Wrap an op result; drops the tape when no parent needs gradients."""
    t = Tensor.__new__(Tensor)
    t.data = arr
    rg = False
    for p in parents:
        if p.requires_grad:
            rg = True
            break
    t.requires_grad = rg
    if rg:
        t._parents = parents
        t._bw = bw
    else:
        t._parents = ()
        t._bw = None
    return t


def _as_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise quotient of equal-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) = 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # subgradient 0 at 0
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max against an equal-shape tensor or a scalar; ties get zero gradient."""
    b = _as_const(b, a)
    if b.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = np.maximum(ad, bd)
    ma = ad > bd
    mb = bd > ad
    return _make(out, (a, b), lambda g: (g * ma, _collapse(g * mb, bd.shape)))


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min against an equal-shape tensor or a scalar; ties get zero gradient."""
    b = _as_const(b, a)
    if b.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = np.minimum(ad, bd)
    ma = ad < bd
    mb = bd < ad
    return _make(out, (a, b), lambda g: (g * ma, _collapse(g * mb, bd.shape)))


def _collapse(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)  # scalar operand


# ---------------------------------------------------------------------------
# linear algebra / structure ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _make(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank-2, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine terms)."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects rank-2, got {x.shape}")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        g_mean = g.mean(axis=1, keepdims=True)
        proj = (g * out).mean(axis=1, keepdims=True)
        return ((g - g_mean - out * proj) * inv,)

    return _make(out, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, computed with row-max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank-2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`; the gradient splits back to the inputs."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    if len(tensors) == 1:
        t = tensors[0]
        return _make(t.data, (t,), lambda g: (g,))
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim or any(
            i != axis and t.shape[i] != base.shape[i] for i in range(t.ndim)
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), bw)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    if a.ndim != 2 or not (0 <= j0 < j1 <= a.shape[1]):
        raise ShapeError(f"slice_cols({j0},{j1}) invalid for shape {a.shape}")
    out = a.data[:, j0:j1].copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, j0:j1] = g
        return (full,)

    return _make(out, (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by integer index; the gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects rank-2, got {a.shape}")
    out = a.data[idx].copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-k vector to every row of an n x k matrix."""
    if a.ndim != 2 or b.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {a.shape} and {b.shape} incompatible")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum of a nonempty list (fixed order for determinism)."""
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return acc


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max.

    Accepts d x w x h (channels first) or the flattened (w*h) x d form; returns
    a length-d vector. Gradient routes to the first argmax in row-major order.
    """
    if x.ndim == 3:
        d = x.shape[0]
        flat = x.data.reshape(d, -1)
        idx = flat.argmax(axis=1)
        out = flat[np.arange(d), idx]
        shape = x.shape

        def bw(g):
            full = np.zeros((d, flat.shape[1]), dtype=g.dtype)
            full[np.arange(d), idx] = g
            return (full.reshape(shape),)

        return _make(out, (x,), bw)
    if x.ndim == 2:
        s, d = x.shape
        idx = x.data.argmax(axis=0)
        out = x.data[idx, np.arange(d)]

        def bw2(g):
            full = np.zeros((s, d), dtype=g.dtype)
            full[idx, np.arange(d)] = g
            return (full,)

        return _make(out, (x,), bw2)
    raise ShapeError(f"global_max_pool expects rank 2 or 3, got {x.shape}")


# ---------------------------------------------------------------------------
# parameters and backward pass


@dataclass
class Param:
    """A named trainable leaf. Names are dotted paths, unique within a model."""

    name: str
    value: Tensor

    def __post_init__(self):
        self.value.requires_grad = True


class GradientMap:
    """Gradients keyed by parameter identity; absent entries read as zeros."""

    def __init__(self, grads: dict):
        self._grads = grads  # Tensor -> ndarray

    def of(self, t) -> Tensor:
        if isinstance(t, Param):
            t = t.value
        g = self._grads.get(t)
        if g is None:
            return Tensor(np.zeros_like(t.data))
        return Tensor(g)

    def raw(self, t) -> np.ndarray | None:
        if isinstance(t, Param):
            t = t.value
        return self._grads.get(t)

    def __len__(self) -> int:
        return len(self._grads)


def _topo(root: Tensor) -> list:
    order = []
    seen = {id(root)}
    stack = [(root, 0)]
    while stack:
        node, i = stack.pop()
        parents = node._parents
        while i < len(parents):
            p = parents[i]
            if p.requires_grad and p._parents and id(p) not in seen:
                seen.add(id(p))
                stack.append((node, i + 1))
                stack.append((p, 0))
                break
            i += 1
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> GradientMap:
    """Reverse-mode sweep from a scalar loss; returns gradients for all
    reachable requires_grad leaves."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict = {loss: np.ones_like(loss.data)}
    if not loss.requires_grad:
        return GradientMap({})
    for node in reversed(_topo(loss)):
        g = grads.pop(node, None)
        if g is None:
            continue
        if not node._parents:
            grads[node] = g  # leaf: keep
            continue
        pgrads = node._bw(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p)
            if acc is None:
                grads[p] = pg
            else:
                grads[p] = acc + pg
    leaf_grads = {t: g for t, g in grads.items() if not t._parents and t.requires_grad}
    return GradientMap(leaf_grads)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable,
    eps: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Central-difference gradient oracle.

    `f` re-runs the forward pass on the current parameter values. Each sampled
    coordinate is nudged by +/- eps; the numeric slope is compared against
    backward()'s gradient. Returns the max relative error, with relative error
    |a - b| / max(1e-8, |a| + |b|). Requires 64-bit precision.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if get_precision() != "f64":
        raise PrecisionError("finite_difference_check requires f64 precision")
    tensors = [p.value if isinstance(p, Param) else p for p in params]
    gm = backward(f())
    coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in pick]
    worst = 0.0
    for i, j in coords:
        data = tensors[i].data.reshape(-1)
        old = data[j]
        data[j] = old + eps
        up = f().item()
        data[j] = old - eps
        down = f().item()
        data[j] = old
        numeric = (up - down) / (2.0 * eps)
        analytic = float(gm.of(tensors[i]).data.reshape(-1)[j])
        err = abs(numeric - analytic) / max(1e-8, abs(numeric) + abs(analytic))
        if err > worst:
            worst = err
    return worst
