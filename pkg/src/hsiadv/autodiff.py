"""Reverse-mode automatic differentiation over dense numpy arrays.

Small, explicit engine: ops build a DAG of :class:`Tensor` nodes, and
``Tensor.backward()`` walks it once in reverse topological order, accumulating
gradients into ``requires_grad`` leaves.  Shapes are strict (the only
broadcasting allowed is scalar-with-tensor); there is no GPU path and no
higher-order differentiation.

Two precision modes are supported by construction: attack code builds float32
graphs, gradient-check tests build float64 graphs.  Binary ops require both
operands to share a dtype so a precision mix never happens silently.

:func:`finite_diff_grad` is the independent oracle used by the test suite to
cross-check every backward rule.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "add", "sub", "mul", "scalar_mul", "matmul",
    "conv2d", "relu", "maxpool2d", "avgpool2d",
    "flatten", "reshape", "linear", "softmax_cross_entropy",
    "sum", "mean", "abs", "square", "div_stable",
    "channel_variance", "stack",
    "finite_diff_grad", "finite_diff_coord",
]


class Tensor:
    """Dense n-d array plus an optional gradient record.

    ``data`` is a numpy array (float32 or float64).  Wrapping does not copy;
    callers must not mutate an array after handing it to a Tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reverse pass ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf.

        Repeated calls keep accumulating until ``zero_grad`` is invoked on the
        leaves.  ``self`` must be scalar.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        work: list[tuple[Tensor, bool]] = [(self, False)]
        while work:
            node, expanded = work.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            work.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    work.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            else:
                node.grad = np.array(g) if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Same shape, or one side scalar (0-d / size 1).
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back onto a scalar-shaped operand if needed."""
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        out = t.data + t.dtype.type(s)
        return Tensor._make(out, (t,), lambda g: (g,))
    a, b = _astensor(a), _astensor(b)
    _check_same_dtype(a, b, "add")
    _binary_shapes(a, b, "add")
    out = a.data + b.data
    return Tensor._make(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _astensor(a)
        return Tensor._make(a.data - a.dtype.type(b), (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        b = _astensor(b)
        return Tensor._make(b.dtype.type(a) - b.data, (b,), lambda g: (-g,))
    a, b = _astensor(a), _astensor(b)
    _check_same_dtype(a, b, "sub")
    _binary_shapes(a, b, "sub")
    out = a.data - b.data
    return Tensor._make(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        t, s = (a, b) if isinstance(a, Tensor) else (b, a)
        return scalar_mul(t, s)
    a, b = _astensor(a), _astensor(b)
    _check_same_dtype(a, b, "mul")
    _binary_shapes(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
    )


def scalar_mul(x, s: float) -> Tensor:
    x = _astensor(x)
    c = x.dtype.type(s)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors the op roster name
    x = _astensor(x)
    sign = np.sign(x.data)
    return Tensor._make(np.absolute(x.data), (x,), lambda g: (g * sign,))


def square(x) -> Tensor:
    x = _astensor(x)
    xd = x.data
    return Tensor._make(xd * xd, (x,), lambda g: (g * (2.0 * xd),))


def div_stable(a, b, o: float) -> Tensor:
    """Elementwise a / (b + o).  The stabiliser o must be positive."""
    if not o > 0:
        raise ValueError(f"div_stable needs o > 0, got {o}")
    a, b = _astensor(a), _astensor(b)
    _check_same_dtype(a, b, "div_stable")
    _binary_shapes(a, b, "div_stable")
    denom = b.data + a.dtype.type(o)
    out = a.data / denom
    ad = a.data

    def vjp(g):
        ga = _reduce_to(g / denom, a.shape) if a.requires_grad else None
        gb = _reduce_to(-g * ad / (denom * denom), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _astensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g, dtype=x.dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(ge, shape)),)

    return Tensor._make(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _astensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    count = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def vjp(g):
        gs = g / x.dtype.type(count)
        if axis is None:
            return (np.full(shape, gs, dtype=x.dtype),)
        ge = gs if keepdims else np.expand_dims(gs, axis)
        return (np.ascontiguousarray(np.broadcast_to(ge, shape)),)

    return Tensor._make(np.asarray(out), (x,), vjp)


def channel_variance(x) -> Tensor:
    """Population variance over the last axis: (..., C, D) -> (..., C).

    Divides by D (not D - 1).
    """
    x = _astensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"channel_variance needs at least 2 dims, got shape {x.shape}")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    out = (centered * centered).mean(axis=-1)

    def vjp(g):
        return (g[..., None] * centered * x.dtype.type(2.0 / d),)

    return Tensor._make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _astensor(x)
    out = x.data.reshape(shape)
    orig = x.shape
    return Tensor._make(out, (x,), lambda g: (g.reshape(orig),))


def flatten(x) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    x = _astensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten needs a batch dimension, got shape {x.shape}")
    return reshape(x, (x.shape[0], -1))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack of zero tensors")
    ts = [_astensor(t) for t in tensors]
    shape0, dtype0 = ts[0].shape, ts[0].dtype
    for t in ts[1:]:
        if t.shape != shape0 or t.dtype != dtype0:
            raise ShapeError("stack: all tensors must share shape and dtype")
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(a) for a in np.moveaxis(g, axis, 0))

    return Tensor._make(out, tuple(ts), vjp)


# ---------------------------------------------------------------------------
# linear algebra / NN layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _astensor(a), _astensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """x (B, D) @ w (D, K) + b (K,)."""
    x, w = _astensor(x), _astensor(w)
    _check_same_dtype(x, w, "linear")
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    out = x.data @ w.data
    parents: tuple[Tensor, ...]
    if b is not None:
        b = _astensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor._make(out, parents, vjp)


def relu(x) -> Tensor:
    x = _astensor(x)
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, x.dtype.type(0)), (x,), lambda g: (g * pos,))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """x (B, Cin, H, W) * w (Cout, Cin, kh, kw) [+ b (Cout,)]."""
    x, w = _astensor(x), _astensor(w)
    _check_same_dtype(x, w, "conv2d")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} * {w.shape}")
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    if h + 2 * pad < kh or wid + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = w.data.reshape(cout, -1)
    out = w2 @ cols  # (B, Cout, L)
    parents: tuple[Tensor, ...]
    if b is not None:
        b = _astensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data[:, None]
        parents = (x, w, b)
    else:
        parents = (x, w)
    out = out.reshape(bsz, cout, ho, wo)

    def vjp(g):
        g2 = g.reshape(bsz, cout, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = w2.T @ g2  # (B, C*kh*kw, L)
            d6 = dcols.reshape(bsz, cin, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += d6[:, :, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp
            gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gflat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(cout, -1)
            cflat = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(-1, cols.shape[1])
            gw = (gflat @ cflat).reshape(w.shape)
        if b is None:
            return gx, gw
        if b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    return Tensor._make(out, parents, vjp)


def maxpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k max pooling (stride k). Dims must divide by k."""
    x = _astensor(x)
    bsz, c, h, w = _pool_dims(x, k)
    ho, wo = h // k, w // k
    tiles = x.data.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, ho, wo, k * k)
    idx = tiles.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        dt = np.zeros_like(tiles)
        np.put_along_axis(dt, idx[..., None], g[..., None], axis=-1)
        dx = dt.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)
        return (np.ascontiguousarray(dx),)

    return Tensor._make(np.ascontiguousarray(out), (x,), vjp)


def avgpool2d(x, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride k)."""
    x = _astensor(x)
    bsz, c, h, w = _pool_dims(x, k)
    ho, wo = h // k, w // k
    out = x.data.reshape(bsz, c, ho, k, wo, k).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (k * k))

    def vjp(g):
        dx = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        return (dx,)

    return Tensor._make(out, (x,), vjp)


def _pool_dims(x: Tensor, k: int):
    if x.data.ndim != 4:
        raise ShapeError(f"pooling expects (B, C, H, W), got {x.shape}")
    bsz, c, h, w = x.shape
    if k <= 0 or h % k or w % k:
        raise ShapeError(f"pool size {k} must divide spatial dims {h}x{w}")
    return bsz, c, h, w


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy between softmax(logits) (B, K) and integer targets (B,)."""
    logits = _astensor(logits)
    t = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.shape}")
    bsz, k = logits.shape
    if t.shape != (bsz,):
        raise ShapeError(f"targets shape {t.shape} != ({bsz},)")
    if t.min() < 0 or t.max() >= k:
        raise ShapeError(f"targets out of range for K={k}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(bsz)
    loss = np.asarray(-logp[rows, t].mean())

    def vjp(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return (p * (g / logits.dtype.type(bsz)),)

    return Tensor._make(loss, (logits,), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    Independent of the reverse pass: evaluates ``f`` 2n times.  Use float64
    inputs for meaningful tolerances.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(x.data)
    out = np.zeros(base.shape, dtype=base.dtype)
    flat_out = out.reshape(-1)
    for i in range(base.size):
        flat_out[i] = finite_diff_coord(f, x, i, step)
    return Tensor(out)


def finite_diff_coord(f: Callable[[Tensor], Tensor], x: Tensor, index, step: float = 1e-4) -> float:
    """Central difference of scalar f along one coordinate of x.

    ``index`` is a flat index or a tuple index into ``x``.
    """
    base = x.data
    plus = np.array(base)
    minus = np.array(base)
    if isinstance(index, tuple):
        plus[index] += step
        minus[index] -= step
    else:
        plus.reshape(-1)[index] += step
        minus.reshape(-1)[index] -= step
    fp = float(f(Tensor(plus)).data)
    fm = float(f(Tensor(minus)).data)
    return (fp - fm) / (2.0 * step)
