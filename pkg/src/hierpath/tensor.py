"""Dense tensors with reverse-mode differentiation.

Every value is a double-precision numpy array wrapped in a :class:`Tensor`.
Operations record closures on a computation graph; calling ``backward()`` on a
scalar result accumulates gradients into every reachable tensor that has
``requires_grad`` set.  A central finite-difference oracle is provided for
gradient checking.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, NumericError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "concat",
    "mode_k_product",
    "conv2d",
    "pool2d",
    "finite_diff_grad",
    "write_tensor",
    "read_tensor",
]


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager suspending graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Tensor:
    """A dense N-dimensional array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        """Accumulated gradient; zeros for an untouched trainable tensor."""
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def _accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def _make(self, data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED[0] and any(_needs_grad(p) for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return self._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)

        def backward(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return self._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim > 2 or b.ndim > 2:
            raise DimensionError(f"matmul supports rank <= 2, got {a.ndim} and {b.ndim}")
        if a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

        def backward(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if a.ndim == 1:
                return g @ b.T, np.outer(a, g)
            if b.ndim == 1:
                return np.outer(g, b), a.T @ g
            return g @ b.T, a.T @ g

        return self._make(a @ b, (self, other), backward)

    def sum(self, axis=None, keepdims=False):
        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.shape),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._make(self.data.reshape(shape), (self,),
                          lambda g: (g.reshape(self.shape),))

    def vec(self):
        """Row-major flattening to a rank-1 tensor."""
        return self.reshape(-1)

    # -- nonlinearities ------------------------------------------------------

    def sigmoid(self):
        y = _sigmoid(self.data)
        return self._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def tanh(self):
        y = np.tanh(self.data)
        return self._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        mask = self.data > 0
        return self._make(np.where(mask, self.data, 0.0), (self,),
                          lambda g: (g * mask,))

    def softplus(self):
        y = np.logaddexp(0.0, self.data)
        sig = _sigmoid(self.data)
        return self._make(y, (self,), lambda g: (g * sig,))

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return self._make(y, (self,), backward)

    def log_softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - lse
        soft = np.exp(y)

        def backward(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return self._make(y, (self,), backward)

    # -- reverse accumulation ------------------------------------------------

    def backward(self):
        """Reverse-accumulate gradients from a scalar result."""
        if self.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {self.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in order:
            if node._backward is None:
                continue
            grads = node._backward(node._grad)
            for parent, g in zip(node._parents, grads):
                if _needs_grad(parent):
                    parent._accumulate(g)
            if not node.requires_grad:
                node._grad = None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._parents != ()


def _toposort(root: Tensor) -> list:
    """Nodes in reverse topological order, iterative to spare the stack."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


# -- structural ops ----------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _GRAD_ENABLED[0] and any(_needs_grad(t) for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)
        out._backward = backward
    return out


def mode_k_product(t: Tensor, u: Tensor, k: int) -> Tensor:
    """Contract axis ``k`` (1-based) of ``t`` with the columns of matrix ``u``."""
    t, u = Tensor._lift(t), Tensor._lift(u)
    if u.data.ndim != 2:
        raise DimensionError(f"mode-{k} factor must be a matrix, got rank {u.data.ndim}")
    if not 1 <= k <= t.data.ndim:
        raise DimensionError(f"axis {k} out of range for rank-{t.data.ndim} tensor")
    ax = k - 1
    if u.shape[1] != t.shape[ax]:
        raise DimensionError(
            f"mode-{k} mismatch: factor has {u.shape[1]} columns but axis {k} "
            f"has extent {t.shape[ax]}")

    out_data = np.moveaxis(np.tensordot(u.data, t.data, axes=([1], [ax])), 0, ax)

    def backward(g):
        gt = np.moveaxis(np.tensordot(u.data.T, np.moveaxis(g, ax, 0), axes=([1], [0])), 0, ax)
        g0 = np.moveaxis(g, ax, 0).reshape(u.shape[0], -1)
        t0 = np.moveaxis(t.data, ax, 0).reshape(t.shape[ax], -1)
        gu = g0 @ t0.T
        return gt, gu

    return t._make(out_data, (t, u), backward)


def _windows(x: np.ndarray, f: int, g: int) -> np.ndarray:
    """View of all (f x f) windows at stride g: (B, D, OW, OH, f, f)."""
    b, d, w, h = x.shape
    ow, oh = (w - f) // g + 1, (h - f) // g + 1
    sb, sd, sw, sh = x.strides
    return as_strided(x, shape=(b, d, ow, oh, f, f),
                      strides=(sb, sd, sw * g, sh * g, sw, sh))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """Cross-correlation of a D x W x H map (or a batch of them) with K filters."""
    x, w = Tensor._lift(x), Tensor._lift(w)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects rank-3/4 input and rank-4 filters, got {x.shape} and {w.shape}")
    b, d, wi, hi = xd.shape
    k, dw, f, f2 = w.shape
    if f != f2:
        raise DimensionError(f"filters must be square, got {f}x{f2}")
    if dw != d:
        raise DimensionError(f"filter depth {dw} does not match input depth {d}")
    g, z = int(stride), int(zero_pad)
    for name, extent in (("width", wi), ("height", hi)):
        if (extent - f + 2 * z) % g != 0 or extent - f + 2 * z < 0:
            raise DimensionError(
                f"conv2d {name}: ({extent} - {f} + 2*{z}) not divisible by stride {g}")
    ow, oh = (wi - f + 2 * z) // g + 1, (hi - f + 2 * z) // g + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (z, z), (z, z))) if z else xd
    cols = _windows(xp, f, g).transpose(0, 2, 3, 1, 4, 5).reshape(b * ow * oh, d * f * f)
    wmat = w.data.reshape(k, d * f * f)
    out_data = (cols @ wmat.T).reshape(b, ow, oh, k).transpose(0, 3, 1, 2)
    if not batched:
        out_data = out_data[0]

    def backward(grad):
        gout = grad if batched else grad[None]
        gmat = gout.transpose(0, 2, 3, 1).reshape(b * ow * oh, k)
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(b, ow, oh, d, f, f).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for fw in range(f):
            for fh in range(f):
                gxp[:, :, fw:fw + g * ow:g, fh:fh + g * oh:g] += gcols[..., fw, fh]
        gx = gxp[:, :, z:z + wi, z:z + hi] if z else gxp
        return (gx if batched else gx[0]), gw

    return x._make(out_data, (x, w), backward)


def pool2d(x: Tensor, window: int, stride: int, kind: str = "max") -> Tensor:
    """Per-window max or mean over a D x W x H map (or a batch of them)."""
    if kind not in ("max", "avg"):
        raise UsageError(f"unknown pooling kind {kind!r}")
    x = Tensor._lift(x)
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise DimensionError(f"pool2d expects a rank-3/4 input, got shape {x.shape}")
    b, d, wi, hi = xd.shape
    f, g = int(window), int(stride)
    if f > wi or f > hi:
        raise DimensionError(f"pooling window {f} exceeds input extent {min(wi, hi)}")
    for name, extent in (("width", wi), ("height", hi)):
        if (extent - f) % g != 0:
            raise DimensionError(
                f"pool2d {name}: ({extent} - {f}) not divisible by stride {g}")
    ow, oh = (wi - f) // g + 1, (hi - f) // g + 1
    win = _windows(xd, f, g)

    if kind == "avg":
        out_data = win.mean(axis=(-2, -1))

        def backward(grad):
            gout = grad if batched else grad[None]
            gx = np.zeros_like(xd)
            gshare = gout / (f * f)
            for fw in range(f):
                for fh in range(f):
                    gx[:, :, fw:fw + g * ow:g, fh:fh + g * oh:g] += gshare
            return (gx if batched else gx[0],)
    else:
        flat = win.reshape(b, d, ow, oh, f * f)
        am = flat.argmax(axis=-1)  # first maximal index wins ties
        out_data = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

        def backward(grad):
            gout = grad if batched else grad[None]
            gx = np.zeros_like(xd)
            bi, di, owi, ohi = np.indices((b, d, ow, oh))
            wi_idx = owi * g + am // f
            hi_idx = ohi * g + am % f
            np.add.at(gx, (bi, di, wi_idx, hi_idx), gout)
            return (gx if batched else gx[0],)

    out_data = out_data if batched else out_data[0]
    return x._make(out_data, (x,), backward)


# -- gradient oracle ---------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a tensor-to-scalar function at ``x``."""

    def evaluate(arr):
        out = f(Tensor(arr))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(val):
            raise NumericError(f"function returned non-finite value {val}")
        return val

    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = base.copy()
        plus[idx] += step
        minus = base.copy()
        minus[idx] -= step
        grad[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    return grad


# -- serialization -----------------------------------------------------------

_MAGIC = b"HPT1"


def write_tensor(path, t: Tensor):
    """Flat binary container: magic, u32 rank, u64 extents, f64 row-major data."""
    data = np.ascontiguousarray(t.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def read_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise UsageError(f"bad tensor file magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return Tensor(np.array(data))
