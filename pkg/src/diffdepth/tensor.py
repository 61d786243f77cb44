"""Dense tensors with reverse-mode automatic differentiation on top of NumPy.

Every differentiable operation builds a node holding its parents and a
backward rule.  The graph is rebuilt on each forward pass and released once
the output tensor goes out of scope.

Broadcasting rule: elementwise binary ops (add, sub, mul, div, minimum)
follow NumPy broadcasting; their backward passes sum gradients back to each
operand's shape.  Every other op requires the exact shapes it documents.

Reductions used by the losses are means, so loss weights stay comparable
across resolutions.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "strict_mode",
    "grad_check",
    "GradCheckReport",
    "save_tensor",
    "load_tensor",
    "to_bytes",
    "from_bytes",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


_GRAD_ENABLED = True
_STRICT = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Raise ``NonFiniteError`` when any op receives NaN or inf input."""
    global _STRICT
    prev = _STRICT
    _STRICT = enabled
    try:
        yield
    finally:
        _STRICT = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item(): tensor has {self.size} elements")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{g}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``grad``.

        Intermediate gradients live only for the duration of the call, so
        calling twice on the same graph adds exactly the same amount twice.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward: loss must be scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return abs_(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(op: str, *arrays: np.ndarray) -> None:
    if _STRICT:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcast-compatible") from None
    _check(op, a.data, b.data)
    return a, b


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a Python scalar."""
    _check("scale", a.data)
    return _make("scale", a.data * k, (a,), lambda g: (g * k,))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def minimum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise minimum over a set of same-shape tensors.

    The subgradient goes to the first argmin on ties.
    """
    tensors = list(tensors)
    if not tensors:
        raise ValueError("minimum: empty tensor list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("minimum", shape, t.shape)
    _check("minimum", *(t.data for t in tensors))
    stacked = np.stack([t.data for t in tensors])
    idx = np.argmin(stacked, axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def bw(g):
        return tuple(np.where(idx == i, g, 0.0).astype(g.dtype) for i in range(len(tensors)))

    return _make("minimum", out, tensors, bw)


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------
def exp(a: Tensor) -> Tensor:
    _check("exp", a.data)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check("log", a.data)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    _check("sigmoid", a.data)
    x = a.data
    # split branches so neither exp overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def abs_(a: Tensor) -> Tensor:
    _check("abs", a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    _check("square", a.data)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    _check("sqrt", a.data)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi].

    Backward passes the gradient where lo < x < hi and blocks it elsewhere,
    including exactly at either bound.
    """
    _check("clamp", a.data)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(a.data, lo_, hi_)
    inside = (a.data > lo_) & (a.data < hi_)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    _check("relu", a.data)
    pos = a.data > 0
    return _make("relu", a.data * pos, (a,), lambda g: (g * pos,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    _check("elu", a.data)
    x = a.data
    neg_part = alpha * (np.exp(np.minimum(x, 0.0)) - 1.0)
    out = np.where(x > 0, x, neg_part)
    return _make("elu", out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    """Indexing with slices, ints or integer arrays (repeats accumulate)."""
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (default: channels of an NCHW batch)."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make("concat", out, tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check("matmul", a.data, b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# image ops (NCHW)
# ---------------------------------------------------------------------------
def _require_4d(op: str, a: Tensor) -> None:
    if a.ndim != 4:
        raise ShapeError(op, a.shape, detail="expected N x C x H x W")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with zero padding (default: 'same' for odd kernels)."""
    _require_4d("conv2d", x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="weight must be O x C x k x k")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias must be (O,)")
    _check("conv2d", x.data, w.data)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p = kh // 2 if padding is None else padding
    # channel-major layout so each conv is a single GEMM over the whole batch
    xt = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p))) if p else xt
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wm = w.data.reshape(o, -1)
    out = (wm @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _require_4d("upsample2x", x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample2x", out, (x,), bw)


def pad_reflect(x: Tensor, p: int = 1) -> Tensor:
    _require_4d("pad_reflect", x)
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
    h, w = x.shape[2:]

    def bw(g):
        gx = g[:, :, p : p + h, p : p + w].copy()
        # fold the mirrored borders back onto their source rows/cols
        for k in range(1, p + 1):
            gx[:, :, k, :] += g[:, :, p - k, p : p + w]
            gx[:, :, h - 1 - k, :] += g[:, :, p + h - 1 + k, p : p + w]
        for k in range(1, p + 1):
            gx[:, :, :, k] += g[:, :, p : p + h, p - k]
            gx[:, :, :, w - 1 - k] += g[:, :, p : p + h, p + w - 1 + k]
            # corners
            gx[:, :, k, k] += g[:, :, p - k, p - k]
            gx[:, :, k, w - 1 - k] += g[:, :, p - k, p + w - 1 + k]
            gx[:, :, h - 1 - k, k] += g[:, :, p + h - 1 + k, p - k]
            gx[:, :, h - 1 - k, w - 1 - k] += g[:, :, p + h - 1 + k, p + w - 1 + k]
        return (gx,)

    return _make("pad_reflect", out, (x,), bw)


def avg_pool3x3(x: Tensor) -> Tensor:
    """3x3 mean filter, stride 1, no padding (output shrinks by 2)."""
    _require_4d("avg_pool3x3", x)
    n, c, h, w = x.shape
    ho, wo = h - 2, w - 2
    if ho < 1 or wo < 1:
        raise ShapeError("avg_pool3x3", x.shape, detail="spatial size must be >= 3")
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            out += x.data[:, :, i : i + ho, j : j + wo]
    out /= 9.0

    def bw(g):
        gx = np.zeros_like(x.data)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gx[:, :, i : i + ho, j : j + wo] += g9
        return (gx,)

    return _make("avg_pool3x3", out, (x,), bw)


def diff_x(x: Tensor) -> Tensor:
    """Forward difference along width: x[..., 1:] - x[..., :-1]."""
    out = x.data[..., 1:] - x.data[..., :-1]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., 1:] += g
        gx[..., :-1] -= g
        return (gx,)

    return _make("diff_x", out, (x,), bw)


def diff_y(x: Tensor) -> Tensor:
    """Forward difference along height."""
    out = x.data[..., 1:, :] - x.data[..., :-1, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., 1:, :] += g
        gx[..., :-1, :] -= g
        return (gx,)

    return _make("diff_y", out, (x,), bw)


SAMPLE_BORDER_TOL = 1e-9


def bilinear_sample(src: Tensor, x: Tensor, y: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``src`` (N,C,H,W) at pixel coordinates ``x``, ``y`` (N,1,Ho,Wo).

    Corners falling outside the image contribute zero.  The returned mask
    (N,1,Ho,Wo) is 1 where 0 <= x <= W-1 and 0 <= y <= H-1 (up to
    ``SAMPLE_BORDER_TOL``), i.e. every corner carrying weight is inside.  Differentiable
    with respect to ``src`` and both coordinate maps.
    """
    _require_4d("bilinear_sample", src)
    if x.shape != y.shape or x.ndim != 4 or x.shape[1] != 1 or x.shape[0] != src.shape[0]:
        raise ShapeError("bilinear_sample", src.shape, x.shape, y.shape)
    _check("bilinear_sample", src.data, x.data, y.data)
    n, c, h, w = src.shape
    xs = x.data[:, 0]
    ys = y.data[:, 0]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = src.data.reshape(n, c, h * w)
    batch = np.arange(n)[:, None, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.where(inb, np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1), 0)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        vals = flat[batch, :, lin]  # (N, Ho, Wo, C)
        vals = np.moveaxis(vals, -1, 1) * inb[:, None]
        corners.append((lin, inb, wx, wy, dx, dy, vals))

    out = np.zeros((n, c) + xs.shape[1:], dtype=src.dtype)
    for lin, inb, wx, wy, dx, dy, vals in corners:
        out += (wx * wy)[:, None] * vals
    # coordinates a rounding error outside the border still count as inside;
    # the corner they lose carries weight below SAMPLE_BORDER_TOL
    tol = SAMPLE_BORDER_TOL
    mask = ((xs >= -tol) & (xs <= w - 1 + tol) & (ys >= -tol) & (ys <= h - 1 + tol))[:, None].astype(src.dtype)

    def bw(g):
        gsrc = gx = gy = None
        if src.requires_grad:
            gflat = np.zeros((n, c, h * w), dtype=src.dtype)
            for lin, inb, wx, wy, dx, dy, vals in corners:
                contrib = g * ((wx * wy) * inb)[:, None]
                for bi in range(n):
                    idx = lin[bi].reshape(-1)
                    for ci in range(c):
                        gflat[bi, ci] += np.bincount(idx, weights=contrib[bi, ci].reshape(-1), minlength=h * w)
            gsrc = gflat.reshape(src.shape)
        if x.requires_grad or y.requires_grad:
            gxa = np.zeros(xs.shape, dtype=src.dtype)
            gya = np.zeros(xs.shape, dtype=src.dtype)
            for lin, inb, wx, wy, dx, dy, vals in corners:
                gv = (g * vals).sum(axis=1)
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                gxa += gv * sx * wy
                gya += gv * sy * wx
            gx = gxa[:, None]
            gy = gya[:, None]
        return gsrc, gx, gy

    return _make("bilinear_sample", out, (src, x, y), bw), mask


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------
class GradCheckReport:
    """Outcome of comparing autodiff gradients with central differences.

    ``max_rel_error`` is ``max_i |auto_i - numeric_i| / max_i |numeric_i|``
    over the checked entries, so near-zero components are judged against
    the overall gradient scale instead of their own magnitude.
    """

    def __init__(self, max_abs_error: float, max_rel_error: float, tol: float, checked: int):
        self.max_abs_error = max_abs_error
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.checked = checked

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)

    def __bool__(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"GradCheckReport({status}, rel={self.max_rel_error:.3e}, "
            f"abs={self.max_abs_error:.3e}, tol={self.tol:g}, n={self.checked})"
        )


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    eps: float = 1e-6,
    max_entries: int | None = 64,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check ``f``'s autodiff gradient against central finite differences.

    ``f`` takes the input tensors and returns a scalar Tensor.  At most
    ``max_entries`` randomly chosen entries per input are perturbed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    out.backward()
    auto_all, num_all = [], []
    for t in inputs:
        auto = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                num_all.append((fp - fm) / (2 * eps))
                auto_all.append(auto.reshape(-1)[i])
    auto_arr = np.asarray(auto_all)
    num_arr = np.asarray(num_all)
    abs_err = float(np.max(np.abs(auto_arr - num_arr))) if auto_arr.size else 0.0
    scale_ = float(np.max(np.abs(num_arr))) if num_arr.size else 0.0
    rel = abs_err / scale_ if scale_ > 0 else abs_err
    return GradCheckReport(abs_err, rel, tol, int(auto_arr.size))


# ---------------------------------------------------------------------------
# binary blob format
# ---------------------------------------------------------------------------
MAGIC = b"DTNS"
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Serialize as: magic(4) | dtype u32 | rank u32 | dims u64[rank] | data.

    All integers and data are little-endian; data is row-major.
    """
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<II", _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor blob starting at ``offset``; return it and the end offset."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError("bad tensor blob magic")
    code, rank = struct.unpack_from("<II", buf, offset + 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated tensor blob")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
    return Tensor(arr), pos + nbytes


def save_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load_tensor(path: str | Path) -> Tensor:
    buf = Path(path).read_bytes()
    t, end = from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor blob")
    return t


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
