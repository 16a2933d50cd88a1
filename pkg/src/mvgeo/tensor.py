"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded on it
whenever at least one input requires a gradient.  ``Tape.backward`` walks the
records in reverse order and accumulates into the ``grad`` of leaf tensors.
Outside a tape nothing is recorded, which is how inference runs.

Broadcasting is deliberately narrow: an elementwise binary op accepts equal
shapes, a 0-d operand, or an operand whose shape is a suffix of the other
(broadcast over leading batch dimensions only).  Anything else is an explicit
:func:`broadcast_to`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradCheckError",
    "active_tape",
    "tensor",
    "record",
    "matmul",
    "softmax",
    "layernorm",
    "concat",
    "stack",
    "broadcast_to",
    "where",
    "norm",
    "conv2d",
    "bilinear_sample",
    "sample_map",
    "resize_bilinear",
    "resize_matrix",
    "grad_check",
]


class ShapeError(ValueError):
    """Incompatible operand shapes."""


class GradCheckError(RuntimeError):
    """Non-finite values met while checking gradients."""


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


@dataclass(eq=False)
class _Record:
    out: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Use as a context manager.  ``backward`` may be called repeatedly; each call
    adds the full gradient into the leaves again.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()

    def backward(self, out: "Tensor", grad: np.ndarray | None = None) -> None:
        if grad is None:
            if out.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
            grad = np.ones_like(out.data)
        grad = np.asarray(grad, dtype=out.data.dtype)
        if out._record is None:
            if out.requires_grad:
                out._accumulate(grad)
            return
        pending: dict[int, np.ndarray] = {id(out): grad}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._record is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


class Tensor:
    """N-d float array with an optional gradient.

    ``data`` is a C-contiguous numpy array, so its flat view is the row-major
    layout of ``shape``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        arr = np.asarray(arr, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype).reshape(self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._record is None:
            raise RuntimeError("tensor was not produced under an active tape")
        self._record.tape.backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, "add")

    def __radd__(self, other):
        return _binary(other, self, "add")

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(other, self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    def __rmul__(self, other):
        return _binary(other, self, "mul")

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(other, self, "div")

    def __neg__(self):
        return record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        x = self.data
        return record(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self.data
        out = x[idx]
        basic = _is_basic_index(idx)

        def back(g):
            full = np.zeros_like(x)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return record(out, (self,), back)

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return record(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return record(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise -------------------------------------------------------
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return record(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return record(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return record(y, (self,), lambda g: (g * 0.5 / y,))

    def square(self) -> "Tensor":
        x = self.data
        return record(x * x, (self,), lambda g: (2.0 * g * x,))

    def abs(self) -> "Tensor":
        x = self.data
        return record(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return record(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.data)
        return record(y, (self,), lambda g: (g * y * (1.0 - y),))

    def softplus(self) -> "Tensor":
        x = self.data
        return record(np.logaddexp(0.0, x), (self,), lambda g: (g * _sigmoid(x),))

    def relu(self) -> "Tensor":
        x = self.data
        return record(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),))

    def gelu(self) -> "Tensor":
        # tanh approximation; smooth everywhere, which finite-difference checks need
        x = self.data
        c = np.sqrt(2.0 / np.pi).astype(x.dtype)
        inner = c * (x + 0.044715 * (x * x * x))
        th = np.tanh(inner)
        y = 0.5 * x * (1.0 + th)

        def back(g):
            dinner = c * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

        return record(y, (self,), back)


# ---------------------------------------------------------------------------
# construction helpers


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def record(out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap ``out`` as a tensor and log ``backward`` on the active tape.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input.  This is the extension point for fused primitives.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs, dtype=out.dtype if out.dtype in (np.float32, np.float64) else None)
    if needs:
        rec = _Record(res, inputs, backward, tape)
        res._record = rec
        tape.records.append(rec)
    return res


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading dimensions")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _binary(a, b, op: str) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    a = _as_tensor(a, like)
    b = _as_tensor(b, like)
    _check_broadcast(a.shape, b.shape, op)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        out = x + y
        back = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif op == "sub":
        out = x - y
        back = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif op == "mul":
        out = x * y
        back = lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb))
    elif op == "div":
        out = x / y
        back = lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * x / (y * y), sb))
    else:  # pragma: no cover
        raise ValueError(op)
    return record(out, (a, b), back)


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    """Batched matrix product; the right operand may be a plain matrix."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape

    def back(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _reduce_to(ga, sa), _reduce_to(gb, sb)

    return record(x @ y, (a, b), back)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: feature size {d} vs gain {gain.shape} / bias {bias.shape}")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.data
    out = xhat * gv + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return record(out, (x, gain, bias), back)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm whose gradient is defined as zero at the origin."""
    xv = x.data
    n = np.sqrt((xv * xv).sum(axis=axis))

    def back(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * xv,)

    return record(n, (x,), back)


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t, tensors[0] if isinstance(tensors[0], Tensor) else None) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(tensors), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t, tensors[0] if isinstance(tensors[0], Tensor) else None) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(out, tuple(tensors), back)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast following numpy rules (size-1 axes may expand)."""
    src = x.shape
    out = np.broadcast_to(x.data, shape).copy()

    def back(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return record(out, (x,), back)


def where(cond: np.ndarray, a, b) -> Tensor:
    like = a if isinstance(a, Tensor) else b
    a = _as_tensor(a, like)
    b = _as_tensor(b, like)
    cond = np.asarray(cond, dtype=bool)
    if not (cond.shape == a.shape == b.shape):
        raise ShapeError(f"where: condition {cond.shape}, operands {a.shape} and {b.shape}")
    out = np.where(cond, a.data, b.data)
    return record(out, (a, b), lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------------------
# image ops


def _im2col(x: np.ndarray, pad: int, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw) patch matrix."""
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Stride-1 2-D convolution, ``x`` (B, Cin, H, W), ``weight`` (Cout, Cin, k, k)."""
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    pad = kh // 2 if padding is None else padding
    if 2 * pad != kh - 1 or kh != kw:
        raise ShapeError("conv2d supports square odd kernels with 'same' padding only")
    Ho, Wo = H, W
    cols = _im2col(x.data, pad, kh, kw)
    wmat = weight.data.reshape(cout, -1)
    wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1).T
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        # input gradient = full correlation of g with the flipped kernel
        gx = _im2col(g, kh - 1 - pad, kh, kw) @ wflip
        gx = gx.reshape(B, H, W, cin).transpose(0, 3, 1, 2)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(np.ascontiguousarray(out), inputs, back)


def _bilinear_weights(pts: np.ndarray, H: int, W: int):
    x = pts[..., 0]
    y = pts[..., 1]
    xc = np.clip(x, 0.0, W - 1)
    yc = np.clip(y, 0.0, H - 1)
    # NaN coordinates index pixel 0 but keep NaN weights, so the NaN propagates
    x0 = np.minimum(np.floor(np.nan_to_num(xc)), max(W - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(np.nan_to_num(yc)), max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (xc - x0).astype(pts.dtype)
    wy = (yc - y0).astype(pts.dtype)
    inside_x = (x >= 0) & (x <= W - 1)
    inside_y = (y >= 0) & (y <= H - 1)
    return x0, x1, y0, y1, wx, wy, inside_x, inside_y


def sample_map(maps: Tensor, pts: Tensor) -> Tensor:
    """Batched bilinear sampling.

    ``maps`` (B, C, H, W), ``pts`` (B, P, 2) continuous (x, y) pixel coordinates
    where pixel (i, j) sits at (x=j, y=i).  Returns (B, P, C).  Points outside
    the image are clamped to the border; the gradient w.r.t. a clamped
    coordinate is zero.
    """
    pts = _as_tensor(pts, maps)
    B, C, H, W = maps.shape
    if pts.ndim != 3 or pts.shape[0] != B or pts.shape[2] != 2:
        raise ShapeError(f"sample_map: maps {maps.shape} vs points {pts.shape}")
    m = maps.data
    x0, x1, y0, y1, wx, wy, in_x, in_y = _bilinear_weights(pts.data, H, W)
    b = np.arange(B)[:, None]
    v00 = m[b, :, y0, x0]  # (B, P, C)
    v01 = m[b, :, y0, x1]
    v10 = m[b, :, y1, x0]
    v11 = m[b, :, y1, x1]
    wx_ = wx[..., None]
    wy_ = wy[..., None]
    out = ((1 - wx_) * (1 - wy_) * v00 + wx_ * (1 - wy_) * v01
           + (1 - wx_) * wy_ * v10 + wx_ * wy_ * v11)

    def back(g):
        gm = np.zeros_like(m)
        bb = np.broadcast_to(b, x0.shape)
        # gm[b, :, y, x] with advanced indices puts the channel axis last
        for yy, xx, w in ((y0, x0, (1 - wx_) * (1 - wy_)), (y0, x1, wx_ * (1 - wy_)),
                          (y1, x0, (1 - wx_) * wy_), (y1, x1, wx_ * wy_)):
            np.add.at(gm.transpose(0, 2, 3, 1), (bb, yy, xx), g * w)
        dx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * g
        dy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * g
        gp = np.stack([dx.sum(-1) * in_x, dy.sum(-1) * in_y], axis=-1).astype(m.dtype)
        return gm, gp

    return record(out, (maps, pts), back)


def bilinear_sample(fmap: Tensor, pt) -> Tensor:
    """Sample a (C, H, W) map at one continuous (x, y) location; returns (C,)."""
    pt = _as_tensor(pt, fmap)
    C, H, W = fmap.shape
    out = sample_map(fmap.reshape(1, C, H, W), pt.reshape(1, 1, 2))
    return out.reshape(C)


def resize_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation matrix, half-pixel aligned, clamped."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - w)
    np.add.at(A, (rows, hi), w)
    return A


def resize_bilinear(x: Tensor, H: int, W: int) -> Tensor:
    """Resize (B, C, h, w) to (B, C, H, W) as two constant matrix products."""
    h, w = x.shape[-2:]
    if (h, w) == (H, W):
        return x
    Aw = resize_matrix(W, w, x.dtype)
    Ah = resize_matrix(H, h, x.dtype)
    y = matmul(x, Tensor(Aw.T))  # (..., h, W)
    y = matmul(y.swapaxes(-1, -2), Tensor(Ah.T))  # (..., W, H)
    return y.swapaxes(-1, -2)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    abs_floor: float = 0.0,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar from the current parameter values on every call.
    ``max_entries`` caps the coordinates probed per parameter (drawn with
    ``seed``); with a cap, one random-direction derivative per parameter is
    also compared so that every coordinate contributes.  The relative error of
    a pair (a, n) is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.grad = None
    with Tape() as tape:
        out = f()
        base = out.item()
        if not np.isfinite(base):
            raise GradCheckError(f"non-finite function value {base}")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise GradCheckError(f"non-finite function value {v} during probing")
        return v

    def rel(a: float, n: float) -> float:
        den = max(abs(a), abs(n), abs_floor)
        return 0.0 if den == 0.0 else abs(a - n) / den

    worst = 0.0
    for p, ga in zip(params, analytic):
        if not np.all(np.isfinite(ga)):
            raise GradCheckError(f"non-finite analytic gradient for {p.name or p.shape}")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            worst = max(worst, rel(float(ga.reshape(-1)[i]), (fp - fm) / (2 * step)))
        if max_entries is not None and flat.size > max_entries:
            v = rng.standard_normal(flat.size)
            v /= np.linalg.norm(v)
            orig = flat.copy()
            flat[:] = orig + step * v
            fp = value()
            flat[:] = orig - step * v
            fm = value()
            flat[:] = orig
            worst = max(worst, rel(float(ga.reshape(-1) @ v), (fp - fm) / (2 * step)))
    return worst
