"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every differentiable primitive appends one record to the active tape. ``backward``
replays the tape in reverse, so each recorded op applies its chain rule once, then
clears the tape. Broadcasting is limited to scalar-times-tensor; anything else must
match shapes exactly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


@dataclass
class _Record:
    out: "Tensor"
    backward: Callable[[np.ndarray], None]


@dataclass
class Tape:
    """Ordered record of primitive ops since the last clear."""

    records: list = field(default_factory=list)
    enabled: bool = True

    def push(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self.records.append(_Record(out, backward))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        tape = _TAPE
        try:
            for rec in reversed(tape.records):
                if rec.out.grad is not None:
                    rec.backward(rec.out.grad)
        finally:
            tape.clear()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = _TAPE.enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    if needs:
        _TAPE.push(out, backward)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` (explicit, not general broadcasting)."""
    x, b = as_tensor(x), as_tensor(b)
    axis = axis % x.data.ndim
    if b.data.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape} on axis {axis}")
    view = [1] * x.data.ndim
    view[axis] = -1
    red = tuple(i for i in range(x.data.ndim) if i != axis)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=red))

    return _make(x.data + b.data.reshape(view), (x, b), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.array(x.data.sum()), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    # derivative at exactly 0 takes the negative-slope branch
    pos = x.data > 0

    def bw(g):
        x._accumulate(np.where(pos, g, slope * g))

    return _make(np.where(pos, x.data, slope * x.data), (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - y * y))

    return _make(y, (x,), bw)


def l1_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("l1_mean", a, b)
    d = a.data - b.data
    n = d.size

    def bw(g):
        s = np.sign(d) * (g / n)
        if a.requires_grad:
            a._accumulate(s)
        if b.requires_grad:
            b._accumulate(-s)

    return _make(np.array(np.abs(d).mean()), (a, b), bw)


def mse_mean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mse_mean", a, b)
    d = a.data - b.data
    n = d.size

    def bw(g):
        s = d * (2.0 * g / n)
        if a.requires_grad:
            a._accumulate(s)
        if b.requires_grad:
            b._accumulate(-s)

    return _make(np.array((d * d).mean()), (a, b), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached: nothing upstream of ``x`` receives gradient through it."""
    return Tensor(as_tensor(x).data.copy(), requires_grad=False)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} (axis {axis})")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N, C, H, W) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x expects (N, C, H, W), got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, (x,), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero "same" padding.

    x: (N, C, H, W); w: (O, C, k, k) with k odd; b: (O,). Output spatial size is
    ceil(H / stride) x ceil(W / stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    o, c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd-sized, got {w.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias shape mismatch {b.shape} vs {(o,)}")
    k, p, s = kh, kh // 2, int(stride)
    n, _, h, wd = x.shape
    ho, wo = -(-h // s), -(-wd // s)

    # channels-last padding keeps every copy contiguous along C
    xp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=DTYPE)
    xp[:, p : p + h, p : p + wd, :] = x.data.transpose(0, 2, 3, 1)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)

    def im2col():
        cols = np.empty((n, ho, wo, k, k, c), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
        return cols.reshape(n * ho * wo, k * k * c)

    cache = []
    if s == 1:
        # gather only the k column shifts; each kernel row is then a contiguous
        # row offset into them, so k GEMMs replace one k-times-larger copy
        rows = np.empty((n, h + 2 * p, wo, k, c), dtype=DTYPE)
        for j in range(k):
            rows[:, :, :, j, :] = xp[:, :, j : j + wo, :]
        rows = rows.reshape(n, (h + 2 * p) * wo, k * c)
        wk = w.data.transpose(2, 3, 1, 0).reshape(k, k * c, o)
        out = rows[:, : ho * wo] @ wk[0]
        for i in range(1, k):
            out += rows[:, i * wo : i * wo + ho * wo] @ wk[i]
        out = out.reshape(n * ho * wo, o)
    else:
        cache.append(im2col())
        out = cache[0] @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if w.requires_grad:
            cols2 = cache[0] if cache else im2col()
            w._accumulate((g2.T @ cols2).reshape(o, k, k, c).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[
                        :, :, :, i, j, :
                    ]
            gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
            x._accumulate(gx.transpose(0, 3, 1, 2))

    # an NCHW view of channels-last memory; the next conv's transpose is then free
    return _make(out, parents, bw)


def extract_patches(x: Tensor, index: Sequence[tuple[int, int, int]], size: int) -> Tensor:
    """Crop square patches from an (N, C, H, W) tensor and flatten each one.

    ``index`` holds (image, row, col) top-left corners. Returns (Q, C*size*size);
    gradients scatter back into the cropped windows.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"extract_patches expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    for img, r, col in index:
        if not (0 <= img < n and 0 <= r <= h - size and 0 <= col <= w - size):
            raise ShapeError(f"patch ({img}, {r}, {col}) of size {size} outside {x.shape}")
    out = np.stack(
        [x.data[img, :, r : r + size, col : col + size].reshape(-1) for img, r, col in index]
    )

    def bw(g):
        gx = np.zeros_like(x.data)
        for q, (img, r, col) in enumerate(index):
            gx[img, :, r : r + size, col : col + size] += g[q].reshape(c, size, size)
        x._accumulate(gx)

    return _make(out, (x,), bw)
