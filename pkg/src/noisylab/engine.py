"""Dense float tensors with an explicit reverse-mode gradient tape.

numpy stores the raw arrays; every differentiable op goes through the helpers
here so the active ``GradTape`` can replay the chain rule in exact reverse
execution order.  Tensors are immutable by convention after construction
(ops never write into their inputs), which keeps saved references valid for
the backward pass.

float32 is the working precision; reductions accumulate in float64 before
casting back.  Tensors can be built as float64 where a test needs a
finite-difference oracle to be meaningful.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError, TapeError

LOG_2PI = math.log(2.0 * math.pi)

_TAPES: list["GradTape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A shaped block of float32/float64 values, optionally tracked for grads."""

    __slots__ = ("data", "grad", "requires_grad", "_in_graph")

    # keep numpy from hijacking `ndarray <op> Tensor`
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._in_graph = self.requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    # -- unary / reduction sugar --------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def _lift(x, dtype) -> Tensor:
    """Wrap scalars/arrays as constant tensors without changing the op dtype."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def as_tensor(x, dtype=np.float32) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class GradTape:
    """Ordered record of executed ops, replayed backward exactly once.

    Entries are (output, [(input, grad_fn), ...]); grad accumulation across
    fan-out is additive.  Because ops record in execution order, walking the
    list in reverse is a valid reverse topological order of the data flow.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def _record(self, out, pairs):
        self._records.append((out, pairs))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if self._consumed:
            raise TapeError("tape already consumed; record a fresh tape per backward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for out, pairs in reversed(self._records):
            g = grads.pop(id(out), None)
            owners.pop(id(out), None)
            if g is None:
                continue
            for tensor, grad_fn in pairs:
                gt = grad_fn(g)
                tid = id(tensor)
                acc = grads.get(tid)
                if acc is None:
                    grads[tid] = np.array(gt, copy=True)
                    owners[tid] = tensor
                else:
                    np.add(acc, gt, out=acc)
        for tid, g in grads.items():
            leaf = owners[tid]
            if leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def _apply(out_data: np.ndarray, pairs) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        traced = [(t, fn) for t, fn in pairs if t._in_graph]
        if traced:
            out._in_graph = True
            tape._record(out, traced)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squash:
        g = g.sum(axis=squash, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _lift(b, a.dtype)
    return _apply(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b):
    a = as_tensor(a)
    b = _lift(b, a.dtype)
    return _apply(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b):
    a = as_tensor(a)
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data
    return _apply(ad * bd, [
        (a, lambda g: _unbroadcast(g * bd, a.shape)),
        (b, lambda g: _unbroadcast(g * ad, b.shape)),
    ])


def div(a, b):
    a = as_tensor(a)
    b = _lift(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd
    return _apply(out, [
        (a, lambda g: _unbroadcast(g / bd, a.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), b.shape)),
    ])


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _apply(out, [(x, lambda g: g * out)])


def log(x):
    x = as_tensor(x)
    if x.data.size and x.data.min() <= 0.0:
        raise DomainError("log requires strictly positive input")
    xd = x.data
    return _apply(np.log(xd), [(x, lambda g: g / xd)])


def sqrt(x):
    x = as_tensor(x)
    if x.data.size and x.data.min() <= 0.0:
        raise DomainError("sqrt requires strictly positive input")
    out = np.sqrt(x.data)
    return _apply(out, [(x, lambda g: g * (0.5 / out))])


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _apply(out, [(x, lambda g: g * (1.0 - out * out))])


def relu(x):
    x = as_tensor(x)
    xd = x.data
    return _apply(np.maximum(xd, 0.0), [(x, lambda g: g * (xd > 0))])


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _apply(xd * xd, [(x, lambda g: g * (2.0 * xd))])


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi] with pass-through gradient strictly inside the range."""
    x = as_tensor(x)
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _apply(np.clip(xd, lo, hi), [(x, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def tsum(x, axis=None):
    x = as_tensor(x)
    # accumulate in 64-bit to bound drift, then return at the working dtype
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)
    shape = x.shape

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        gk = np.expand_dims(g, axes)
        return np.broadcast_to(gk, shape)

    return _apply(out, [(x, grad)])


def tmean(x, axis=None):
    x = as_tensor(x)
    n = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    s = tsum(x, axis)
    return mul(s, 1.0 / float(n))


def reshape(x, *shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape
    return _apply(x.data.reshape(shape), [(x, lambda g: g.reshape(old))])


def concat(tensors, axis: int = 1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    pairs = []
    start = 0
    for t in tensors:
        width = t.shape[axis]
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(start, start + width)
        sl = tuple(sl)
        pairs.append((t, lambda g, sl=sl: g[sl]))
        start += width
    return _apply(data, pairs)


def narrow(x, axis: int, start: int, length: int):
    """Slice `length` entries from `start` along `axis` (backward zero-pads)."""
    x = as_tensor(x)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape = x.shape

    def grad(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[sl] = g
        return z

    return _apply(np.ascontiguousarray(x.data[sl]), [(x, grad)])


def take(x, indices):
    """Embedding-style gather along the first axis; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    shape = x.shape

    def grad(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return z

    return _apply(x.data[idx], [(x, grad)])


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _apply(ad @ bd, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling of an (N,C,H,W) tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad(g):
        return g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    return _apply(out, [(x, grad)])


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo).

    The channel/kernel axes lead so the materializing copy runs along the
    contiguous image rows, which is several times faster than the
    patches-first layout.
    """
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def conv2d(x, w, bias=None, stride: int = 1, padding="same"):
    """2-D convolution (cross-correlation) over (N,C,H,W) with zero fill.

    padding is "same" (odd kernels only), "valid", or an explicit int.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cw}")
    sh = sw = int(stride)
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding requires odd kernel extents")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        ph = pw = int(padding)

    xp = _pad2d(x.data, ph, pw)
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    out = w.data.reshape(o, -1) @ cols
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"bias shape {bias.shape} != ({o},)")
        out += bias.data[None, :, None, None]

    wd = w.data

    def grad_x(g):
        if sh > 1 or sw > 1:
            gz = np.zeros((n, o, (ho - 1) * sh + 1, (wo - 1) * sw + 1), dtype=g.dtype)
            gz[:, :, ::sh, ::sw] = g
        else:
            gz = g
        gzp = _pad2d(gz, kh - 1, kw - 1)
        wswap = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C,O,kh,kw)
        colsg, gh, gw_ = _im2col(gzp, kh, kw, 1, 1)
        core = wswap.reshape(c, -1) @ colsg
        core = core.reshape(c, n, gh, gw_).transpose(1, 0, 2, 3)
        # stride>1 windows may not reach the padded edge; re-embed then crop
        dxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw), dtype=g.dtype)
        dxp[:, :, :gh, :gw_] = core
        return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + wid])

    def grad_w(g):
        # recompute cols from the saved input rather than holding them alive
        cols2, _, _ = _im2col(_pad2d(x.data, ph, pw), kh, kw, sh, sw)
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        return (gm @ cols2.T).reshape(o, c, kh, kw)

    pairs = [(x, grad_x), (w, grad_w)]
    if bias is not None:
        pairs.append((bias, lambda g: g.sum(axis=(0, 2, 3))))
    return _apply(out, pairs)


# ---------------------------------------------------------------------------
# initializers
# ---------------------------------------------------------------------------

def orthogonal_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Random matrix whose smaller-dimension Gram matrix is the identity.

    N-D shapes are flattened to (shape[0], prod(rest)) the way conv kernels
    are.  Deterministic for a fixed generator state.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or any(s <= 0 for s in shape):
        raise ShapeError(f"orthogonal_init needs >=2-D positive shape, got {shape}")
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return Tensor(q.reshape(shape).astype(dtype), requires_grad=True)
