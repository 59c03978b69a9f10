"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records every primitive applied to tensors that require
gradients. Records are appended in execution order, which is already a
topological order, so ``Tape.backward`` is a single reverse sweep that
accumulates gradients additively across fan-out. ``Tape.replay`` re-runs
the recorded kernels on the current leaf values and must reproduce the
original outputs bit for bit.

Two precisions are supported: float32 for training and float64 for
finite-difference verification (``gradient_check`` refuses float32, where
central differences are too noisy to be meaningful).

Every primitive validates that its output is finite; NaN/Inf anywhere is
treated as a hard error naming the offending op. The check uses a single
reduction (``sum`` of the output), which is NaN/Inf-propagating and far
cheaper than an elementwise ``isfinite`` scan.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EngineError(RuntimeError):
    pass


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


_SELU_ALPHA = 1.6732632423543772
_SELU_LAMBDA = 1.0507009873554805
_LN_EPS = 1e-5

_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite output produced by op '{op}'")


class Tensor:
    """N-dimensional real array, optionally tracked on the active tape.

    ``data`` is a flat-strided numpy array (row-major on creation);
    ``grad`` is populated by ``Tape.backward`` for leaves with
    ``requires_grad`` and accumulates additively across backward calls
    until cleared. ``node_id`` is assigned when the tensor is produced by
    (or first consumed by) a recorded op.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.node_id = None
        t._is_leaf = True
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------
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
        return slice_tensor(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class _Record:
    __slots__ = ("op", "inputs", "output", "kwargs", "saved", "bwd")

    def __init__(self, op, inputs, output, kwargs, saved, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.kwargs = kwargs
        self.saved = saved
        self.bwd = bwd


class Tape:
    """Ordered list of op records; single-writer, replayable."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []
        self._next_id = 0
        self._ran_backward = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._stack.pop()
        return False

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def _assign_id(self, t: Tensor) -> None:
        if t.node_id is None:
            t.node_id = self._next_id
            self._next_id += 1

    def record(self, op, inputs, output, kwargs, saved, bwd) -> None:
        for t in inputs:
            self._assign_id(t)
        self._assign_id(output)
        output._is_leaf = False
        self.records.append(_Record(op, inputs, output, kwargs, saved, bwd))

    def backward(self, output: Tensor, seed_gradient=None) -> None:
        """Reverse sweep from ``output``; leaf grads accumulate additively."""
        if not self.records:
            raise EngineError("backward before forward: tape is empty")
        if seed_gradient is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed_gradient, dtype=output.dtype)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"seed gradient shape {seed.shape} does not match output shape {output.data.shape}"
                )
        grads: dict[int, np.ndarray] = {output.node_id: seed}
        for rec in reversed(self.records):
            g_out = grads.pop(rec.output.node_id, None)
            if g_out is None:
                continue
            in_grads = rec.bwd(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                if not (t.requires_grad or not t._is_leaf):
                    continue
                if t._is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                else:
                    acc = grads.get(t.node_id)
                    grads[t.node_id] = g if acc is None else acc + g
        self._ran_backward = True

    def replay(self) -> None:
        """Recompute every record in order from current leaf values.

        Outputs are rewritten in place; with unchanged leaves the results
        are bit-identical to the original forward pass.
        """
        values: dict[int, np.ndarray] = {}
        for rec in self.records:
            args = []
            for t in rec.inputs:
                args.append(values.get(t.node_id, t.data))
            out = _KERNELS[rec.op](*args, **rec.kwargs)
            values[rec.output.node_id] = out
            rec.output.data = out


_KERNELS: dict[str, callable] = {}


def _kernel(name):
    def deco(fn):
        _KERNELS[name] = fn
        return fn

    return deco


def _make(op, out_data, inputs, kwargs, bwd):
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node_id = None
    out._is_leaf = True
    tape = Tape.active()
    needs = any(t.requires_grad or not t._is_leaf for t in inputs)
    out.requires_grad = needs
    if tape is not None and needs:
        tape.record(op, inputs, out, kwargs, saved=None, bwd=bwd)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

@_kernel("add")
def _add_k(a, b):
    return a + b


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    y = _add_k(a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", y, (a, b), {}, bwd)


@_kernel("sub")
def _sub_k(a, b):
    return a - b


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    y = _sub_k(a.data, b.data)

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", y, (a, b), {}, bwd)


@_kernel("mul")
def _mul_k(a, b):
    return a * b


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    y = _mul_k(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", y, (a, b), {}, bwd)


@_kernel("div")
def _div_k(a, b):
    return a / b


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    y = _div_k(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _make("div", y, (a, b), {}, bwd)


@_kernel("neg")
def _neg_k(a):
    return -a


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", _neg_k(a.data), (a,), {}, lambda g: (-g,))


@_kernel("exp")
def _exp_k(a):
    return np.exp(a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = _exp_k(a.data)
    return _make("exp", y, (a,), {}, lambda g: (g * y,))


@_kernel("log")
def _log_k(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


def log(a) -> Tensor:
    a = as_tensor(a)
    y = _log_k(a.data)
    ad = a.data
    return _make("log", y, (a,), {}, lambda g: (g / ad,))


@_kernel("sqrt")
def _sqrt_k(a):
    return np.sqrt(a)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = _sqrt_k(a.data)
    return _make("sqrt", y, (a,), {}, lambda g: (g / (2.0 * y),))


@_kernel("square")
def _square_k(a):
    return a * a


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("square", _square_k(ad), (a,), {}, lambda g: (2.0 * ad * g,))


@_kernel("abs")
def _abs_k(a):
    return np.abs(a)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make("abs", _abs_k(a.data), (a,), {}, lambda g: (g * s,))


@_kernel("clip")
def _clip_k(a, lo, hi):
    return np.clip(a, lo, hi)


def clip(a, lo, hi) -> Tensor:
    a = as_tensor(a)
    y = _clip_k(a.data, lo, hi)
    mask = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return _make("clip", y, (a,), {"lo": lo, "hi": hi}, lambda g: (g * mask,))


@_kernel("sigmoid")
def _sigmoid_k(a):
    # stable for both tails: exp argument is always <= 0
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_k(a.data)
    return _make("sigmoid", y, (a,), {}, lambda g: (g * y * (1.0 - y),))


@_kernel("selu")
def _selu_k(a):
    # expm1 only sees the non-positive part, so large activations cannot overflow
    neg = np.expm1(np.minimum(a, 0.0))
    return np.where(a > 0, _SELU_LAMBDA * a, _SELU_LAMBDA * _SELU_ALPHA * neg).astype(a.dtype)


def selu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    y = _selu_k(ad)
    pos = ad > 0
    # derivative: lambda for x>0, lambda*alpha*exp(x) otherwise
    dneg = _SELU_LAMBDA * _SELU_ALPHA * np.exp(np.where(pos, 0.0, ad))
    deriv = np.where(pos, _SELU_LAMBDA, dneg).astype(ad.dtype)
    return _make("selu", y, (a,), {}, lambda g: (g * deriv,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

@_kernel("sum")
def _sum_k(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = _sum_k(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        gg = g
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            for i in sorted(a if a >= 0 else len(shape) + a for a in ax):
                gg = np.expand_dims(gg, i)
        return (np.broadcast_to(gg, shape).astype(g.dtype, copy=True),)

    y = np.asarray(y)
    return _make("sum", y, (a,), {"axis": axis, "keepdims": keepdims}, bwd)


@_kernel("mean")
def _mean_k(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = np.asarray(_mean_k(a.data, axis=axis, keepdims=keepdims))
    shape = a.data.shape
    n = a.data.size / max(y.size, 1)

    def bwd(g):
        if axis is None:
            gg = g
        else:
            gg = g
            if not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                for i in sorted(x if x >= 0 else len(shape) + x for x in ax):
                    gg = np.expand_dims(gg, i)
        return (np.broadcast_to(gg, shape).astype(g.dtype) / n,)

    return _make("mean", y, (a,), {"axis": axis, "keepdims": keepdims}, bwd)


@_kernel("cumsum")
def _cumsum_k(a, axis=0):
    return np.cumsum(a, axis=axis)


def cumsum(a, axis=0) -> Tensor:
    a = as_tensor(a)
    y = _cumsum_k(a.data, axis=axis)

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make("cumsum", y, (a,), {"axis": axis}, bwd)


@_kernel("reshape")
def _reshape_k(a, shape=None):
    return np.reshape(a, shape)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    y = _reshape_k(a.data, shape=shape)
    return _make("reshape", y, (a,), {"shape": shape}, lambda g: (g.reshape(old),))


@_kernel("transpose")
def _transpose_k(a, axes=None):
    return np.transpose(a, axes).copy()


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    y = _transpose_k(a.data, axes=axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv).copy(),)

    return _make("transpose", y, (a,), {"axes": axes}, bwd)


@_kernel("concat")
def _concat_k(*arrs, axis=0):
    return np.concatenate(arrs, axis=axis)


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    y = _concat_k(*[t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offs[i], offs[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make("concat", y, tuple(ts), {"axis": axis}, bwd)


def _normalize_slices(idx):
    if not isinstance(idx, tuple):
        idx = (idx,)
    return idx


@_kernel("slice")
def _slice_k(a, idx=None):
    return a[idx].copy()


def slice_tensor(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = _normalize_slices(idx)
    for part in idx:
        if not isinstance(part, slice) and part is not Ellipsis and not isinstance(part, int):
            raise ShapeError("slice_tensor supports basic slicing only")
    y = _slice_k(a.data, idx=idx)
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _make("slice", y, (a,), {"idx": idx}, bwd)


@_kernel("pad")
def _pad_k(a, pads=None):
    return np.pad(a, pads)


def pad(a, pads) -> Tensor:
    """Zero padding; ``pads`` is the numpy per-axis ((before, after), ...) spec."""
    a = as_tensor(a)
    pads = tuple(tuple(p) for p in pads)
    y = _pad_k(a.data, pads=pads)
    sl = tuple(slice(p[0], p[0] + s) for p, s in zip(pads, a.data.shape))

    def bwd(g):
        return (g[sl].copy(),)

    return _make("pad", y, (a,), {"pads": pads}, bwd)


@_kernel("roll")
def _roll_k(a, shift=None, axes=None):
    return np.roll(a, shift, axis=axes)


def roll(a, shift, axes) -> Tensor:
    a = as_tensor(a)
    y = _roll_k(a.data, shift=shift, axes=axes)
    inv = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift

    def bwd(g):
        return (np.roll(g, inv, axis=axes),)

    return _make("roll", y, (a,), {"shift": shift, "axes": axes}, bwd)


@_kernel("take_rows")
def _take_rows_k(a, idx=None):
    return a[idx]


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0 with an integer index array of any shape."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    y = _take_rows_k(a.data, idx=idx)
    shape = a.data.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", y, (a,), {"idx": idx}, bwd)


# ---------------------------------------------------------------------------
# linear algebra and attention building blocks
# ---------------------------------------------------------------------------

@_kernel("matmul")
def _matmul_k(a, b):
    return a @ b


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    y = _matmul_k(a.data, b.data)
    ad, bd = a.data, b.data
    need_a = a.requires_grad or not a._is_leaf
    need_b = b.requires_grad or not b._is_leaf

    def bwd(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd if need_a else None, g * ad if need_b else None
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
            if ad.ndim == 1:
                ga = ga.reshape(ad.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            if bd.ndim == 1:
                gb = gb.reshape(bd.shape)
        return ga, gb

    return _make("matmul", y, (a, b), {}, bwd)


@_kernel("softmax")
def _softmax_k(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    y = _softmax_k(a.data, axis=axis)

    def bwd(g):
        gy = g * y
        return (gy - y * np.sum(gy, axis=axis, keepdims=True),)

    return _make("softmax", y, (a,), {"axis": axis}, bwd)


@_kernel("layer_norm")
def _layer_norm_k(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + _LN_EPS)
    return xhat * gain + bias


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize over the last axis; affine transform by gain and bias."""
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    bias = as_tensor(bias, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    n = x.data.shape[-1]
    lead = tuple(range(x.data.ndim - 1))

    def bwd(g):
        dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbias = g.sum(axis=lead) if lead else g
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, dgain.reshape(gain.data.shape), dbias.reshape(bias.data.shape)

    _ = n
    return _make("layer_norm", y, (x, gain, bias), {}, bwd)


# ---------------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------------

def _conv_patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    # (Ho, Wo, C, kh, kw) -> (Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))


@_kernel("conv2d")
def _conv2d_k(x, w, b=None, stride=1, padding=0):
    kh, kw, ci, co = w.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    patches = _conv_patches(xp, kh, kw, stride)
    ho, wo = patches.shape[:2]
    y = patches.reshape(ho * wo, kh * kw * ci) @ w.reshape(kh * kw * ci, co)
    if b is not None:
        y = y + b
    return y.reshape(ho, wo, co)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on an HWC map with an HWIO kernel (patch extraction + matmul)."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x (H,W,Cin) and w (kh,kw,Cin,Cout)")
    if x.data.shape[2] != w.data.shape[2]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[2]}, kernel expects {w.data.shape[2]}"
        )
    kh, kw, ci, co = w.data.shape
    pad_ = padding
    xp = np.pad(x.data, ((pad_, pad_), (pad_, pad_), (0, 0))) if pad_ else x.data
    if xp.shape[0] < kh or xp.shape[1] < kw:
        raise ShapeError(f"conv2d input {x.data.shape} smaller than kernel {kh}x{kw}")
    patches = _conv_patches(xp, kh, kw, stride)
    ho, wo = patches.shape[:2]
    cols = patches.reshape(ho * wo, kh * kw * ci)
    y = cols @ w.data.reshape(kh * kw * ci, co)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b, like=x)
        y = y + b.data
        inputs.append(b)
    y = y.reshape(ho, wo, co)
    hp, wp = xp.shape[:2]
    hx, wx = x.data.shape[:2]
    need_x = x.requires_grad or not x._is_leaf

    def bwd(g):
        g2 = g.reshape(ho * wo, co)
        gw = (cols.T @ g2).reshape(kh, kw, ci, co)
        gx = None
        if need_x:
            gcols = (g2 @ w.data.reshape(kh * kw * ci, co).T).reshape(ho, wo, kh, kw, ci)
            gxp = np.zeros((hp, wp, ci), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = (gxp[pad_ : pad_ + hx, pad_ : pad_ + wx] if pad_ else gxp).copy()
        if len(inputs) == 3:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    kwargs = {"stride": stride, "padding": padding}
    return _make("conv2d", y, tuple(inputs), kwargs, bwd)


@_kernel("depthwise_conv2d")
def _dwconv_k(x, w, b=None, padding=0):
    kh, kw, c = w.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))  # (Ho,Wo,C,kh,kw)
    y = np.einsum("hwckl,klc->hwc", win, w, optimize=True)
    if b is not None:
        y = y + b
    return y


def depthwise_conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Per-channel (depthwise) convolution, stride 1."""
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if x.data.shape[2] != w.data.shape[2]:
        raise ShapeError("depthwise_conv2d channel mismatch")
    kh, kw, c = w.data.shape
    pad_ = padding
    xp = np.pad(x.data, ((pad_, pad_), (pad_, pad_), (0, 0))) if pad_ else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))
    y = np.einsum("hwckl,klc->hwc", win, w.data, optimize=True)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b, like=x)
        y = y + b.data
        inputs.append(b)
    ho, wo = y.shape[:2]
    hp, wp = xp.shape[:2]
    hx, wx = x.data.shape[:2]
    need_x = x.requires_grad or not x._is_leaf

    def bwd(g):
        gw = np.einsum("hwckl,hwc->klc", win, g, optimize=True)
        gx = None
        if need_x:
            gxp = np.zeros((hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + ho, j : j + wo] += g * w.data[i, j]
            gx = (gxp[pad_ : pad_ + hx, pad_ : pad_ + wx] if pad_ else gxp).copy()
        if len(inputs) == 3:
            return gx, gw, g.sum(axis=(0, 1))
        return gx, gw

    return _make("depthwise_conv2d", y, tuple(inputs), {"padding": padding}, bwd)


_box_cache: dict[tuple, tuple] = {}


def _box_indices(h: int, w: int, r: int):
    key = (h, w, r)
    hit = _box_cache.get(key)
    if hit is not None:
        return hit
    r0 = np.clip(np.arange(h) - r, 0, h)
    r1 = np.clip(np.arange(h) + r + 1, 0, h)
    c0 = np.clip(np.arange(w) - r, 0, w)
    c1 = np.clip(np.arange(w) + r + 1, 0, w)
    counts = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    _box_cache[key] = (r0, r1, c0, c1, counts)
    return _box_cache[key]


def _box_sum(x: np.ndarray, r: int) -> np.ndarray:
    h, w = x.shape[:2]
    r0, r1, c0, c1, _ = _box_indices(h, w, r)
    sat = np.zeros((h + 1, w + 1) + x.shape[2:], dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(x, axis=0, dtype=np.float64), axis=1)
    out = sat[r1][:, c1] - sat[r0][:, c1] - sat[r1][:, c0] + sat[r0][:, c0]
    return out.astype(x.dtype)


@_kernel("box_filter")
def _box_filter_k(x, radius=1):
    h, w = x.shape[:2]
    counts = _box_indices(h, w, radius)[4].astype(x.dtype)
    if x.ndim == 3:
        counts = counts[..., None]
    return _box_sum(x, radius) / counts


def box_filter(x, radius: int) -> Tensor:
    """Mean over the (2r+1)^2 window clipped at the image border.

    The summed-area table runs in float64 internally so the windowed sums
    stay exact for the verification oracles; the result is cast back to
    the input dtype. The adjoint of a clipped-window mean is the clipped
    windowed sum of g/count.
    """
    x = as_tensor(x)
    h, w = x.data.shape[:2]
    if radius < 1:
        raise ShapeError("box_filter radius must be >= 1")
    if radius >= min(h, w) / 2:
        raise ShapeError(f"box_filter radius {radius} too large for {h}x{w} map")
    counts = _box_indices(h, w, radius)[4].astype(x.dtype)
    if x.data.ndim == 3:
        counts = counts[..., None]
    y = _box_sum(x.data, radius) / counts

    def bwd(g):
        return (_box_sum(g / counts, radius),)

    return _make("box_filter", y, (x,), {"radius": radius}, bwd)


_resize_cache: dict[tuple, tuple] = {}


def _resize_weights(hin: int, win: int, hout: int, wout: int):
    key = (hin, win, hout, wout)
    hit = _resize_cache.get(key)
    if hit is not None:
        return hit

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos)
        t = pos - lo
        i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
        i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
        t = np.clip(np.where(pos < 0, 0.0, np.where(pos > n_in - 1, 1.0, t)), 0.0, 1.0)
        return i0, i1, t

    y0, y1, ty = axis_weights(hin, hout)
    x0, x1, tx = axis_weights(win, wout)
    _resize_cache[key] = (y0, y1, ty, x0, x1, tx)
    return _resize_cache[key]


@_kernel("bilinear_resize")
def _bilinear_k(x, out_hw=None):
    hout, wout = out_hw
    hin, win_ = x.shape[:2]
    y0, y1, ty, x0, x1, tx = _resize_weights(hin, win_, hout, wout)
    ty_ = ty[:, None] if x.ndim == 2 else ty[:, None, None]
    tx_ = tx[None, :] if x.ndim == 2 else tx[None, :, None]
    top = x[y0][:, x0] * (1 - tx_) + x[y0][:, x1] * tx_
    bot = x[y1][:, x0] * (1 - tx_) + x[y1][:, x1] * tx_
    return (top * (1 - ty_) + bot * ty_).astype(x.dtype)


def bilinear_resize(x, out_hw) -> Tensor:
    """Half-pixel-aligned bilinear resize; identity when sizes match."""
    x = as_tensor(x)
    hin, win_ = x.data.shape[:2]
    hout, wout = out_hw
    y = _bilinear_k(x.data, out_hw=tuple(out_hw))
    y0, y1, ty, x0, x1, tx = _resize_weights(hin, win_, hout, wout)

    def bwd(g):
        ty_ = ty[:, None] if g.ndim == 2 else ty[:, None, None]
        tx_ = tx[None, :] if g.ndim == 2 else tx[None, :, None]
        gx = np.zeros(x.data.shape, dtype=np.float64)
        yy0 = y0[:, None]
        yy1 = y1[:, None]
        xx0 = np.broadcast_to(x0[None, :], (hout, wout))
        xx1 = np.broadcast_to(x1[None, :], (hout, wout))
        yy0b = np.broadcast_to(yy0, (hout, wout))
        yy1b = np.broadcast_to(yy1, (hout, wout))
        np.add.at(gx, (yy0b, xx0), g * (1 - ty_) * (1 - tx_))
        np.add.at(gx, (yy0b, xx1), g * (1 - ty_) * tx_)
        np.add.at(gx, (yy1b, xx0), g * ty_ * (1 - tx_))
        np.add.at(gx, (yy1b, xx1), g * ty_ * tx_)
        return (gx.astype(g.dtype),)

    return _make("bilinear_resize", y, (x,), {"out_hw": tuple(out_hw)}, bwd)


# ---------------------------------------------------------------------------
# initialization and verification
# ---------------------------------------------------------------------------

def lecun_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """Fan-in-scaled uniform init: U(-a, a) with a = sqrt(3/fan_in)."""
    a = float(np.sqrt(3.0 / max(fan_in, 1)))
    return parameter(rng.uniform(-a, a, size=shape), dtype=dtype)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype)


def gradient_check(fn, params, step: float = 1e-4, samples: int | None = None, seed: int = 0) -> float:
    """Compare tape gradients of a scalar function against central differences.

    ``fn`` must rebuild its forward pass from the current values of
    ``params`` (a dict or list of float64 leaf tensors). Returns the
    maximum over checked coordinates of |analytic - numeric| / max(1, |numeric|).
    When ``samples`` is given, that many coordinates are drawn (seeded)
    from each parameter instead of sweeping all of them.
    """
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        if p.dtype != np.float64:
            raise EngineError("gradient_check requires float64 parameters (64-bit mode)")
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    if out.data.size != 1:
        raise ShapeError("gradient_check requires a scalar-valued function")
    tape.backward(out)
    analytic = []
    for p in plist:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite analytic gradient")
        analytic.append(g.copy())
        p.zero_grad()
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for p, g in zip(plist, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if samples is None or samples >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(fn().data)
            flat[c] = orig - step
            f_minus = float(fn().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError("non-finite numeric gradient")
            err = abs(g.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return float(max_err)
