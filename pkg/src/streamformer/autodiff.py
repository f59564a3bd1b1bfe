"""Reverse-mode automatic differentiation over dense numpy arrays.

Small by design: exactly the operations a token-streaming attention model
with spiking/binarized layers needs, nothing more.  Values are stored as
float32 (float64 is accepted for high-precision gradient checking); every
reduction accumulates in float64 before rounding back to the storage dtype
so that mathematically identical computations taken in different orders
(e.g. a batched matmul versus a per-token dot product) land on the same
stored values.

Recording model: a ``Tape`` is entered as a context manager.  While active,
every op that touches a tracked tensor appends a record (inputs, output,
backward rule, saved context).  ``Tape.backward`` replays the records in
exact reverse order, accumulating gradients additively, so a tensor feeding
several ops receives the sum of its downstream gradients.  With no active
tape the same functions run forward-only, which is the streaming inference
fast path.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf, or was fed a non-finite gradient."""


class InputTooShortError(ValueError):
    """Temporal input is shorter than the convolution window requires."""


class Tensor:
    """Dense array plus gradient slot.

    ``data`` is always a numpy array of the storage dtype; ``grad`` is filled
    in (same shape/dtype) by ``Tape.backward``.  ``requires_grad`` marks leaf
    parameters; intermediate results are tracked by the active tape instead.
    """

    __slots__ = ("data", "grad", "requires_grad", "degenerate_rows")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.degenerate_rows = None

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
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class _OpRecord:
    __slots__ = ("output", "inputs", "backward", "needs")

    def __init__(self, output, inputs, backward, needs):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.needs = needs


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered op recording; single writer, replayed once in reverse."""

    def __init__(self):
        self._records: list[_OpRecord] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._records)

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable):
        needs = tuple(self.watches(t) for t in inputs)
        if any(needs):
            self._records.append(_OpRecord(output, tuple(inputs), backward, needs))
            self._tracked.add(id(output))

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(leaf) into ``.grad`` of every watched tensor."""
        if root.size != 1:
            raise ValueError("backward root must be a scalar tensor")
        root.grad = np.ones_like(root.data)
        for rec in reversed(self._records):
            gout = rec.output.grad
            if gout is None:
                continue
            grads = rec.backward(gout)
            for tensor, g, needed in zip(rec.inputs, grads, rec.needs):
                if not needed or g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError("non-finite gradient encountered in backward")
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += g.astype(tensor.data.dtype, copy=False)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it on the active tape."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.degenerate_rows = None
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def record_custom(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Extension hook: register an externally computed op with its backward rule.

    ``backward(grad_out) -> tuple`` must return one gradient (or None) per input.
    """
    return _result(np.asarray(data), inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _acc_dtype(*tensors: Tensor):
    return tensors[0].data.dtype


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics; float64 accumulation."""
    a = as_tensor(a)
    b = as_tensor(b)
    dtype = _acc_dtype(a, b)
    data = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        a64 = a.data.astype(np.float64)
        b64 = b.data.astype(np.float64)
        if a64.ndim == 1 and b64.ndim == 1:
            ga, gb = g64 * b64, g64 * a64
        elif a64.ndim == 1:
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
            gb = np.matmul(a64[:, None], np.expand_dims(g64, -2))
        elif b64.ndim == 1:
            ga = np.expand_dims(g64, -1) * b64
            gb = np.einsum("...nm,...n->m", a64, g64)
        else:
            ga = np.matmul(g64, np.swapaxes(b64, -1, -2))
            gb = np.matmul(np.swapaxes(a64, -1, -2), g64)
        return (
            _unbroadcast(ga, a.shape).astype(dtype),
            _unbroadcast(gb, b.shape).astype(dtype),
        )

    return _result(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape).copy(), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into place."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _result(a.data[index].copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return _result(data, tuple(tensors), backward)


def repeat(a: Tensor, reps: int, axis: int) -> Tensor:
    """Repeat each entry along ``axis`` ``reps`` times (token upsampling)."""
    a = as_tensor(a)
    data = np.repeat(a.data, reps, axis=axis)

    def backward(g):
        shape = list(a.shape)
        shape.insert(axis + 1, reps)
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _result(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    dtype = a.data.dtype
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shared numeric kernels (used by both the taped ops and streaming inference)
# ---------------------------------------------------------------------------

def softmax_masked_rows(scores: np.ndarray, mask: np.ndarray | None):
    """Row softmax over the last axis with excluded entries.

    ``mask`` is boolean, True = participates.  Fully masked rows come back
    all-zero; the second return value flags them (shape = scores.shape[:-1]).
    Max-subtraction keeps the exponentials bounded.
    """
    dtype = scores.dtype
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    else:
        mask = np.broadcast_to(mask, scores.shape)
    neg = np.where(mask, scores.astype(np.float64), -np.inf)
    degenerate = ~mask.any(axis=-1)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(neg - rowmax)  # excluded entries: exp(-inf) == 0 exactly
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    probs = (e / denom).astype(dtype)
    return probs, degenerate


def gelu_kernel(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype)


def layer_norm_kernel(x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    y = (gain.astype(np.float64) * xhat + offset.astype(np.float64)).astype(x.dtype)
    return y, xhat, inv


def heaviside_kernel(x: np.ndarray) -> np.ndarray:
    # fires at the exact threshold: H(0) = 1
    return (x >= 0.0).astype(x.dtype)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def masked_softmax(scores: Tensor, mask: np.ndarray | None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries are excluded.

    Excluded entries are exactly zero in the output and receive zero
    gradient.  A row with no valid entries yields all zeros and is flagged
    on the result's ``degenerate_rows`` attribute (needed at stream start
    before any key/value has been written).
    """
    scores = as_tensor(scores)
    probs, degenerate = softmax_masked_rows(scores.data, mask)

    def backward(g):
        g64 = g.astype(np.float64)
        p64 = probs.astype(np.float64)
        inner = (g64 * p64).sum(axis=-1, keepdims=True)
        return ((p64 * (g64 - inner)).astype(scores.dtype),)

    out = _result(probs, (scores,), backward)
    out.degenerate_rows = degenerate if degenerate.any() else None
    return out


def heaviside_surrogate(x: Tensor, beta_s: float = 10.0) -> Tensor:
    """Binary step forward (H(0)=1); smooth fast-sigmoid gradient backward.

    The backward factor is 1 / (1 + beta_s * |x|)^2.
    """
    if beta_s <= 0:
        raise ValueError("beta_s must be positive")
    x = as_tensor(x)
    data = heaviside_kernel(x.data)

    def backward(g):
        scale = 1.0 / np.square(1.0 + beta_s * np.abs(x.data))
        return ((g * scale).astype(x.dtype),)

    return _result(data, (x,), backward)


def conv1d_temporal(x: Tensor, weight: Tensor, bias: Tensor | None,
                    stride: int, padding: int) -> Tensor:
    """Temporal cross-correlation: [C,T] (or [B,C,T]) -> [D,N] (or [B,D,N]).

    Zero padding on both ends; N = floor((T + 2*padding - kernel)/stride) + 1.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    batch, channels, t_in = xb.shape
    d_out, c_w, kernel = weight.shape
    if c_w != channels:
        raise ValueError(f"weight expects {c_w} channels, input has {channels}")
    if t_in + 2 * padding < kernel:
        raise InputTooShortError(
            f"input length {t_in} with padding {padding} is shorter than kernel {kernel}")
    n_out = (t_in + 2 * padding - kernel) // stride + 1

    xpad = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    s0, s1, s2 = xpad.strides
    cols = np.lib.stride_tricks.as_strided(
        xpad, shape=(batch, n_out, channels, kernel),
        strides=(s0, s2 * stride, s1, s2), writeable=False)
    cols2d = cols.reshape(batch * n_out, channels * kernel).astype(np.float64)
    w2d = weight.data.reshape(d_out, channels * kernel).astype(np.float64)
    out = cols2d @ w2d.T
    if bias is not None:
        out = out + bias.data.astype(np.float64)
    dtype = x.data.dtype
    data = out.reshape(batch, n_out, d_out).transpose(0, 2, 1).astype(dtype)
    if squeeze:
        data = data[0]

    def backward(g):
        gb = g[None] if squeeze else g
        g2d = gb.transpose(0, 2, 1).reshape(batch * n_out, d_out).astype(np.float64)
        gw = (g2d.T @ cols2d).reshape(d_out, channels, kernel).astype(dtype)
        gcols = (g2d @ w2d).reshape(batch, n_out, channels, kernel)
        gxpad = np.zeros((batch, channels, t_in + 2 * padding))
        for kk in range(kernel):
            stop = kk + (n_out - 1) * stride + 1
            gxpad[:, :, kk:stop:stride] += gcols[:, :, :, kk].transpose(0, 2, 1)
        gx = gxpad[:, :, padding:padding + t_in] if padding else gxpad
        gx = gx.astype(dtype)
        if squeeze:
            gx = gx[0]
        gbias = None if bias is None else gb.sum(axis=(0, 2)).astype(dtype)
        return gx, gw, gbias

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_dispatch(g):
        grads = backward(g)
        return grads[:2] if bias is None else grads

    return _result(data, inputs, backward_dispatch)


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row (last axis) zero-mean/unit-variance normalization with affine."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    offset = as_tensor(offset)
    data, xhat, inv = layer_norm_kernel(x.data, gain.data, offset.data, eps)
    dim = x.shape[-1]

    def backward(g):
        g64 = g.astype(np.float64)
        ggain = (g64 * xhat).sum(axis=tuple(range(g64.ndim - 1))).astype(x.dtype)
        goffset = g64.sum(axis=tuple(range(g64.ndim - 1))).astype(x.dtype)
        gh = g64 * gain.data.astype(np.float64)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx.astype(x.dtype), _unbroadcast(ggain, gain.shape), _unbroadcast(goffset, offset.shape)

    return _result(data, (x, gain, offset), backward)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = as_tensor(x)
    data = gelu_kernel(x.data)

    def backward(g):
        xv = x.data
        inner = _GELU_C * (xv + _GELU_A * xv ** 3)
        t = np.tanh(inner)
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xv * xv)
        grad = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        return ((g * grad).astype(x.dtype),)

    return _result(data, (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    x = as_tensor(x)
    if not training or p == 0.0:
        def backward(g):
            return (g,)
        return _result(x.data.copy(), (x,), backward)
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng for determinism")
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = keep.astype(x.dtype) * scale

    def backward(g):
        return ((g * mask).astype(x.dtype),)

    return _result((x.data * mask).astype(x.dtype), (x,), backward)


def l1_loss(y: Tensor, y_hat: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    y = as_tensor(y)
    y_hat = as_tensor(y_hat, y.dtype)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    diff = y.data.astype(np.float64) - y_hat.data.astype(np.float64)
    data = np.asarray(np.abs(diff).mean(), dtype=y.dtype)
    n = y.size

    def backward(g):
        s = (np.sign(diff) * (float(g) / n)).astype(y.dtype)
        return s, -s

    return _result(data, (y, y_hat), backward)


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over all elements."""
    x = as_tensor(x)
    x64 = x.data.astype(np.float64)
    norm = math.sqrt(float((x64 * x64).sum()))
    data = np.asarray(norm, dtype=x.dtype)

    def backward(g):
        denom = norm if norm > 0.0 else 1.0
        return ((float(g) * x.data / denom).astype(x.dtype),)

    return _result(data, (x,), backward)


def gradcheck(fn, tensors: Sequence[Tensor], step: float = 1e-3):
    """Central finite differences against taped gradients.

    Returns the max relative error over all coordinates of ``tensors``.
    ``fn()`` must return a scalar Tensor built from ``tensors``.
    """
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    analytic = [np.array(t.grad, copy=True) for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            denom = max(abs(num), abs(float(gflat[i])), 1.0)
            worst = max(worst, abs(num - float(gflat[i])) / denom)
    return worst
