"""Dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap contiguous numpy float32/float64 buffers. Every differentiable
operation whose inputs require gradients appends a backward closure to a
thread-local tape; ``backward`` replays the tape in reverse and clears it.

Broadcasting is deliberately restricted: binary operations accept equal
shapes, python scalars, or a trailing-axis operand (affine parameters such
as a per-feature gain/bias). Anything else must be made explicit through
``reshape`` / ``broadcast_to``.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "clear_tape",
    "tape_length",
    "assert_finite",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "sqrt",
    "sigmoid",
    "silu",
    "softplus",
    "reshape",
    "transpose",
    "slice_along",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "broadcast_to",
    "permute_rows",
    "layer_norm",
    "depthwise_conv1d",
    "make_op",
    "grad_check",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Threshold above which softplus(x) is computed as x + log1p(exp(-x)).
_SOFTPLUS_CUTOFF = 20.0


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.records: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []
        self.enabled = True


_STATE = _TapeState()


class Tensor:
    """A dense array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, copy: bool = True):
        arr = np.array(data, dtype=dtype, copy=copy or None)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _bad_item(t: Tensor) -> float:
    raise DimensionError(f"item() requires a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, copy=False)


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


def _recording(*tensors: Tensor) -> bool:
    return _STATE.enabled and any(t.requires_grad for t in tensors)


def _record(out: Tensor, fn: Callable[[np.ndarray], None]) -> None:
    out.requires_grad = True
    _STATE.records.append((out, fn))


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    delta = np.asarray(delta, dtype=t.data.dtype)
    if delta.shape != t.data.shape:
        delta = delta.reshape(t.data.shape)
    if t.grad is None:
        t.grad = delta.copy()
    else:
        t.grad += delta


def backward(t: Tensor) -> None:
    """Seed a scalar output with gradient 1 and replay the tape in reverse.

    The tape is consumed: a second backward needs a fresh forward pass.
    """
    if t.size != 1:
        raise DimensionError(f"backward requires a scalar output, got shape {t.shape}")
    records = _STATE.records
    _STATE.records = []
    t.grad = np.ones_like(t.data)
    for out, fn in reversed(records):
        g = out.grad
        if g is not None:
            fn(g)


def clear_tape() -> None:
    _STATE.records.clear()


def tape_length() -> int:
    return len(_STATE.records)


def assert_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise EvaluationError(f"{what} contains non-finite values")


def make_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_factory: Callable[["Tensor"], Callable[[np.ndarray], None]],
) -> Tensor:
    """Wrap a raw forward result as a Tensor with a custom backward closure.

    ``backward_factory`` receives the output tensor and returns the backward
    function; that function receives the output gradient and must accumulate
    input gradients itself (see ``accumulate_grad``). The factory is only
    invoked when recording is active and some input requires gradients.
    """
    out = Tensor(data, copy=False)
    if _recording(*inputs):
        _record(out, backward_factory(out))
    return out


# Alias used by custom ops in other modules.
accumulate_grad = _accum


def _is_trailing(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and small == big[len(big) - len(small):]


def _check_binary(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if _is_trailing(a.shape, b.shape) or _is_trailing(b.shape, a.shape):
        return
    raise DimensionError(
        f"shapes {a.shape} and {b.shape} differ and are not a trailing-axis pair; "
        "use reshape/broadcast_to for anything beyond affine parameters"
    )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a.data, b.data)
    out = Tensor(a.data + b.data, copy=False)
    if _recording(a, b):
        def bk(g, a=a, b=b):
            _accum(a, _reduce_to(g, a.data.shape))
            _accum(b, _reduce_to(g, b.data.shape))
        _record(out, bk)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a.data, b.data)
    out = Tensor(a.data - b.data, copy=False)
    if _recording(a, b):
        def bk(g, a=a, b=b):
            _accum(a, _reduce_to(g, a.data.shape))
            _accum(b, -_reduce_to(g, b.data.shape))
        _record(out, bk)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a.data, b.data)
    out = Tensor(a.data * b.data, copy=False)
    if _recording(a, b):
        def bk(g, a=a, b=b):
            _accum(a, _reduce_to(g * b.data, a.data.shape))
            _accum(b, _reduce_to(g * a.data, b.data.shape))
        _record(out, bk)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a.data, b.data)
    out = Tensor(a.data / b.data, copy=False)
    if _recording(a, b):
        def bk(g, a=a, b=b):
            _accum(a, _reduce_to(g / b.data, a.data.shape))
            _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))
        _record(out, bk)
    return out


def neg(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(-x.data, copy=False)
    if _recording(x):
        def bk(g, x=x):
            _accum(x, -g)
        _record(out, bk)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul is 2D-only, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, copy=False)
    if _recording(a, b):
        def bk(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        _record(out, bk)
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data), copy=False)
    if _recording(x):
        def bk(g, x=x, out=out):
            _accum(x, g * out.data)
        _record(out, bk)
    return out


def sqrt(x) -> Tensor:
    """Elementwise square root; not differentiable at exact zeros."""
    x = _as_tensor(x)
    out = Tensor(np.sqrt(x.data), copy=False)
    if _recording(x):
        def bk(g, x=x, out=out):
            _accum(x, g * (0.5 / out.data))
        _record(out, bk)
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(_sigmoid_np(x.data), copy=False)
    if _recording(x):
        def bk(g, x=x, out=out):
            s = out.data
            _accum(x, g * s * (1.0 - s))
        _record(out, bk)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    out = Tensor(x.data * s, copy=False)
    if _recording(x):
        def bk(g, x=x, s=s):
            _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))
        _record(out, bk)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    big = x > _SOFTPLUS_CUTOFF
    out = np.empty_like(x)
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out


def softplus(x) -> Tensor:
    """log(1 + e^x), overflow-safe for large x."""
    x = _as_tensor(x)
    out = Tensor(_softplus_np(x.data), copy=False)
    if _recording(x):
        def bk(g, x=x):
            _accum(x, g * _sigmoid_np(x.data))
        _record(out, bk)
    return out


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape), copy=False)
    if _recording(x):
        def bk(g, x=x):
            _accum(x, g.reshape(x.data.shape))
        _record(out, bk)
    return out


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes), copy=False)
    if _recording(x):
        inv = tuple(np.argsort(axes))
        def bk(g, x=x, inv=inv):
            _accum(x, np.transpose(g, inv))
        _record(out, bk)
    return out


def slice_along(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    key = (slice(None),) * axis + (slice(start, stop),)
    out = Tensor(x.data[key], copy=False)
    if _recording(x):
        def bk(g, x=x, key=key):
            full = np.zeros_like(x.data)
            full[key] = g
            _accum(x, full)
        _record(out, bk)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis), copy=False)
    if _recording(*ts):
        sizes = [t.data.shape[axis] for t in ts]
        def bk(g, ts=ts, sizes=sizes, axis=axis):
            offset = 0
            for t, n in zip(ts, sizes):
                key = (slice(None),) * axis + (slice(offset, offset + n),)
                _accum(t, g[key])
                offset += n
        _record(out, bk)
    return out


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), copy=False)
    if _recording(x):
        def bk(g, x=x, axis=axis, keepdims=keepdims):
            if axis is None:
                _accum(x, np.broadcast_to(g, x.data.shape))
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(g, x.data.shape))
        _record(out, bk)
    return out


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    s = tensor_sum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def broadcast_to(x, shape) -> Tensor:
    """Materialize an explicit broadcast of x to ``shape``."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if len(shape) < x.ndim:
        raise DimensionError(f"cannot broadcast {x.shape} to smaller rank {shape}")
    try:
        view = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from e
    out = Tensor(np.ascontiguousarray(view), copy=False)
    if _recording(x):
        lead = len(shape) - x.ndim
        reduced = [i for i in range(lead)]
        reduced += [lead + i for i in range(x.ndim) if x.data.shape[i] == 1 and shape[lead + i] != 1]
        def bk(g, x=x, reduced=tuple(reduced), lead=lead):
            if reduced:
                g = g.sum(axis=reduced, keepdims=True)
            if lead:
                g = g.reshape(x.data.shape)
            _accum(x, g)
        _record(out, bk)
    return out


def permute_rows(x, perm: np.ndarray, inv: np.ndarray) -> Tensor:
    """Gather rows (axis 0) by a bijective index array ``perm``."""
    x = _as_tensor(x)
    if len(perm) != x.data.shape[0]:
        raise DimensionError(f"permutation length {len(perm)} != leading extent {x.data.shape[0]}")
    out = Tensor(x.data[perm], copy=False)
    if _recording(x):
        def bk(g, x=x, inv=inv):
            _accum(x, g[inv])
        _record(out, bk)
    return out


def layer_norm(x, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optional affine."""
    x = _as_tensor(x)
    d = x.data.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.data.shape != (d,):
            raise DimensionError(f"{name} shape {p.data.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    out = Tensor(y, copy=False)
    inputs = [t for t in (x, gamma, beta) if t is not None]
    if _recording(*inputs):
        def bk(g, x=x, gamma=gamma, beta=beta, xhat=xhat, inv_std=inv_std):
            lead_axes = tuple(range(g.ndim - 1))
            if beta is not None:
                _accum(beta, g.sum(axis=lead_axes))
            if gamma is not None:
                _accum(gamma, (g * xhat).sum(axis=lead_axes))
                dxhat = g * gamma.data
            else:
                dxhat = g
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2))
        _record(out, bk)
    return out


def depthwise_conv1d(x, kernel, causal: bool = True) -> Tensor:
    """Per-channel 1D convolution along axis 0 of an [L, d] tensor.

    ``kernel`` is [k, d] with the last tap applied at the current step.
    Causal mode left-pads with k-1 zeros so position i depends only on
    inputs at positions <= i; non-causal mode pads symmetrically ('same').
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2:
        raise DimensionError(f"expected [L,d] input and [k,d] kernel, got {x.shape}, {kernel.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise DimensionError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    L, d = x.data.shape
    k = kernel.data.shape[0]
    if k < 1:
        raise DimensionError("kernel must have at least one tap")
    if causal:
        lp, rp = k - 1, 0
    else:
        lp = (k - 1) // 2
        rp = k - 1 - lp
    xp = np.zeros((L + k - 1, d), dtype=np.result_type(x.data, kernel.data))
    xp[lp:lp + L] = x.data
    y = np.zeros((L, d), dtype=xp.dtype)
    for s in range(k):
        y += kernel.data[s] * xp[s:s + L]
    out = Tensor(y, copy=False)
    if _recording(x, kernel):
        def bk(g, x=x, kernel=kernel, xp=xp, L=L, k=k, lp=lp):
            dk = np.empty_like(kernel.data)
            for s in range(k):
                dk[s] = (g * xp[s:s + L]).sum(axis=0)
            _accum(kernel, dk)
            dxp = np.zeros_like(xp)
            for s in range(k):
                dxp[s:s + L] += kernel.data[s] * g
            _accum(x, dxp[lp:lp + L])
        _record(out, bk)
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central finite differences.

    ``f`` must be scalar-valued. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) per coordinate. x.grad is left reset.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    saved_rg = x.requires_grad
    x.requires_grad = True
    x.grad = None
    clear_tape()
    try:
        y = f(x)
        if y.size != 1:
            raise DimensionError("grad_check requires a scalar-valued function")
        if not np.isfinite(y.data).all():
            raise EvaluationError("function value is non-finite")
        backward(y)
        analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64).copy()
        flat = x.data.flat
        n = x.data.size
        numeric = np.zeros(n, dtype=np.float64)
        with no_grad():
            for i in range(n):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise EvaluationError(f"non-finite evaluation while probing coordinate {i}")
                numeric[i] = (fp - fm) / (2.0 * h)
        an = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-8)
        return float(np.max(np.abs(an - numeric) / denom))
    finally:
        x.requires_grad = saved_rg
        x.grad = None
        clear_tape()
