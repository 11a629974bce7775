"""Dense float tensor with reverse-mode automatic differentiation.

The graph is implicit: every tensor created by an op records its parents and a
backward closure, plus a monotonically increasing creation id. Creation order
is a topological order (an op's inputs always exist before its output), so
``backward`` replays closures in reverse creation order, visiting each record
exactly once. Same graph + same values gives bitwise-identical gradients.

Storage is float32 by default (float64 is accepted everywhere and is what the
gradient checker uses); convolutions, reductions and batch-norm statistics
accumulate in float64 regardless of storage dtype. Any op that produces a
non-finite value raises ``NumericalError``.
"""

import contextlib
from itertools import count

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigurationError, NumericalError, ShapeMismatchError

_ids = count()
_GRAD_ENABLED = True
_COST: list | None = None


@contextlib.contextmanager
def cost_counter():
    """Record (op_kind, flops, output_shape) for every op run inside the block.

    Conventions: one multiply-accumulate = 2 flops; conv = 2*k^2*Cin*Cout*H'*W'
    (bias excluded); elementwise ops and batchnorm = output size; maxpool =
    output size; bilinear upsample = 8 * output size (4 taps, mul + add);
    reductions = input size; concat/slice/dropout = free.
    """
    global _COST
    prev = _COST
    _COST = []
    try:
        yield _COST
    finally:
        _COST = prev


def _cost(kind: str, flops: int, shape: tuple) -> None:
    if _COST is not None:
        _COST.append((kind, int(flops), tuple(shape)))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} produced non-finite values")
    return arr


def _as_array(data, dtype=np.float32) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _wrap_const(v, like: Tensor) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    _finite("gradient", g)
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable tensor that requires it.

    Gradients accumulate additively across fan-out; traversal is in reverse
    creation order with each record visited exactly once.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError("backward requires a scalar loss tensor")
    seen = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    order = sorted((t for t in seen.values() if t._backward is not None),
                   key=lambda t: t._id, reverse=True)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for t in order:
        t._backward(t.grad)


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops

def add(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    out_data = _finite("add", a.data + b.data)
    _cost("add", out_data.size, out_data.shape)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    out_data = _finite("mul", a.data * b.data)
    _cost("mul", out_data.size, out_data.shape)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def div(a: Tensor, b) -> Tensor:
    b = _wrap_const(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):  # _finite turns these into errors
        out_data = _finite("div", a.data / b.data)
    _cost("div", out_data.size, out_data.shape)

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), back)


def pow_const(x: Tensor, p: float) -> Tensor:
    """x**p for a constant exponent; differentiable at 0 requires p == 0 or p >= 1."""
    out_data = _finite("pow", x.data ** p)
    _cost("pow", out_data.size, out_data.shape)

    def back(g):
        if p == 0:
            _accum(x, np.zeros_like(x.data))
        else:
            _accum(x, g * p * x.data ** (p - 1))

    return _make(out_data, (x,), back)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    _cost("relu", out_data.size, out_data.shape)

    def back(g):
        _accum(x, g * (x.data > 0))

    return _make(out_data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = _finite("sigmoid", expit(x.data))
    _cost("sigmoid", s.size, s.shape)

    def back(g):
        _accum(x, g * s * (1 - s))

    return _make(s, (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated stably; derivative is sigmoid(x)."""
    out_data = _finite("softplus", np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data))
    _cost("softplus", out_data.size, out_data.shape)

    def back(g):
        _accum(x, g * expit(x.data))

    return _make(out_data, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(np.sum(x.data, dtype=np.float64), dtype=x.data.dtype)
    _cost("sum", x.data.size, out_data.shape)

    def back(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), back)


def mean_all(x: Tensor) -> Tensor:
    out_data = np.asarray(np.sum(x.data, dtype=np.float64) / x.data.size, dtype=x.data.dtype)
    _cost("mean", x.data.size, out_data.shape)

    def back(g):
        _accum(x, np.broadcast_to(g / x.data.size, x.data.shape))

    return _make(out_data, (x,), back)


# ---------------------------------------------------------------------------
# structural ops

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeMismatchError(
            f"concat_channels needs matching spatial dims, got {a.data.shape} and {b.data.shape}"
        )
    ca = a.data.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def back(g):
        _accum(a, g[:ca])
        _accum(b, g[ca:])

    return _make(out_data, (a, b), back)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 3 or not (0 <= start < stop <= x.data.shape[0]):
        raise ShapeMismatchError(
            f"invalid channel slice [{start}:{stop}] for shape {x.data.shape}"
        )
    out_data = x.data[start:stop].copy()

    def back(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        _accum(x, full)

    return _make(out_data, (x,), back)


# ---------------------------------------------------------------------------
# spatial ops

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[Cin,H,W] with w[Cout,Cin,k,k]; float64 partial sums."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects x[Cin,H,W], w[Cout,Cin,k,k]; got {x.data.shape}, {w.data.shape}"
        )
    cout, cin, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be square with odd size, got {k}x{k2}")
    if x.data.shape[0] != cin:
        raise ShapeMismatchError(
            f"conv2d input has {x.data.shape[0]} channels, weight expects {cin}"
        )
    if b.data.shape != (cout,):
        raise ShapeMismatchError(f"conv2d bias shape {b.data.shape} != ({cout},)")
    if padding < 0 or stride < 1:
        raise ConfigurationError("conv2d requires padding >= 0 and stride >= 1")
    h, wd = x.data.shape[1], x.data.shape[2]
    for size in (h, wd):
        span = size + 2 * padding - k
        if span < 0 or span % stride != 0:
            raise ConfigurationError(
                f"conv2d output size not a positive integer for input {size}, "
                f"k={k}, stride={stride}, padding={padding}"
            )

    out_data = _finite("conv2d", kernels.conv2d_forward(x.data, w.data, b.data, stride, padding))
    _cost("conv2d", 2 * k * k * cin * cout * out_data.shape[1] * out_data.shape[2], out_data.shape)

    def back(g):
        gx, gw, gb = kernels.conv2d_backward(x.data, w.data, g, stride, padding)
        _accum(x, gx)
        _accum(w, gw)
        _accum(b, gb)

    return _make(out_data, (x, w, b), back)


def maxpool2x2(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4
    )
    idx = win.argmax(axis=-1)  # first max wins ties: deterministic routing
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    _cost("maxpool2x2", out_data.size, out_data.shape)

    def back(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        _accum(x, gx)

    return _make(out_data, (x,), back)


_upsample_cache: dict = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # Row i of the (2n, n) matrix holds the two bilinear taps for output i,
    # sample centers at (i + 0.5) / 2 - 0.5 (align_corners=false), edge-clamped.
    key = (n, np.dtype(dtype).name)
    m = _upsample_cache.get(key)
    if m is None:
        m = np.zeros((2 * n, n), dtype=dtype)
        for i in range(2 * n):
            src = (i + 0.5) / 2.0 - 0.5
            src = min(max(src, 0.0), n - 1.0)
            i0 = int(np.floor(src))
            frac = src - i0
            i1 = min(i0 + 1, n - 1)
            m[i, i0] += 1.0 - frac
            m[i, i1] += frac
        _upsample_cache[key] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    mh = _upsample_matrix(h, x.data.dtype)
    mw = _upsample_matrix(w, x.data.dtype)
    out_data = _finite("bilinear_upsample2x", (mh @ x.data) @ mw.T)
    _cost("bilinear_upsample2x", 8 * out_data.size, out_data.shape)

    def back(g):
        _accum(x, (mh.T @ g) @ mw)

    return _make(out_data, (x,), back)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the spatial dims of x[C,H,W].

    Running statistics (plain arrays, mutated in place) are updated only when
    ``training`` and follow the usual convention: batch variance is biased for
    normalization, unbiased in the running estimate.
    """
    c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError("batchnorm gamma/beta must be per-channel vectors")
    n = h * w
    x64 = x.data.astype(np.float64)
    if training:
        mu = x64.mean(axis=(1, 2))
        diff = x64 - mu[:, None, None]
        var = (diff * diff).mean(axis=(1, 2))
        running_mean[:] = ((1 - momentum) * running_mean + momentum * mu).astype(
            running_mean.dtype
        )
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var[:] = ((1 - momentum) * running_var + momentum * unbiased).astype(
            running_var.dtype
        )
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        diff = x64 - mu[:, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv_std[:, None, None]
    out_data = _finite(
        "batchnorm",
        (gamma.data[:, None, None] * xhat + beta.data[:, None, None]).astype(x.data.dtype),
    )
    _cost("batchnorm", out_data.size, out_data.shape)

    def back(g):
        g64 = g.astype(np.float64)
        _accum(gamma, (g64 * xhat).sum(axis=(1, 2)))
        _accum(beta, g64.sum(axis=(1, 2)))
        dxhat = g64 * gamma.data.astype(np.float64)[:, None, None]
        if training:
            dvar = (dxhat * diff).sum(axis=(1, 2)) * (-0.5) * inv_std**3
            dmu = (-dxhat * inv_std[:, None, None]).sum(axis=(1, 2)) + dvar * (
                -2.0 * diff.mean(axis=(1, 2))
            )
            gx = (
                dxhat * inv_std[:, None, None]
                + dvar[:, None, None] * 2.0 * diff / n
                + dmu[:, None, None] / n
            )
        else:
            gx = dxhat * inv_std[:, None, None]
        _accum(x, gx)

    return _make(out_data, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: inference (training=off) is the exact identity."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    mask = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / np.asarray(
        1.0 - p, dtype=x.data.dtype
    )
    out_data = x.data * mask

    def back(g):
        _accum(x, g * mask)

    return _make(out_data, (x,), back)


# ---------------------------------------------------------------------------
# verification

def gradient_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    The whole check runs in float64: x is upcast, f is re-evaluated at
    x +/- step per coordinate, and the error is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    base = np.asarray(x.data, dtype=np.float64)
    x64 = Tensor(base.copy(), requires_grad=True)
    y = f(x64)
    if y.data.size != 1:
        raise ShapeMismatchError("gradient_check requires a scalar-valued f")
    if not np.all(np.isfinite(y.data)):
        raise NumericalError("gradient_check: f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(base) if x64.grad is None else x64.grad.astype(np.float64)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
