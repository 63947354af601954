"""Dense tensors with reverse-mode automatic differentiation.

Differentiable ops record themselves on an explicit :class:`Tape` (a context
manager). Construction order is a valid topological order, so ``backward``
walks the node list exactly once in reverse. Outside a tape ops run as plain
numpy with no recording, which is what all evaluation paths use.

float32 is the working precision. Building tensors from float64 arrays keeps
them float64; the gradient checker relies on that to run whole graphs in
64-bit. Reductions are sequential/deterministic: identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special as _special

from .errors import ConfigError, DataError, ShapeError, UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (slow, for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out: "Tensor", inputs: tuple, grad_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_tape_stack: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of differentiable ops for one forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad
        tensor reachable from ``loss``, then clear the tape."""
        if loss.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        nid = loss.node_id
        if nid is None or nid >= len(self.nodes) or self.nodes[nid].out is not loss:
            raise UsageError("loss is not on this tape")
        pending: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.out), None)
            if grad is None:
                continue
            node.out.grad = grad
            for inp, g in zip(node.inputs, node.grad_fn(grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.node_id is not None:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = g if prev is None else prev + g
                else:
                    inp.grad = g if inp.grad is None else inp.grad + g
        self.nodes.clear()


class Tensor:
    """N-dimensional float array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """Same data, cut from the tape. Gradients never flow through it."""
        return Tensor(self.data)

    def backward(self) -> None:
        tape = _active_tape()
        if tape is None:
            raise UsageError("backward() called with no active tape")
        tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_(self, axis=axis, keepdims=keepdims)


def _make(out_data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and some input
    needs gradients."""
    out = Tensor(out_data)
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in op output")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def grad_fn(g):
        return (g * s,)

    return _make(out, (a,), grad_fn)


def shift(a: Tensor, s: float) -> Tensor:
    out = a.data + s

    def grad_fn(g):
        return (g,)

    return _make(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


# shape ops ------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    in_shape = a.data.shape
    out = np.reshape(a.data, shape)

    def grad_fn(g):
        return (np.reshape(g, in_shape),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), grad_fn)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    in_shape = a.data.shape
    in_dtype = a.data.dtype

    def grad_fn(g):
        ga = np.zeros(in_shape, dtype=in_dtype)
        ga[idx] = g
        return (ga,)

    return _make(out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, split_at, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    in_shape = a.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, in_shape),)

    return _make(out, (a,), grad_fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape),)

    return _make(out, (a,), grad_fn)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [in_shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = 1.0 / float(count)

    def grad_fn(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * inv, in_shape),)

    return _make(out, (a,), grad_fn)


# matmul ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {list(a.shape)} x {list(b.shape)}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}"
        )
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga, gb)

    return _make(out, (a, b), grad_fn)


# normalization / activations -------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    out = np.subtract(x, m)
    np.exp(out, out=out)
    denom = out.sum(axis=axis, keepdims=True)
    out /= denom

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), grad_fn)


def layernorm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-6,
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    optional affine. With ``gamma=beta=None`` this is plain whitening."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layernorm needs a last dimension >= 2, got {d}")
    xd = x.data
    x2 = np.ascontiguousarray(xd.reshape(-1, d))
    mu = x2.mean(axis=1, keepdims=True)
    xhat = x2 - mu
    var = np.einsum("rd,rd->r", xhat, xhat)[:, None]
    var /= d
    var += eps
    inv = np.sqrt(var)
    np.divide(1.0, inv, out=inv)
    xhat *= inv
    if gamma is not None:
        out = xhat * gamma.data
        out += beta.data
    else:
        out = xhat  # aliasing is safe: op outputs are never mutated later
    out = out.reshape(xd.shape)

    inputs = (x,) if gamma is None else (x, gamma, beta)

    def grad_fn(g):
        gx = ggamma = gbeta = None
        g2 = g.reshape(-1, d)
        dxhat = g2 if gamma is None else g2 * gamma.data
        if x.requires_grad:
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = np.einsum("rd,rd->r", dxhat, xhat)[:, None]
            m2 /= d
            gx = dxhat - m1
            gx -= xhat * m2
            gx *= inv
            gx = gx.reshape(xd.shape)
        if gamma is not None:
            if gamma.requires_grad:
                ggamma = np.einsum("rd,rd->d", g2, xhat)
            if beta.requires_grad:
                gbeta = g2.sum(axis=0)
            return (gx, ggamma, gbeta)
        return (gx,)

    return _make(out, inputs, grad_fn)


# erf: exact (scipy) in float64; in float32 a rational approximation whose
# max abs error (1.5e-7, Abramowitz & Stegun 7.1.26) sits below float32
# output resolution. Gradient checks run in float64 and see the exact form.
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


def _erf(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.float64:
        return _special.erf(x)
    ax = np.abs(x)
    t = _AS_P * ax
    t += 1.0
    np.divide(1.0, t, out=t)
    poly = t * _AS_A[4]
    for c in (_AS_A[3], _AS_A[2], _AS_A[1], _AS_A[0]):
        poly += c
        poly *= t
    e = ax
    e *= ax
    np.negative(e, out=e)
    np.exp(e, out=e)
    poly *= e
    np.subtract(1.0, poly, out=poly)
    return np.copysign(poly, x, out=poly)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    xd = x.data
    cdf = _erf(xd * _INV_SQRT2)
    cdf += 1.0
    cdf *= 0.5
    out = xd * cdf

    def grad_fn(g):
        pdf = xd * xd
        pdf *= -0.5
        np.exp(pdf, out=pdf)
        pdf *= _INV_SQRT2PI
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make(out, (x,), grad_fn)


# structured kernels ----------------------------------------------------------


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 2-d cross-correlation with zero padding and stride 1.

    ``x`` is ``[..., C, H, W]``, ``kernel`` is ``[C, kh, kw]`` with odd kh/kw;
    the output spatial size equals the input's.
    """
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be [C, kh, kw], got {list(kernel.shape)}")
    c, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {kh}x{kw}")
    if x.ndim < 3 or x.shape[-3] != c:
        raise ShapeError(
            f"channel mismatch: input {list(x.shape)} vs kernel {list(kernel.shape)}"
        )
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xd, kd = x.data, kernel.data
    h, w = xd.shape[-2:]
    lead_shape = xd.shape[:-3]
    x4 = np.ascontiguousarray(xd.reshape(-1, c, h, w))
    b = x4.shape[0]
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=xd.dtype)
    xp[:, :, ph : ph + h, pw : pw + w] = x4
    # sliding windows [b, c, h, w, kh, kw]; contraction over the window axes
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, h, w, kh, kw), strides=(s[0], s[1], s[2], s[3], s[2], s[3])
    )
    out = np.einsum("bchwij,cij->bchw", windows, kd).reshape(xd.shape)

    def grad_fn(g):
        gx = gk = None
        g4 = np.ascontiguousarray(g.reshape(-1, c, h, w))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            buf = np.empty_like(g4)
            for dy in range(kh):
                for dx in range(kw):
                    np.multiply(g4, kd[:, dy, dx][:, None, None], out=buf)
                    gxp[:, :, dy : dy + h, dx : dx + w] += buf
            gx = gxp[:, :, ph : ph + h, pw : pw + w].reshape(xd.shape)
        if kernel.requires_grad:
            gk = np.einsum("bchwij,bchw->cij", windows, g4)
        return (gx, gk)

    return _make(out, (x, kernel), grad_fn)


def _cubic_weights(t: np.ndarray, a: float = -0.75) -> np.ndarray:
    """Keys cubic convolution kernel, evaluated at |t|."""
    t = np.abs(t)
    w = np.where(
        t <= 1.0,
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0,
        np.where(t < 2.0, a * (((t - 5.0) * t + 8.0) * t - 4.0), 0.0),
    )
    return w


_resize_matrix_cache: dict[tuple, np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """1-d bicubic interpolation matrix (n_out x n_in), half-pixel centers,
    edge-clamped sampling."""
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _resize_matrix_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        base = math.floor(src)
        f = src - base
        idx = np.array([base - 1, base, base + 1, base + 2])
        w = _cubic_weights(np.array([1.0 + f, f, 1.0 - f, 2.0 - f]))
        np.add.at(m[o], np.clip(idx, 0, n_in - 1), w)
    m = m.astype(dtype)
    m.flags.writeable = False
    _resize_matrix_cache[key] = m
    return m


def bicubic_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bicubic resize of the last two axes (a=-0.75, half-pixel
    centers, edge clamping)."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be >= 1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bicubic_resize needs >=2-d input, got {list(x.shape)}")
    h, w = x.shape[-2:]
    wr = _resize_matrix(h, out_h, x.dtype)
    wct = _resize_matrix(w, out_w, x.dtype).T
    out = np.matmul(np.matmul(wr, x.data), wct)

    def grad_fn(g):
        return (np.matmul(np.matmul(wr.T, g), wct.T),)

    return _make(out, (x,), grad_fn)


# losses -----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {list(logits.shape)}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {list(labels.shape)} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise DataError(f"label {int(bad)} out of range [0, {c})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = z[np.arange(b), labels][:, None]
    out = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def grad_fn(g):
        p = np.exp(z - lse)
        p[np.arange(b), labels] -= 1.0
        p *= g / b
        return (p,)

    return _make(out, (logits,), grad_fn)


def smooth_l1(x: Tensor, y: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style loss with mean reduction: 0.5 d^2/beta for |d| < beta,
    |d| - 0.5 beta otherwise."""
    if x.shape != y.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {list(x.shape)} vs {list(y.shape)}")
    if beta <= 0:
        raise ConfigError(f"smooth_l1 beta must be > 0, got {beta}")
    d = x.data - y.data
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    out = np.asarray(per.mean(), dtype=d.dtype)
    n = d.size

    def grad_fn(g):
        gx = np.where(quad, d / beta, np.sign(d)) * (g / n)
        return (gx, -gx)

    return _make(out, (x, y), grad_fn)


def kl_div(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)) * T^2, batch-mean.

    Built from primitive ops so gradients flow to both operands.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(
            f"kl_div shapes differ: {list(student_logits.shape)} vs "
            f"{list(teacher_logits.shape)}"
        )
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    inv_t = 1.0 / temperature
    ls = log_softmax(student_logits * inv_t, axis=-1)
    lt = log_softmax(teacher_logits * inv_t, axis=-1)
    per = (exp(lt) * (lt - ls)).sum(axis=-1)
    return per.mean() * (temperature * temperature)
