"""Dense tensor substrate with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float32 or float64). Differentiable
operations record themselves on the currently active :class:`Tape`; calling
:func:`backward` on a scalar output replays the tape in exact reverse
execution order and accumulates gradients into every reachable leaf. All
reductions use numpy's fixed summation order, so two identical forward +
backward passes produce bit-identical gradients.

The gradient oracle lives here too: :func:`finite_diff_check` compares tape
gradients against central finite differences, coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit


class ShapeError(ValueError):
    """Operand shapes violate an operation's preconditions."""


class ConfigError(ValueError):
    """Invalid configuration value (bad kernel size, dimension mismatch...)."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar backward, missing tape...)."""


class NumericError(ArithmeticError):
    """NaN/Inf surfaced at an operation boundary."""


class OracleError(RuntimeError):
    """The finite-difference oracle detected a non-deterministic function."""


PRECISIONS = {"single": np.float32, "double": np.float64}

_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass. Nested tapes are allowed;
    ops record on the innermost one.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False


class Tensor:
    """Immutable-by-convention dense array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._tape = None

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor; ``grad`` starts as zeros of the same shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value, dtype=None):
        super().__init__(np.array(value), requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        arr = np.asarray(value, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(
                f"cannot assign shape {arr.shape} to parameter {self.name!r} "
                f"of shape {self.data.shape}")
        self.data = arr
        self.grad = np.zeros_like(arr)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def check_unique_names(params):
    seen = set()
    for p in params:
        if p.name in seen:
            raise ContractError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


def as_tensor(x, like=None):
    """Wrap scalars/arrays as constant Tensors, matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(x, dtype=dtype)


def from_op(data, parents, vjp):
    """Create an op output and register it on the active tape.

    ``vjp(grad)`` must return one gradient array per parent (``None`` for
    parents that need no gradient), without mutating ``grad``.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def backward(loss: Tensor):
    """Populate gradients of every leaf reachable from a scalar ``loss``.

    Replays the recording tape in exact reverse execution order; gradient
    accumulation is out-of-place and sequential, hence deterministic.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active Tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._vjp is None:
            continue
        contribs = node._vjp(node.grad)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
        if not isinstance(node, Parameter) and node is not loss:
            node.grad = None  # release intermediate memory early


def guard_finite(x, where: str):
    """Raise NumericError if ``x`` contains NaN/Inf. Returns ``x``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values at {where}")
    return x


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed precisions {a.data.dtype.name} vs {b.data.dtype.name}")


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype(a, b, "add")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return from_op(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype(a, b, "sub")

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return from_op(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same_dtype(a, b, "mul")

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return from_op(a.data * b.data, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return from_op(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return from_op(out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = as_tensor(a)
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return from_op(out_data, (a,), lambda g: (g / (2.0 * out_data),))


def sigmoid(a):
    a = as_tensor(a)
    y = _expit(a.data)
    return from_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a):
    """log(1 + e^x), computed stably; derivative is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return from_op(y, (a,), lambda g: (g * _expit(x),))


def smooth_gate_nl(a):
    """x * sigmoid(x): the smooth sigmoid-weighted-linear gate."""
    a = as_tensor(a)
    s = _expit(a.data)
    return from_op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a):
    """Gaussian-error-linear unit, exact erf form."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return from_op(x * cdf, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape).copy(),)

    return from_op(out_data, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / count, a.shape).copy(),)

    return from_op(out_data, (a,), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return from_op(y, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return from_op(y, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with broadcastable batch dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # weight fast path: fold every batch/row dim into one GEMM
                k = a.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return from_op(out_data, (a, b), vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    out_data = np.broadcast_to(a.data, shape)
    return from_op(out_data.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return from_op(out_data, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return from_op(np.ascontiguousarray(a.data[idx]), (a,), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize the last dimension, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def vjp(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            gb = g.sum(axis=axes)
        if x.requires_grad:
            gdot = g * gamma.data
            m1 = gdot.mean(axis=-1, keepdims=True)
            m2 = (gdot * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (gdot - m1 - xhat * m2)
        return gx, gg, gb

    return from_op(out_data, (x, gamma, beta), vjp)


def l2_normalize(x, axis, eps):
    """Divide by (L2 norm along ``axis`` + eps); zero vectors map to zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = n + eps
    y = x.data / denom

    def vjp(g):
        dot = (x.data * g).sum(axis=axis, keepdims=True)
        n_safe = np.maximum(n, 1e-30)
        return (g / denom - x.data * (dot / (n_safe * denom * denom)),)

    return from_op(y, (x,), vjp)


# ---------------------------------------------------------------------------
# depthwise temporal convolution
# ---------------------------------------------------------------------------

def depthwise_conv1d(x, kernel, causal=True, pad_mode="zero"):
    """Per-channel 1D convolution along the middle (time) axis.

    x: [L, T, C]; kernel: [C, k]. Causal mode pads k-1 positions on the left
    only, so output at time t reads inputs at times <= t; non-causal mode
    pads symmetrically and requires odd k. Tap k-1 multiplies the current
    step in causal mode; tap (k-1)//2 does in non-causal mode.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_same_dtype(x, kernel, "depthwise_conv1d")
    if x.ndim != 3 or kernel.ndim != 2:
        raise ShapeError(
            f"depthwise_conv1d expects x [L,T,C], kernel [C,k]; got {x.shape}, {kernel.shape}")
    if x.shape[2] != kernel.shape[0]:
        raise ShapeError(
            f"channel mismatch: x has {x.shape[2]} channels, kernel {kernel.shape[0]}")
    if pad_mode not in ("zero", "replicate"):
        raise ConfigError(f"unknown pad_mode {pad_mode!r}")
    k = kernel.shape[1]
    if k < 1:
        raise ConfigError("kernel size must be >= 1")
    if causal:
        left, right = k - 1, 0
    else:
        if k % 2 == 0:
            raise ConfigError("non-causal depthwise_conv1d requires odd kernel size")
        left = right = (k - 1) // 2

    T = x.shape[1]
    mode = "edge" if pad_mode == "replicate" else "constant"
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)), mode=mode)
    out_data = np.zeros_like(x.data)
    for i in range(k):
        out_data += xp[:, i:i + T, :] * kernel.data[:, i]

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i:i + T, :] += g * kernel.data[:, i]
            if pad_mode == "replicate":
                if left:
                    gxp[:, left, :] += gxp[:, :left, :].sum(axis=1)
                if right:
                    gxp[:, left + T - 1, :] += gxp[:, left + T:, :].sum(axis=1)
            gx = gxp[:, left:left + T, :]
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(k):
                gk[:, i] = (xp[:, i:i + T, :] * g).sum(axis=(0, 1))
        return gx, gk

    return from_op(out_data, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, params, step=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``f`` is a nullary function returning a scalar Tensor, built from the
    given double-precision parameters. Relative error per coordinate is
    |g - g_fd| / max(|g|, |g_fd|, 1e-8). Two initial forward evaluations
    must agree exactly, otherwise the function is non-deterministic and the
    oracle refuses to run.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(
                f"finite_diff_check requires double precision, parameter "
                f"{getattr(p, 'name', '?')!r} is {p.data.dtype.name}")

    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise OracleError(f"f is not deterministic: {v1!r} != {v2!r}")

    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape():
        loss = f()
        backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
            if rel > worst:
                worst = rel
    return worst
