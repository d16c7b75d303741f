"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array.  Feature maps are 4-D ``(N, C, H, W)``;
parameters, per-image reductions and losses use lower ranks.  Operations
build a graph through parent links; :func:`backward` sorts it
topologically, replays it once in reverse and then releases it.

Numeric width is a process-wide setting (32 or 64 bit) chosen with
:func:`set_precision`, the :func:`precision` context manager, or the
``ICANET_PRECISION`` environment variable.  Reductions inside convolution,
pooling, interpolation and batch normalization accumulate in float64 and
are narrowed afterwards.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "expand",
    "tsum",
    "tmean",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "interp_bilinear",
    "bilinear_matrix",
    "avg_pool",
    "relu",
    "sigmoid",
    "softplus",
    "batch_norm",
    "backward",
    "grad_check",
    "grad_check_detail",
    "kink_monitor",
    "relative_error",
    "no_grad",
    "precision",
    "set_precision",
    "get_dtype",
]

_DTYPES = {32: np.float32, 64: np.float64}
_bits = int(os.environ.get("ICANET_PRECISION", "32"))
if _bits not in _DTYPES:
    raise ValueError(f"ICANET_PRECISION must be 32 or 64, got {_bits}")

_local = threading.local()

Scalar = Union[int, float]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def get_dtype() -> type:
    return _DTYPES[_bits]


def set_precision(bits: int) -> None:
    global _bits
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _bits = bits


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the working precision."""
    old = _bits
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(old)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    old = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


@contextlib.contextmanager
def kink_monitor() -> Iterator[list]:
    """Collect the sign mask of every ReLU input evaluated in this thread.

    Two evaluations whose mask lists differ straddle a kink, where a central
    difference does not approximate the (sub)gradient.
    """
    old = getattr(_local, "kinks", None)
    masks: list = []
    _local.kinks = masks
    try:
        yield masks
    finally:
        _local.kinks = old


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode AD.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` buffer of
    the same shape, accumulated by :func:`backward` and cleared explicitly with
    :meth:`zero_grad`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._consumed = False
        return t

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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"


check_finite = True


def _make(arr: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if check_finite and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(arr)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """Elementwise sum; tensor operands must have identical shapes."""
    if not isinstance(b, Tensor):
        return _make(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        s = a.dtype.type(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``x`` to ``shape`` (numpy rules); backward sums the copies."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    in_shape = x.shape
    lead = len(shape) - len(in_shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(in_shape) if n == 1 and shape[lead + i] != 1
    )

    def _bw(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(in_shape),)

    return _make(np.ascontiguousarray(out), (x,), _bw, "expand")


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    in_shape = x.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape),)

    return _make(out, (x,), _bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Join 4-D tensors along the channel axis, preserving list order."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: empty list")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: N/H/W mismatch {ref} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def _bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, parts, _bw, "concat")


# ---------------------------------------------------------------------------
# convolution, resampling, pooling
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Zero-padded 2-D cross-correlation (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if kh != kw or kh < 1:
        raise ShapeError(f"conv2d: square kernel required, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad hyperparameters stride={stride} padding={padding} dilation={dilation}")
    k = kh
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{w}")

    xp = x.data.astype(np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(n, ho, wo, c, k, k),
        strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation),
        writeable=False,
    )
    cols = win.reshape(n * ho * wo, c * k * k)
    wmat = weight.data.astype(np.float64).reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(np.float64)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).astype(x.dtype)
    parents = (x, weight) if bias is None else (x, weight, bias)
    hp, wp = xp.shape[2], xp.shape[3]

    def _bw(g):
        gmat = g.astype(np.float64).transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape).astype(weight.dtype)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + w].astype(x.dtype)
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=0).astype(bias.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, parents, _bw, "conv2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix, align-corners-false."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"bilinear resize needs positive extents, got {n_in} -> {n_out}")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def interp_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a 4-D tensor to ``(out_h, out_w)``."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"interp_bilinear: zero target extent {out_h}x{out_w}")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        return x
    ah = bilinear_matrix(h, out_h)
    aw = bilinear_matrix(w, out_w)
    out = (ah @ x.data.astype(np.float64) @ aw.T).astype(x.dtype)

    def _bw(g):
        return ((ah.T @ g.astype(np.float64) @ aw).astype(x.dtype),)

    return _make(out, (x,), _bw, "interp")


def avg_pool(x: Tensor, ratio: int) -> Tensor:
    """Non-overlapping ``ratio x ratio`` mean pooling."""
    if ratio < 1:
        raise ValueError(f"avg_pool: ratio must be >= 1, got {ratio}")
    if ratio == 1:
        return x
    n, c, h, w = x.shape
    if h % ratio or w % ratio:
        raise ShapeError(f"avg_pool: extents {h}x{w} not divisible by {ratio}")
    blocks = x.data.astype(np.float64).reshape(n, c, h // ratio, ratio, w // ratio, ratio)
    out = blocks.mean(axis=(3, 5)).astype(x.dtype)
    inv = 1.0 / (ratio * ratio)

    def _bw(g):
        up = np.repeat(np.repeat(g.astype(np.float64) * inv, ratio, axis=2), ratio, axis=3)
        return (up.astype(x.dtype),)

    return _make(out, (x,), _bw, "avg_pool")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    kinks = getattr(_local, "kinks", None)
    if kinks is not None:
        kinks.append(mask)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|)."""
    z = x.data
    out = (np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))).astype(z.dtype)
    s = _sigmoid_np(z)
    return _make(out, (x,), lambda g: (g * s,), "softplus")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a 4-D tensor.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, PyTorch convention).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, parameters have {gamma.shape}")
    x64 = x.data.astype(np.float64)
    bshape = (1, c, 1, 1)
    g64 = gamma.data.astype(np.float64).reshape(bshape)
    b64 = beta.data.astype(np.float64).reshape(bshape)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError(f"batch_norm: training needs N*H*W >= 2 samples per channel, got {m}")
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var * (m / (m - 1))
    else:
        m = None
        mean = running_mean.data.astype(np.float64)
        var = running_var.data.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (x64 - mean.reshape(bshape)) * invstd
    out = (xhat * g64 + b64).astype(x.dtype)

    def _bw(g):
        g = g.astype(np.float64)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype)
        gbeta = g.sum(axis=(0, 2, 3)).astype(beta.dtype)
        dxhat = g * g64
        if training:
            gx = invstd / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * invstd
        return gx.astype(x.dtype), ggamma, gbeta

    return _make(out, (x, gamma, beta), _bw, "batch_norm")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The recorded graph is released afterwards; a second call on the same
    loss raises ``RuntimeError``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; run the forward pass again")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def _masks_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(f: Callable[[], float], x: Tensor, coords: Iterable[int], h: float) -> tuple:
    """Central differences of ``f`` w.r.t. selected flat coordinates of ``x``.

    ``x.data`` is perturbed in place and restored.  The denominator uses the
    perturbation actually representable in ``x``'s dtype.  Returns the
    differences and a mask of coordinates whose two evaluations disagree on
    some ReLU sign (a kink lies within ``h``).
    """
    flat = x.data.reshape(-1)
    out, crossed = [], []
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        with kink_monitor() as mp:
            fp = f()
        flat[i] = orig - h
        xm = float(flat[i])
        with kink_monitor() as mm:
            fm = f()
        flat[i] = orig
        out.append((fp - fm) / (xp - xm))
        crossed.append(not _masks_equal(mp, mm))
    res = np.array(out, dtype=np.float64)
    if not np.isfinite(res).all():
        raise NonFiniteError("numeric gradient is not finite")
    return res, np.array(crossed, dtype=bool)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip: Optional[np.ndarray] = None,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor.  With ``max_coords`` a random subset
    of coordinates is checked; ``skip`` masks coordinates to ignore.
    Coordinates whose perturbation flips any ReLU are dropped (and, when
    sampling, replaced by fresh ones) unless ``skip_kinks`` is false.
    """
    return grad_check_detail(f, x, h, max_coords, rng, skip, skip_kinks)[0]


def grad_check_detail(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip: Optional[np.ndarray] = None,
    skip_kinks: bool = True,
    analytic: Optional[np.ndarray] = None,
) -> tuple:
    """As :func:`grad_check`; returns ``(max_rel_err, n_checked, n_kinks)``.

    ``analytic`` supplies a precomputed gradient instead of running backward.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    if analytic is None:
        if not x.requires_grad:
            raise ValueError("grad_check: x must require grad")
        x.zero_grad()
        backward(f(x))
        analytic = x.grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if not np.isfinite(analytic).all():
        raise NonFiniteError("analytic gradient is not finite")
    coords = np.arange(x.size)
    if skip is not None:
        coords = coords[~np.asarray(skip, dtype=bool).reshape(-1)]
    if max_coords is not None and coords.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.permutation(coords)
        want = max_coords
    else:
        want = coords.size
    worst, checked, kinks, pos = 0.0, 0, 0, 0
    with no_grad():
        while checked < want and pos < coords.size:
            batch = coords[pos:pos + want - checked]
            pos += batch.size
            numeric, crossed = numeric_grad(lambda: f(x).item(), x, batch, h)
            keep = ~crossed if skip_kinks else np.ones_like(crossed)
            kinks += int((~keep).sum())
            if keep.any():
                err = relative_error(analytic[batch[keep]], numeric[keep])
                worst = max(worst, float(err.max()))
            checked += int(keep.sum())
    return worst, checked, kinks
