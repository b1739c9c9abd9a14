"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a ``Tensor`` wraps a numpy float64 array,
every differentiable operation appends one node to the active ``Tape``, and
``backward`` replays the tape in reverse (execution order reversed is a
reverse topological order, so each node is visited exactly once).

Supported broadcasting is restricted to the two cases the model needs:
scalars, and a smaller operand whose shape equals the trailing dimensions of
the larger one (bias adds, affine gains).  Anything else is a shape error.

Every forward result is checked for NaN/Inf; non-finite values raise
``NumericalError`` immediately rather than propagating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericalError(ArithmeticError):
    """A forward computation produced NaN or Inf from finite inputs."""


# Fault-injection hook for the self-test negative control: maps op name to a
# multiplicative corruption applied to that op's input gradient.
_FAULT: dict[str, float] = {}


def inject_fault(op_name: str, scale: float = 1.01) -> None:
    _FAULT[op_name] = scale


def clear_faults() -> None:
    _FAULT.clear()


def _faulty(op_name: str, g: np.ndarray) -> np.ndarray:
    if op_name in _FAULT:
        return g * _FAULT[op_name]
    return g


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def append(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _ACTIVE_TAPE


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-dimensional float64 array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_g", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._g: Optional[np.ndarray] = None  # transient grad during backward
        self._from_op = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


def _record(out: Tensor, parents: tuple, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._from_op = True
        _ACTIVE_TAPE.append(_Node(out, parents, backward_fn))
    return out


def _accumulate(parent: Tensor, g: Optional[np.ndarray]) -> None:
    if g is None or not parent.requires_grad:
        return
    if parent._from_op:
        parent._g = g if parent._g is None else parent._g + g
    else:
        parent.grad = g.copy() if parent.grad is None else parent.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Consumes (clears) the active tape.  ``loss`` must be a scalar.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _ACTIVE_TAPE
    loss._g = np.ones_like(loss.data)
    if not loss._from_op:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        tape.clear()
        return
    for node in reversed(tape.nodes):
        g = node.out._g
        node.out._g = None
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            _accumulate(parent, pg)
    tape.clear()


# ---------------------------------------------------------------------------
# Broadcasting helpers (scalar and trailing-dimension only)
# ---------------------------------------------------------------------------


def _broadcast_ok(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sb) == 0 or sb == (1,):
        return sa
    if len(sa) == 0 or sa == (1,):
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"shapes {sa} and {sb} are not scalar/trailing broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of leading-dimension broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_ok(a.shape, b.shape)
    out = Tensor(_check_finite(a.data + b.data, "add"))
    return _record(out, (a, b), lambda g: (
        _unbroadcast(_faulty("add", g), a.shape),
        _unbroadcast(g, b.shape),
    ))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_ok(a.shape, b.shape)
    out = Tensor(_check_finite(a.data - b.data, "sub"))
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g, a.shape),
        _unbroadcast(-g, b.shape),
    ))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_ok(a.shape, b.shape)
    out = Tensor(_check_finite(a.data * b.data, "mul"))
    return _record(out, (a, b), lambda g: (
        _unbroadcast(_faulty("mul", g * b.data), a.shape),
        _unbroadcast(g * a.data, b.shape),
    ))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_ok(a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.data / b.data
    out = Tensor(_check_finite(val, "div"))
    return _record(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    ))


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        val = np.exp(x.data)
    out = Tensor(_check_finite(val, "exp"))
    return _record(out, (x,), lambda g: (g * out.data,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.data)
    out = Tensor(_check_finite(val, "log"))
    return _record(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore"):
        val = np.sqrt(x.data)
    out = Tensor(_check_finite(val, "sqrt"))
    return _record(out, (x,), lambda g: (g * 0.5 / out.data,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # Stable two-branch form: never exponentiates a positive argument.
    d = x.data
    val = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(_check_finite(val, "sigmoid"))
    return _record(out, (x,), lambda g: (
        _faulty("sigmoid", g * out.data * (1.0 - out.data)),
    ))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = _as_tensor(x)
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = Tensor(_check_finite(0.5 * d * (1.0 + t), "gelu"))

    def bwd(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * sech2 * dinner),)

    return _record(out, (x,), bwd)


def maximum_scalar(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; gradient is zero where clipped."""
    x = _as_tensor(x)
    mask = x.data > floor
    out = Tensor(np.where(mask, x.data, floor))
    return _record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = Tensor(_check_finite(x.data.sum(axis=axis, keepdims=keepdims), "sum"))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Matrix multiply and softmax
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``.

    Leading batch dimensions must agree, or one operand may be a plain
    2-D matrix (the weight-matrix case).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = Tensor(_check_finite(np.matmul(a.data, b.data), "matmul"))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(_check_finite(val, "softmax"))

    def bwd(g):
        y = out.data
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (_faulty("softmax", y * (g - dot)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then affine."""
    x, gain, offset = _as_tensor(x), _as_tensor(gain), _as_tensor(offset)
    if gain.shape != x.shape[-1:] or offset.shape != x.shape[-1:]:
        raise ShapeError("layer_norm gain/offset must match the last axis")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(_check_finite(xhat * gain.data + offset.data, "layer_norm"))

    def bwd(g):
        sum_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=sum_axes)
        doffset = g.sum(axis=sum_axes)
        dxhat = g * gain.data
        # Fused form of the mean/variance chain rule.
        dx = inv / n * (n * dxhat
                        - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, dgain, doffset)

    return _record(out, (x, gain, offset), bwd)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit norm; zero vectors stay zero."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = x.data / safe
    out = Tensor(_check_finite(y, "l2_normalize"))

    def bwd(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        dx = (g - y * dot) / safe
        return (np.where(norm > 0, dx, 0.0),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Structural operations
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        val = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    out = Tensor(val)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid transpose axes {axes} for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    out = Tensor(np.concatenate([t.data for t in ts], axis=ax))
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(out, tuple(ts), bwd)


def slice_(x: Tensor, slices) -> Tensor:
    """Basic rectangular slicing; gradient scatters back into a zero buffer."""
    x = _as_tensor(x)
    slices = tuple(slices)
    out = Tensor(x.data[slices].copy())

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[slices] = g
        return (dx,)

    return _record(out, (x,), bwd)


def take_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[rows[k], cols[k]]`` from a 2-D tensor into a vector."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("take_pairs expects a 2-D tensor")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(x.data[rows, cols])

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), g)
        return (dx,)

    return _record(out, (x,), bwd)


def window_gather(x: Tensor, rows: np.ndarray, cols: np.ndarray, radius: int,
                  clip: bool = False) -> Tensor:
    """Crop square windows from a ``[C, H, W]`` map.

    Returns ``[M, C, w, w]`` with ``w = 2*radius + 1``.  By default every
    window must lie fully inside the map; with ``clip=True`` out-of-bounds
    cells gather the clamped edge cell instead (callers mask those slots).
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError("window_gather expects a [C, H, W] map")
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    c, h, w = x.shape
    off = np.arange(-radius, radius + 1)
    rr = rows[:, None, None] + off[None, :, None]   # [M, w, 1]
    cc = cols[:, None, None] + off[None, None, :]   # [M, 1, w]
    if clip:
        rr = np.clip(rr, 0, h - 1)
        cc = np.clip(cc, 0, w - 1)
    elif rows.min(initial=radius) < radius or rows.max(initial=0) > h - 1 - radius \
            or cols.min(initial=radius) < radius or cols.max(initial=0) > w - 1 - radius:
        raise ShapeError("window exceeds map bounds")
    gathered = x.data[:, rr, cc]                    # [C, M, w, w]
    out = Tensor(np.ascontiguousarray(np.moveaxis(gathered, 0, 1)))

    def bwd(g):
        dx_t = np.zeros((h, w, c))
        g_t = np.moveaxis(g, 1, -1)                 # [M, w, w, C]
        np.add.at(dx_t, (rr + np.zeros_like(cc), cc + np.zeros_like(rr)), g_t)
        return (np.moveaxis(dx_t, -1, 0),)

    return _record(out, (x,), bwd)


def window_valid_mask(shape_hw: tuple, rows: np.ndarray, cols: np.ndarray,
                      radius: int) -> np.ndarray:
    """Boolean [M, w, w]: which window slots fall inside the map."""
    h, w = shape_hw
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    off = np.arange(-radius, radius + 1)
    rr = rows[:, None, None] + off[None, :, None]
    cc = cols[:, None, None] + off[None, None, :]
    return ((rr >= 0) & (rr <= h - 1)) & ((cc >= 0) & (cc <= w - 1))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip), zero padding, square kernels.

    ``x``: [B, C_in, H, W]; ``w``: [C_out, C_in/groups, k, k].
    ``groups == C_in`` with ``C_out == C_in`` gives depthwise behavior.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W] and w[Co,Ci/g,k,k]")
    b_, cin, h, wd = x.shape
    cout, cin_g, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d kernels must be square with odd extent")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"channel/group mismatch: C_in={cin}, C_out={cout}, groups={groups}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output extent is non-positive")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d bias must have shape (C_out,)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # [B, Cin, Ho, Wo, k, k]
    cols = np.ascontiguousarray(np.moveaxis(win, (2, 3), (4, 5)))
    cols = cols.reshape(b_, groups, cin_g * k * k, ho * wo)   # [B, g, f, L]
    wg = w.data.reshape(groups, cout // groups, cin_g * k * k)
    val = np.einsum("gof,bgfl->bgol", wg, cols, optimize=True)
    val = val.reshape(b_, cout, ho, wo)
    if bias is not None:
        val = val + bias.data[None, :, None, None]
    out = Tensor(_check_finite(val, "conv2d"))

    def bwd(g):
        gg = g.reshape(b_, groups, cout // groups, ho * wo)
        dw = np.einsum("bgol,bgfl->gof", gg, cols, optimize=True)
        dw = dw.reshape(w.shape)
        dcols = np.einsum("gof,bgol->bgfl", wg, gg, optimize=True)
        dcols = dcols.reshape(b_, cin, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[:, :, ki, kj]
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, bwd)


# ---------------------------------------------------------------------------
# Bilinear upsampling (x2, align_corners=False)
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def _upsample_matrix(n: int) -> np.ndarray:
    """Dense [2n, n] interpolation matrix for one axis (edge-clamped)."""
    m = _UPSAMPLE_CACHE.get(n)
    if m is None:
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        lo = np.clip(np.floor(src).astype(int), 0, n - 1)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        frac = np.where(src < 0, 0.0, np.where(src > n - 1, 1.0, frac))
        m = np.zeros((2 * n, n))
        m[np.arange(2 * n), lo] += 1.0 - frac
        m[np.arange(2 * n), hi] += frac
        _UPSAMPLE_CACHE[n] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Upsample a [B, C, H, W] map to [B, C, 2H, 2W]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("bilinear_upsample2x expects [B, C, H, W]")
    b_, c, h, w = x.shape
    uh, uw = _upsample_matrix(h), _upsample_matrix(w)
    val = np.einsum("ih,bchw,jw->bcij", uh, x.data, uw, optimize=True)
    out = Tensor(_check_finite(val, "bilinear_upsample2x"))

    def bwd(g):
        return (np.einsum("ih,bcij,jw->bchw", uh, g, uw, optimize=True),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class FdReport:
    max_rel_err: float
    tol: float
    n_checked: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err < self.tol


def fd_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
             tol: float = 1e-4, max_coords: Optional[int] = None,
             seed: int = 0) -> FdReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` against central
    finite differences.

    When ``max_coords`` is given, a deterministic random subset of coordinates
    is probed instead of all of them (needed for large parameter tensors).
    """
    x = _as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("fd_check requires a scalar-valued function")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        idx = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        idx = np.arange(n)

    max_rel = 0.0
    a_flat = analytic.reshape(-1)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(probe).data)
            flat[i] = orig - h
            fm = float(f(probe).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            # the floor gives near-zero gradients absolute-error treatment,
            # where central-difference roundoff (~1e-10) would otherwise
            # dominate the quotient
            rel = abs(a_flat[i] - num) / max(abs(a_flat[i]) + abs(num), 1e-4)
            max_rel = max(max_rel, rel)
    return FdReport(max_rel_err=max_rel, tol=tol, n_checked=len(idx))


# ---------------------------------------------------------------------------
# Snapshot text format
# ---------------------------------------------------------------------------


def save_tensor_txt(path, x) -> None:
    """Write ``shape: d1 d2 ...`` then row-major decimals (full precision)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(_snapshot_str(arr))


def load_tensor_txt(path) -> Tensor:
    with open(path) as fh:
        text = fh.read()
    return Tensor(_parse_snapshot(text.split()))


def _snapshot_str(arr: np.ndarray) -> str:
    head = "shape: " + " ".join(str(d) for d in arr.shape)
    body = " ".join(repr(float(v)) for v in arr.reshape(-1))
    return head + "\n" + body + "\n"


def _parse_snapshot(tokens: list[str]) -> np.ndarray:
    if len(tokens) < 2 or tokens[0] != "shape:":
        raise ValueError("tensor snapshot must start with 'shape:'")
    shape = []
    i = 1
    while i < len(tokens):
        try:
            shape.append(int(tokens[i]))
        except ValueError:
            break
        i += 1
    count = int(np.prod(shape)) if shape else 1
    vals = tokens[i:i + count]
    if len(vals) != count:
        raise ValueError(f"tensor snapshot expects {count} values, found {len(vals)}")
    return np.array([float(v) for v in vals]).reshape(shape)
