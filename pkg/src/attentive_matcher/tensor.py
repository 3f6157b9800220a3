"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor` whose ``_backward`` closure maps
the upstream gradient to one gradient per parent.  :func:`backward` sorts the
graph reachable from a scalar loss topologically and sweeps it once in
reverse, accumulating into ``.grad`` of leaf tensors only.

Broadcasting is deliberately limited: element-wise binary ops need equal
shapes, except that a 1-D right operand matching the last axis is treated as
a bias.  Python scalars are accepted as constants.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


# ---------------------------------------------------------------------------
# reverse sweep


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below ``root``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Repeated calls add to existing leaf gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# element-wise


def _bias_like(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape


def _sum_to_bias(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    """Element-wise sum; ``b`` may be a last-axis bias or a Python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_const")
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if _bias_like(a, b):
        return _make(a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g)), "add_bias")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are not compatible")


def mul(a, b) -> Tensor:
    """Element-wise product; ``b`` may be a last-axis vector or a Python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")
    if a.shape == b.shape:
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if _bias_like(a, b):
        return _make(
            a.data * b.data,
            (a, b),
            lambda g: (g * b.data, _sum_to_bias(g * a.data)),
            "mul_bias",
        )
    raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are not compatible")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def dropout(x: Tensor, rate: float, train: bool, seed: int = 0, step: int = 0) -> Tensor:
    """Inverted dropout with a mask that depends only on ``(seed, step)``."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, seed, step).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def dropout_mask(shape, rate, seed, step):
    """Keep-mask from a Philox stream keyed by ``(seed, step)``."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(step) & (2**64 - 1)]))
    return rng.random(shape) >= rate


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def take(x: Tensor, index) -> Tensor:
    """``x[index]`` for any NumPy index; repeated indices accumulate on the way back."""
    y = np.ascontiguousarray(x.data[index])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(y, (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(y, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a shared ``(k, n)`` matrix or
    ``(..., k, n)`` with the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents of {a.shape} and {b.shape} disagree")
    if b.ndim == 2:
        k, n = b.shape
        y = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _make(y, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} disagree")
    y = np.matmul(a.data, b.data)
    return _make(
        y,
        (a, b),
        lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)),
        "bmm",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + offset``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gain.shape != (d,) or offset.shape != (d,):
        raise DimensionError(f"layer_norm: gain/offset must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + offset.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _sum_to_bias(g * xhat), _sum_to_bias(g)

    return _make(y.astype(x.dtype), (x, gain, offset), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1.

    ``x`` is ``(C, H, W)`` or ``(N, C, H, W)``; kernels ``(O, C, 3, 3)``.
    """
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects 3x3 kernels, got {kernels.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    o = kernels.shape[0]
    if kernels.shape[1] != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {kernels.shape[1]}")
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias must have shape ({o},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)
    kmat = kernels.data.reshape(o, c * 9)
    y = (cols @ kmat.T + bias.data).reshape(n, h, w, o).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y[0] if single else y)

    def bw(g):
        g4 = g[None] if single else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ kmat).reshape(n, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + w] += gcols[..., i, j]
        gx = gxp[:, :, 1:-1, 1:-1]
        return (gx[0] if single else gx), gk, gb

    return _make(y, (x, kernels, bias), bw, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes.

    The gradient goes to the first maximal cell of each window in
    row-major order.
    """
    if x.ndim < 2:
        raise DimensionError("maxpool2d needs at least two axes")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    lead = tuple(lead)
    nl = len(lead)
    win = x.data.reshape(lead + (h // 2, 2, w // 2, 2))
    win = win.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)).reshape(lead + (h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(lead + (h // 2, w // 2, 2, 2))
        gw = gw.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3))
        return (gw.reshape(x.shape),)

    return _make(np.ascontiguousarray(y), (x,), bw, "maxpool2d")


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy computed from pre-sigmoid values."""
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = np.asarray(per.mean(), dtype=logits.dtype)
    return _make(out, (logits,), lambda g: (g * (_sigmoid_np(z) - y) / n,), "bce_logits")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Worst relative error between analytic and finite-difference gradients."""

    max_rel_error: float
    per_input: list = field(default_factory=list)
    n_checked: int = 0

    def __str__(self):
        return f"max rel. error {self.max_rel_error:.3e} over {self.n_checked} entries"


def relative_error(analytic, numeric, floor=1e-6):
    """Element-wise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    *,
    dtype=np.float64,
    eps: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    The scalar probed is ``sum(R * fn(*inputs))`` for a fixed random ``R`` so
    every output element contributes.  Analytic gradients are taken in
    ``dtype``; the finite-difference shadow path runs in extended precision
    (``np.longdouble``) so its round-off stays well below the tolerances.
    ``max_entries`` caps the number of probed entries per input (sampled
    uniformly without replacement).  Round-off in the analytic path grows
    with the largest gradient of an input, so entries smaller than
    ``sqrt(machine eps)`` of ``dtype`` times that scale are judged against
    the scale rather than their own size.  ``floor`` is an absolute minimum.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    resolution = float(np.sqrt(np.finfo(dtype).eps))

    ts = [Tensor(a.astype(dtype), requires_grad=True, dtype=dtype) for a in arrays]
    out = fn(*ts)
    proj = rng.standard_normal(out.shape)
    loss = reduce_sum(mul(out, Tensor(proj.astype(out.dtype), dtype=out.dtype)))
    backward(loss)

    wide = np.longdouble
    wproj = proj.astype(wide)

    def shadow(values):
        with no_grad():
            o = fn(*[Tensor(v, dtype=wide) for v in values])
        return (o.data.astype(wide) * wproj).sum()

    worst, per, total = 0.0, [], 0
    for i in wrt:
        grad = ts[i].grad
        flat = arrays[i].astype(wide).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, e in enumerate(idx):
            vals = [a.astype(wide) for a in arrays]
            v = vals[i].reshape(-1)
            v[e] = flat[e] + eps
            up = shadow(vals)
            v[e] = flat[e] - eps
            down = shadow(vals)
            numeric[j] = float((up - down) / (2 * wide(eps)))
        analytic = np.zeros(flat.size) if grad is None else grad.reshape(-1)
        scale = float(np.abs(numeric).max()) if len(idx) else 0.0
        err = relative_error(analytic[idx], numeric, max(floor, resolution * scale)).max() if len(idx) else 0.0
        per.append(float(err))
        worst = max(worst, float(err))
        total += len(idx)
    return GradCheckReport(worst, per, total)


def grad_check(op: Callable[..., Tensor], shapes: Sequence[tuple], seed: int = 0, **kw) -> GradCheckReport:
    """Gradient check of ``op`` on standard-normal inputs of the given shapes."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    return check_gradients(op, arrays, seed=seed, **kw)
