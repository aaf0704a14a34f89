"""Dense reverse-mode automatic differentiation on top of numpy.

The graph is built while the forward pass runs and walked once in reverse
topological order by :func:`backward`. Leaves flagged ``frozen`` never get a
gradient buffer, but gradients still flow *through* any op that consumes
them, so layers below a frozen layer are trained normally.

By default a frozen leaf does not even count as requiring a gradient, which
lets ops skip the weight-gradient products entirely (``W`` frozen in
``x @ W`` means only ``g @ W.T`` is computed). Inside :func:`track_frozen`
those products are computed and then discarded instead, which is useful to
check that skipping them changes nothing.
"""

import contextlib
import threading

import numpy as np
from scipy import special

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "no_grad",
    "track_frozen",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "linear",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "stack",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "gelu",
    "square",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding_lookup",
    "cross_entropy",
    "depthwise_conv1d",
    "detach",
]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.track_frozen = False


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, decoding)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def track_frozen():
    """Compute gradients for frozen leaves too, then discard them."""
    prev = _state.track_frozen
    _state.track_frozen = True
    try:
        yield
    finally:
        _state.track_frozen = prev


def is_grad_enabled():
    return _state.grad_enabled


class Tensor:
    """An n-dimensional array with an optional gradient and a graph node.

    ``requires_grad`` marks a leaf as something we differentiate with
    respect to. ``frozen`` marks a parameter that must never be updated;
    it is never handed a gradient buffer.
    """

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "op", "_parents", "_backward", "_needs")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, frozen=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = bool(frozen)
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None
        self._needs = ()

    # -- graph bookkeeping -------------------------------------------------
    @property
    def is_leaf(self):
        return not self._parents

    @property
    def node_id(self):
        return id(self)

    def _tracked(self):
        if self._parents:
            return self.requires_grad
        return self.requires_grad and (not self.frozen or _state.track_frozen)

    # -- array-ish surface -------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.frozen:
            flags.append("frozen")
        extra = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, op={self.op}{extra})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, dtype=None):
    """A constant (non-differentiable) tensor."""
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


def parameter(data, frozen=False, name=None, dtype=None):
    """A differentiable leaf, stored C-contiguous so results never depend on memory layout."""
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True, frozen=frozen, name=name)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if not _state.grad_enabled:
        return out
    # parent flags are fixed now so backward does not depend on later context
    needs = tuple(p._tracked() for p in parents)
    if any(needs):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._needs = needs
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, n):
        return (
            _unbroadcast(g, sa) if n[0] else None,
            _unbroadcast(g, sb) if n[1] else None,
        )

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g, n):
        return (
            _unbroadcast(g, sa) if n[0] else None,
            _unbroadcast(-g, sb) if n[1] else None,
        )

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, n):
        return (
            _unbroadcast(g * b.data, a.shape) if n[0] else None,
            _unbroadcast(g * a.data, b.shape) if n[1] else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g, n):
        return (
            _unbroadcast(g / b.data, a.shape) if n[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if n[1] else None,
        )

    return _make(out, (a, b), bw, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g, n: (-g,), "neg")


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    return _make(a.data * s, (a,), lambda g, n: (g * s,), "scale")


def square(a):
    return _make(a.data * a.data, (a,), lambda g, n: (2.0 * a.data * g,), "square")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, n: (g * out,), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g, n: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, n: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = special.expit(a.data)
    return _make(out, (a,), lambda g, n: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g, n: (g * mask,), "relu")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT1_2))

    def bw(g, n):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bw, "gelu")


def detach(a):
    return Tensor(a.data)


# -- linear algebra -----------------------------------------------------------


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Matrix product with numpy batching rules.

    ``a`` is ``[..., m, k]`` and ``b`` is ``[k, n]`` or ``[..., k, n]``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul cannot broadcast {a.shape} @ {b.shape}") from exc

    def bw(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(g @ _swap(b.data), a.shape)
        if n[1]:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` as a single graph node; ``weight`` is ``[d_in, d_out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    d_in = weight.shape[0]

    def bw(g, n):
        gx = g @ weight.data.T if n[0] else None
        gw = gb = None
        if n[1]:
            gw = x.data.reshape(-1, d_in).T @ g.reshape(-1, g.shape[-1])
        if bias is not None and n[2]:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw, "linear")


# -- reductions and shape ops -------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    return tuple(norm)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g, n):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, n: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g, n: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic_index(idx)

    def bw(g, n):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g, n):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if need else None for p, need in zip(parts, n))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g, n):
        return tuple(
            np.take(g, i, axis=ax) if need else None for i, need in enumerate(n)
        )

    return _make(out, tensors, bw, "stack")


# -- normalisation / probability ----------------------------------------------


def softmax(x, axis=-1):
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, n):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g, n):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g, n):
        gx = gg = gb = None
        if n[0]:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if n[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if n[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def embedding_lookup(table, ids):
    """Rows of ``table`` ([V, d]) selected by integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab}): min={ids.min()} max={ids.max()}")

    def bw(g, n):
        out = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits, targets, mask=None, reduction="mean"):
    """Token-level cross entropy (natural log) over the last axis of ``logits``.

    ``mask`` (same shape as ``targets``) weights each position; padding gets 0.
    ``reduction`` is ``"mean"`` (over the mask total) or ``"sum"``.
    """
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones_like(nll) if mask is None else np.asarray(mask, dtype=nll.dtype)
    total = (nll * w).sum()
    denom = w.sum() if reduction == "mean" else 1.0
    if reduction == "mean" and denom == 0:
        raise ContractError("cross_entropy: mask selects no positions")

    def bw(g, n):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (p * (w / denom)[..., None] * g,)

    return _make(np.asarray(total / denom), (logits,), bw, "cross_entropy")


def depthwise_conv1d(x, kernel):
    """Per-channel 1-D convolution along the time axis with zero 'same' padding.

    ``x`` is ``[B, T, C]``; ``kernel`` is ``[K, C]`` with ``K`` odd; tap ``j``
    multiplies input position ``t + j - K // 2``.
    """
    k, c = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"depthwise_conv1d needs an odd kernel width, got {k}")
    if x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: channels {x.shape[-1]} vs kernel {kernel.shape}")
    pad = k // 2
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + t, :] * kernel.data[j]

    def bw(g, n):
        gx = gk = None
        if n[0]:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[:, j : j + t, :] += g * kernel.data[j]
            gx = gp[:, pad : pad + t, :]
        if n[1]:
            gk = np.stack([(g * xp[:, j : j + t, :]).sum(axis=(0, 1)) for j in range(k)])
        return gx, gk

    return _make(out, (x, kernel), bw, "depthwise_conv1d")


# -- the backward pass ----------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, retain_graph=False):
    """Reverse-mode sweep from a scalar ``loss``.

    Accumulates into ``.grad`` of every non-frozen leaf with
    ``requires_grad`` and returns ``{leaf: gradient}`` for those leaves.
    Frozen leaves never receive a buffer.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    if not loss.requires_grad:
        return result
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.frozen:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = node.grad
            continue
        pgrads = node._backward(g, node._needs)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()
            node._needs = ()
            node.requires_grad = False
    return result
