"""Small reverse-mode automatic differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
the reachable nodes in reverse creation order, which is a valid reverse
topological order because parents always exist before their children.

Broadcasting is deliberately limited to tensor-scalar arithmetic and the
explicit :func:`add_bias` op, so shape mistakes fail loudly.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces (or is fed) NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return arr


class Tensor:
    """A node in the computation graph.

    ``data`` is always a C-contiguous float64 array. Leaves created directly
    by the user have no parents; ``requires_grad`` marks trainable leaves but
    gradients can be requested for any node.
    """

    __slots__ = ("data", "parents", "grad_fn", "op", "id", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 parents: tuple["Tensor", ...] = (), grad_fn: Callable | None = None,
                 op: str = "leaf"):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = _check_finite(arr, op)
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str) -> Tensor:
    return Tensor(data, parents=parents, grad_fn=grad_fn, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# element-wise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = as_tensor(a)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    a = as_tensor(a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; contributes no gradient to ``a``."""
    return Tensor(a.data.copy(), op="stop_gradient")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., K) @ (K, M) -> (..., M)``."""
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(ad @ bd, (a, b), grad_fn, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis (the only non-scalar broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to an ``(N, C, H, W)`` map."""
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_channel_bias: {x.shape} + {b.shape}")
    return _node(x.data + b.data[None, :, None, None], (x, b),
                 lambda g: (g, g.sum(axis=(0, 2, 3))), "add_channel_bias")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing only."""
    src_shape = a.shape
    out = a.data[index]
    if out.base is None and not np.shares_memory(out, a.data):
        raise ShapeError("getitem supports basic indexing only")

    def grad_fn(g):
        full = np.zeros(src_shape)
        full[index] = g
        return (full,)

    return _node(out, (a,), grad_fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def pick(logits: Tensor, labels) -> Tensor:
    """Select ``logits[i, labels[i]]`` for an ``(N, C)`` tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"pick: {logits.shape} with labels {labels.shape}")
    rows = np.arange(labels.size)
    shape = logits.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[rows, labels] = g
        return (full,)

    return _node(logits.data[rows, labels], (logits,), grad_fn, "pick")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _node(np.array(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % a.ndim
    return _node(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def sorted_mean(a: Tensor, axis: int) -> Tensor:
    """Mean along ``axis`` that is bit-identical under any permutation of it.

    Values are sorted before summation so the reduction order depends only
    on the multiset of values.
    """
    ax = axis % a.ndim
    n = a.shape[ax]
    shape = a.shape
    out = np.sort(a.data, axis=ax).sum(axis=ax) / n

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape).copy(),)

    return _node(out, (a,), grad_fn, "sorted_mean")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def grad_fn(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), grad_fn, "log_softmax")


def logmeanexp(a: Tensor) -> Tensor:
    """``log(mean(exp(a)))`` over all entries, stabilized by max-subtraction."""
    m = a.data.max()
    w = np.exp(a.data - m)
    total = w.sum()
    out = np.array(m + np.log(total / a.data.size))
    soft = w / total
    return _node(out, (a,), lambda g: (g * soft,), "logmeanexp")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all entries of ``(a - b)**2``."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = np.array((diff * diff).sum() / n)

    def grad_fn(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _node(out, (a, b), grad_fn, "mse")


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise NonFiniteError("l2_normalize of a zero-norm vector")
    y = a.data / norm

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (a,), grad_fn, "l2_normalize")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride, padding) -> np.ndarray:
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]  # (N, C, Ho, Wo, kh, kw)


def _conv_forward(x, w, stride, padding):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Co)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _conv_input_adjoint(gy, w, in_shape, stride, padding):
    """Adjoint of the conv forward w.r.t. its input (scatter-add of patches)."""
    n, ci, h, wd = in_shape
    _, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho, wo = gy.shape[2:]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # (N, Ho, Wo, Ci, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)      # (N, Ci, kh, kw, Ho, Wo)
    gx = np.zeros((n, ci, h + 2 * ph, wd + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, :, i, j]
    return gx[:, :, ph:ph + h, pw:pw + wd]


def _conv_weight_grad(gy, win):
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (Co, Ci, kh, kw)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 1-D convolution: ``(M, L, Ci)`` with ``(k, Ci, Co)``.

    Equivalent to :func:`conv2d` with a kernel of height 1 applied to every
    row independently, but laid out so the im2col matrix is built with one
    contiguous copy.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {w.shape}")
    k, ci, co = w.shape
    m, length, _ = x.shape
    lo = _conv_out(length, k, stride, padding)
    if lo < 1:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {length}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :lo]  # (M, Lo, Ci, k)
    cols = win.transpose(0, 1, 3, 2).reshape(m * lo, k * ci)
    w2 = w.data.reshape(k * ci, co)
    out = (cols @ w2).reshape(m, lo, co)
    padded_len = xp.shape[1]

    def grad_fn(g):
        g2 = g.reshape(m * lo, co)
        gcols = (g2 @ w2.T).reshape(m, lo, k, ci)
        gx = np.zeros((m, padded_len, ci))
        for j in range(k):
            gx[:, j:j + stride * lo:stride, :] += gcols[:, :, j, :]
        gw = (cols.T @ g2).reshape(k, ci, co)
        return gx[:, padding:padding + length, :], gw

    return _node(out, (x, w), grad_fn, "conv1d")


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``(N, Ci, H, W)`` with weights ``(Co, Ci, kh, kw)``."""
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    if _conv_out(x.shape[2], w.shape[2], stride[0], padding[0]) < 1 or \
            _conv_out(x.shape[3], w.shape[3], stride[1], padding[1]) < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    out, win = _conv_forward(x.data, w.data, stride, padding)
    xs, wd = x.shape, w.data

    def grad_fn(g):
        return (_conv_input_adjoint(g, wd, xs, stride, padding), _conv_weight_grad(g, win))

    return _node(out, (x, w), grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, stride=2, padding=1) -> Tensor:
    """Exact adjoint of :func:`conv2d`; weights are ``(Ci, Co, kh, kw)``.

    Output extent per axis is ``(n - 1) * stride - 2 * padding + k``.
    """
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} vs weight {w.shape}")
    n, _, h, wd_ = x.shape
    kh, kw = w.shape[2:]
    ho = (h - 1) * stride[0] - 2 * padding[0] + kh
    wo = (wd_ - 1) * stride[1] - 2 * padding[1] + kw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d: empty output")
    out_shape = (n, w.shape[1], ho, wo)
    wdat, xdat = w.data, x.data
    out = _conv_input_adjoint(xdat, wdat, out_shape, stride, padding)

    def grad_fn(g):
        gx, win = _conv_forward(g, wdat, stride, padding)
        return gx, _conv_weight_grad(xdat, win)

    return _node(np.ascontiguousarray(out), (x, w), grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Accepts a name->tensor mapping (returns a dict keyed by name) or a sequence
    of tensors (returns a list). Parameters not reachable from ``loss`` get a
    zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets = list(params.values()) if isinstance(params, Mapping) else list(params)
    keep = {t.id for t in targets}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        if node.grad_fn is None:
            continue
        g = grads.get(node.id) if node.id in keep else grads.pop(node.id, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(t.id)
        return np.zeros_like(t.data) if g is None else np.ascontiguousarray(g).reshape(t.shape)

    if isinstance(params, Mapping):
        return {k: lookup(t) for k, t in params.items()}
    return [lookup(t) for t in targets]


def finite_difference_check(f: Callable[[Tensor], Tensor], x: np.ndarray,
                            eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. The error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    (analytic,) = backward(f(leaf), [leaf])
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(x)).item()
        flat[i] = orig - eps
        down = f(Tensor(x)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())
