"""A small reverse-mode autodiff engine that yields per-sample gradients.

Tensors are either *batched* (axis 0 is the sample axis) or *unbatched*
(parameters and anything computed from parameters alone).  During the
backward pass the gradient of a batched tensor has the tensor's own shape,
while the gradient of an unbatched tensor carries an extra leading sample
axis: ``grad.shape == (B,) + tensor.shape``.  No operation mixes samples, so
the gradient that reaches a parameter at index ``b`` is exactly the gradient
of ``loss[b]`` alone.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


class NoTape(AutodiffError):
    """Backward requested on a tensor with no recorded graph."""


class Tensor:
    __slots__ = ("data", "batched", "requires_grad", "_parents", "_backward", "_op", "grad", "__weakref__")

    def __init__(self, data, batched: bool = False, requires_grad: bool = False,
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.batched = batched
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self._op = op
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = "batched" if self.batched else "unbatched"
        return f"Tensor(shape={self.shape}, {kind}, op={self._op})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf; after a backward pass holds ``per_sample_grad`` and ``grad``."""

    __slots__ = ("name", "per_sample_grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, copy=True), batched=False, requires_grad=True)
        self.name = name
        self.per_sample_grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def batch(x) -> Tensor:
    """Wrap an array whose axis 0 is the sample axis."""
    return Tensor(np.asarray(x), batched=True)


def _make(data, parents, backward, op) -> Tensor:
    batched = any(p.batched for p in parents)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, batched=batched, requires_grad=req,
                  parents=parents if req else (), backward=backward if req else None, op=op)


def _lead(g: np.ndarray, out_ndim: int) -> int:
    return g.ndim - out_ndim


def _unbroadcast(g: np.ndarray, out: Tensor, p: Tensor) -> np.ndarray:
    """Reduce an output gradient to the gradient convention of parent ``p``."""
    if out.batched and not p.batched:
        lead = 1
        body = out.shape[1:]
        padded = (1,) * (out.ndim - p.ndim) + p.shape
        if padded[0] != 1:
            raise ShapeMismatch("an unbatched operand cannot span the sample axis")
        target = padded[1:]
    else:
        lead = _lead(g, out.ndim)
        body = out.shape
        target = (1,) * (out.ndim - p.ndim) + p.shape
    axes = tuple(lead + i for i, (t, o) in enumerate(zip(target, body)) if t == 1 and o != 1)
    r = g.sum(axis=axes, keepdims=True) if axes else g
    return r.reshape(g.shape[:lead] + p.shape)


def _check_batch(a: Tensor, b: Tensor):
    if a.batched and b.batched and a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_batch(a, b)
    out_data = a.data + b.data
    out = None

    def backward(g):
        return _unbroadcast(g, out, a), _unbroadcast(g, out, b)

    out = _make(out_data, (a, b), backward, "add")
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_batch(a, b)
    out = None

    def backward(g):
        return _unbroadcast(g, out, a), -_unbroadcast(g, out, b)

    out = _make(a.data - b.data, (a, b), backward, "sub")
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_batch(a, b)
    out = None

    def backward(g):
        ga = _unbroadcast(g * b.data, out, a) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, out, b) if b.requires_grad else None
        return ga, gb

    out = _make(a.data * b.data, (a, b), backward, "mul")
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_batch(a, b)
    out = None

    def backward(g):
        ga = _unbroadcast(g / b.data, out, a) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data ** 2, out, b) if b.requires_grad else None
        return ga, gb

    out = _make(a.data / b.data, (a, b), backward, "div")
    return out


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def power(x: Tensor, p: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _softplus(x):
    return np.logaddexp(0.0, x)


def mish(x: Tensor) -> Tensor:
    """``x * tanh(softplus(x))``."""
    x = as_tensor(x)
    t = np.tanh(_softplus(x.data))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * (t + x.data * (1.0 - t * t) * sig),)

    return _make(x.data * t, (x,), backward, "mish")


def identity(x: Tensor) -> Tensor:
    return as_tensor(x)


ACTIVATIONS = {"relu": relu, "mish": mish, "identity": identity}
NUMPY_ACTIVATIONS = {
    "relu": lambda v: np.maximum(v, 0.0),
    "mish": lambda v: v * np.tanh(_softplus(v)),
    "identity": lambda v: v,
}


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if x.batched and 0 in axes:
        raise ShapeMismatch("reducing over the sample axis would mix per-sample gradients")
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    data = x.data.sum(axis=axes, keepdims=keepdims)
    out = None

    def backward(g):
        lead = _lead(g, out.ndim)
        return (np.broadcast_to(g.reshape(g.shape[:lead] + kd_shape), g.shape[:lead] + x.shape),)

    out = _make(data, (x,), backward, "sum")
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / n)


# -------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = x.data.reshape(shape)
    if x.batched and (data.ndim == 0 or data.shape[0] != x.shape[0]):
        raise ShapeMismatch("reshape must keep the sample axis in front")
    out = None

    def backward(g):
        lead = _lead(g, out.ndim)
        return (g.reshape(g.shape[:lead] + x.shape),)

    out = _make(data, (x,), backward, "reshape")
    return out


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(a % x.ndim for a in axes)
    if x.batched and axes[0] != 0:
        raise ShapeMismatch("transpose must keep the sample axis in front")
    inv = tuple(np.argsort(axes))
    out = None

    def backward(g):
        lead = _lead(g, out.ndim)
        return (g.transpose(tuple(range(lead)) + tuple(lead + i for i in inv)),)

    out = _make(x.data.transpose(axes), (x,), backward, "transpose")
    return out


def pad(x: Tensor, p: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes of a batched ``(B, C, H, W)`` tensor."""
    x = as_tensor(x)
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    if mode == "zero":
        data = np.pad(x.data, widths)
    elif mode == "circular":
        data = np.pad(x.data, widths, mode="wrap")
    elif mode == "reflect":
        data = np.pad(x.data, widths, mode="reflect")
    else:
        raise ValueError(f"unknown padding mode {mode!r}")

    def backward(g):
        return (_unpad(g, p, mode, x.shape[-2:]),)

    return _make(data, (x,), backward, "pad")


def _unpad(g: np.ndarray, p: int, mode: str, hw) -> np.ndarray:
    h, w = hw
    if mode == "zero":
        return g[..., p:p + h, p:p + w]
    if mode == "circular":
        rows = g[..., p:p + h, :].copy()
        rows[..., h - p:h, :] += g[..., :p, :]
        rows[..., :p, :] += g[..., p + h:, :]
        out = rows[..., :, p:p + w].copy()
        out[..., :, w - p:w] += rows[..., :, :p]
        out[..., :, :p] += rows[..., :, p + w:]
        return out
    if mode == "reflect":
        sr, sc = _reflect_selector(h, p), _reflect_selector(w, p)
        return np.einsum("...ij,ia,jb->...ab", g, sr, sc, optimize=True)
    raise ValueError(f"no gradient rule for padding mode {mode!r}")


def _reflect_selector(n: int, p: int) -> np.ndarray:
    """0/1 matrix ``S`` with ``np.pad(v, p, 'reflect') == S @ v``."""
    return np.pad(np.eye(n), ((p, p), (0, 0)), mode="reflect")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    data = x.data[..., top:top + height, left:left + width]

    def backward(g):
        full = np.zeros(g.shape[:g.ndim - x.ndim] + x.shape, dtype=g.dtype)
        full[..., top:top + height, left:left + width] = g
        return (full,)

    return _make(data, (x,), backward, "crop")


def apply_matrix(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Multiply a constant matrix ``m`` (out, in) into ``axis`` of ``x``."""
    x = as_tensor(x)
    m = np.asarray(m, dtype=x.dtype)
    axis = axis % x.ndim
    if x.batched and axis == 0:
        raise ShapeMismatch("apply_matrix cannot act on the sample axis")
    if x.shape[axis] != m.shape[1]:
        raise ShapeMismatch(f"axis {axis} has size {x.shape[axis]}, matrix expects {m.shape[1]}")
    data = np.moveaxis(np.tensordot(x.data, m, axes=([axis], [1])), -1, axis)
    out = None

    def backward(g):
        lead = _lead(g, out.ndim)
        return (np.moveaxis(np.tensordot(g, m, axes=([lead + axis], [0])), -1, lead + axis),)

    out = _make(data, (x,), backward, "apply_matrix")
    return out


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, mode: str = "zero") -> Tensor:
    """Cross-correlation of batched ``x`` (B, C, H, W) with ``kernel`` (O, C, k, k).

    ``mode`` is ``'zero'``, ``'circular'`` or ``'none'`` (no padding).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if not x.batched or x.ndim != 4:
        raise ShapeMismatch("conv2d expects a batched (B, C, H, W) input")
    if kernel.batched:
        raise ShapeMismatch("conv2d kernels must be unbatched")
    o, c, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch("kernels must be square with odd size")
    if x.shape[1] != c:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernel expects {c}")
    if mode == "none":
        padding = 0
    b, _, h, w = x.shape
    xp = np.pad(x.data, [(0, 0), (0, 0), (padding, padding), (padding, padding)],
                mode="wrap" if mode == "circular" else "constant") if padding else x.data
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("kernel larger than the padded input")
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    kmat = kernel.data.reshape(o, c * k * k)
    res = np.matmul(cols, kmat.T)  # (B, HoWo, O)
    data = np.ascontiguousarray(res.transpose(0, 2, 1)).reshape(b, o, ho, wo)

    def backward(g):
        gm = g.reshape(b, o, ho * wo)
        gk = np.matmul(gm, cols).reshape((b,) + kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(gm.transpose(0, 2, 1), kmat).reshape(b, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = _unpad(gxp, padding, "circular" if mode == "circular" else "zero", (h, w)) if padding else gxp
        return gx, gk

    return _make(data, (x, kernel), backward, "conv2d")


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeMismatch("spatial dims must be divisible by the pooling window")
    v = x.data.reshape(b, c, h // window, window, w // window, window).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(b, c, h // window, w // window, window * window)
    idx = np.argmax(v, axis=-1)  # first maximum in row-major window order
    data = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(window * window) == idx[..., None]) * g[..., None]
        onehot = onehot.reshape(b, c, h // window, w // window, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (onehot.reshape(b, c, h, w),)

    return _make(data, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeMismatch("spatial dims must be divisible by the pooling window")
    v = reshape(x, (b, c, h // window, window, w // window, window))
    return mean(v, axis=(3, 5))


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for batched ``x`` (B, F), ``weight`` (F, O)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    data = x.data @ weight.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data[:, :, None] * g[:, None, :] if weight.requires_grad else None
        return gx, gw

    out = _make(data, (x, weight), backward, "linear")
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy losses, shape ``(B,)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch("expected logits (B, K) and labels (B,)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    losses = logsum - z[rows, labels]

    def backward(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make(losses, (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward

def _toposort(root: Tensor) -> list[Tensor]:
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


def backward(losses: Tensor, seed: np.ndarray | None = None) -> list[Tensor]:
    """Run the backward pass from per-sample ``losses`` (shape ``(B,)``).

    Leaves that require gradients receive ``.grad``; for unbatched leaves
    this is the per-sample gradient of shape ``(B,) + shape``.  The graph is
    released afterwards, so each forward pass supports one backward pass.
    """
    if not isinstance(losses, Tensor) or losses._backward is None:
        raise NoTape("no recorded operations lead to this tensor")
    if not losses.batched or losses.ndim != 1:
        raise ShapeMismatch("backward expects per-sample losses of shape (B,)")
    order = _toposort(losses)
    grads = {id(losses): np.ones_like(losses.data) if seed is None else np.asarray(seed, dtype=losses.dtype)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves.append(node)
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None
    return leaves


def per_sample_gradients(losses: Tensor, params: Sequence[Parameter] = ()) -> None:
    """Fill ``per_sample_grad`` (B, ...) and ``grad`` (summed) on every reached parameter."""
    n = losses.shape[0] if losses.ndim else 0
    for p in params:
        p.grad = None
        p.per_sample_grad = None
    for leaf in backward(losses):
        if isinstance(leaf, Parameter):
            leaf.per_sample_grad = np.asarray(leaf.grad)
            leaf.grad = leaf.per_sample_grad.sum(axis=0)
    for p in params:
        if p.per_sample_grad is None:
            p.per_sample_grad = np.zeros((n,) + p.shape, dtype=p.dtype)
            p.grad = np.zeros(p.shape, dtype=p.dtype)


def finite_difference_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
                            max_coords: int | None = 200, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` re-runs the forward pass and returns per-sample losses; the
    objective checked is their sum.  With ``max_coords`` set, that many
    coordinates are drawn at random across all parameters (all of them when
    the model is smaller).  ``floor`` is the gradient scale below which an
    entry counts as zero: central differences of an O(1) loss carry
    round-off near ``1e-16 / h``, so null directions (kernel components
    removed by weight standardization, say) would otherwise report
    relative errors of order one.
    """
    params = list(params)
    per_sample_gradients(loss_fn(), params)
    analytic = [p.grad.copy() for p in params]
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if max_coords is None or max_coords >= total:
        picks = np.arange(total)
    else:
        picks = np.random.default_rng(seed).choice(total, size=max_coords, replace=False)
    worst = 0.0
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[i])
        view = params[i].data.reshape(-1)
        old = view[j]
        view[j] = old + h
        up = float(loss_fn().data.sum())
        view[j] = old - h
        down = float(loss_fn().data.sum())
        view[j] = old
        numeric = (up - down) / (2 * h)
        exact = float(analytic[i].reshape(-1)[j])
        err = abs(numeric - exact) / max(floor, abs(numeric), abs(exact))
        worst = max(worst, err)
    return worst
