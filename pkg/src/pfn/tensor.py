"""Dense tensors with a small reverse-mode autodiff engine.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the vector-Jacobian product. :func:`backward` walks the
recorded graph in reverse topological order and accumulates gradients into
every tensor that requires them (in particular every :class:`Param`).

Spatial operations take ``C x H x W`` inputs or batched ``N x C x H x W``
inputs; the channel axis is always ``-3``.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised on malformed autodiff graphs (non-scalar loss, cycles)."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op}: produced {bad} non-finite value(s) in output of shape {arr.shape}")
    return arr


class Tensor:
    """A dense real array plus the bookkeeping needed for backprop."""

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: tuple["Tensor", ...] = (),
        _op: str = "",
    ):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g.reshape(self.data.shape)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)


class Param(Tensor):
    """A named trainable tensor; ``grad`` always has the value's shape."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or DEFAULT_DTYPE)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each appearing after all of its inputs."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in autodiff graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in autodiff graph")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor that needs it."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param) or not node._parents:
            if node.requires_grad:
                node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node._op}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    # 64-bit accumulation, stored back at the input precision
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.dtype)
    return _make(out, (a,), "mean", lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise smooth-L1: ``0.5 x^2`` inside ``|x| < 1``, ``|x| - 0.5`` outside."""
    x = a.data
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * x * x, ax - 0.5).astype(a.dtype)
    return _make(out, (a,), "smooth_l1", lambda g: (g * np.clip(x, -1, 1),))


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax across the channel axis (``-3``) at every pixel."""
    if a.ndim < 3:
        raise ValueError("softmax over channels needs a C x H x W input")
    z = a.data - a.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-3, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _make(p.astype(a.dtype), (a,), "softmax", _bw)


def log_softmax_channels(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-3, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=-3, keepdims=True),)

    return _make(out.astype(a.dtype), (a,), "log_softmax", _bw)


def elementwise(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "softmax_over_channels":
        return softmax_channels(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) or (in,)."""
    xd = x.data if x.ndim == 2 else x.data[None]
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data
    squeeze = x.ndim == 1

    def _bw(g):
        g2 = g[None] if squeeze else g
        gx = g2 @ weight.data
        gw = g2.T @ xd
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, "linear", _bw)


# ---------------------------------------------------------------------------
# spatial operations


def _batched(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")


def _unbatch(arr: np.ndarray, was3: bool) -> np.ndarray:
    return arr[0] if was3 else arr


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], b: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add ``dcols`` of shape (N, Ho, Wo, C, b, b) back to a padded image."""
    n, c, h, w = shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(b):
        for j in range(b):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def conv2d(x: Tensor, filters: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``filters`` has shape ``C_out x C_in x b x b``. Output extent is
    ``floor((H + 2 pad - b) / stride) + 1`` along each spatial axis.
    """
    was3 = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    o, ci, b, b2 = filters.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but filters expect {ci}")
    if b != b2:
        raise ValueError("conv2d: only square kernels are supported")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be positive and pad nonnegative")
    if b > h + 2 * pad or b > w + 2 * pad:
        raise ValueError(f"conv2d: kernel {b} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (b, b), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * b * b)
    wmat = filters.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def _bw(g):
        g4 = _batched(g)
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(filters.shape)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, b, b)
            gx = _unbatch(_col2im(dcols, (n, c, h, w), b, stride, pad), was3)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, filters) if bias is None else (x, filters, bias)
    return _make(np.ascontiguousarray(_unbatch(out, was3)), parents, "conv2d", _bw)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max over ``window x window`` blocks; gradient goes to the first argmax."""
    stride = window if stride is None else stride
    was3 = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    if window < 1 or stride < 1:
        raise ValueError("max_pool2d: window and stride must be positive")
    if window > h or window > w:
        raise ValueError(f"max_pool2d: window {window} larger than input {h}x{w}")
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        g4 = _batched(g)
        if stride == window and h % window == 0 and w % window == 0:
            onehot = arg[..., None] == np.arange(window * window)
            blocks = (onehot * g4[..., None]).reshape(n, c, ho, wo, window, window)
            dx = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w).astype(xd.dtype)
            return (_unbatch(dx, was3),)
        dx = np.zeros_like(xd)
        ii = arg // window
        jj = arg % window
        rows = ii + (np.arange(ho) * stride)[None, None, :, None]
        cols = jj + (np.arange(wo) * stride)[None, None, None, :]
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn, cc, rows, cols), g4)
        return (_unbatch(dx, was3),)

    return _make(np.ascontiguousarray(_unbatch(out, was3)), (x,), "max_pool2d", _bw)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` window mean (integer down-sampling)."""
    if factor == 1:
        return x
    was3 = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {factor}")
    out = xd.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5), dtype=np.float64)
    out = out.astype(xd.dtype)

    def _bw(g):
        g4 = _batched(g) / (factor * factor)
        dx = np.repeat(np.repeat(g4, factor, axis=2), factor, axis=3)
        return (_unbatch(dx, was3),)

    return _make(_unbatch(out, was3), (x,), "avg_pool2d", _bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Integer nearest-neighbour up-sampling; backward sums each block."""
    if factor == 1:
        return x
    was3 = x.ndim == 3
    xd = _batched(x.data)
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)

    def _bw(g):
        g4 = _batched(g)
        dx = g4.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (_unbatch(dx, was3),)

    return _make(_unbatch(out, was3), (x,), "upsample_nearest", _bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: (N, C, H, W) -> (N, C), or (C, H, W) -> (C,)."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)

    def _bw(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype),)

    return _make(out, (x,), "global_avg_pool", _bw)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack along the channel axis (``-3``) in argument order."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels: need at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=-3)
    offsets = np.cumsum([0] + [t.shape[-3] for t in tensors])

    def _bw(g):
        return tuple(g[..., offsets[k] : offsets[k + 1], :, :] for k in range(len(tensors)))

    return _make(out, tensors, "concat", _bw)


def pick_channels(logp: Tensor, labels: np.ndarray) -> Tensor:
    """Gather ``logp[..., labels[h, w], h, w]`` into an ``(N,) H x W`` map."""
    idx = np.expand_dims(labels.astype(np.int64), -3)
    out = np.take_along_axis(logp.data, idx, axis=-3)[..., 0, :, :]

    def _bw(g):
        dx = np.zeros_like(logp.data)
        np.put_along_axis(dx, idx, np.expand_dims(g, -3), axis=-3)
        return (dx,)

    return _make(out, (logp,), "pick", _bw)


def mask_scale(x: Tensor, weights: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array, broadcasting."""
    w = np.asarray(weights, dtype=x.dtype)
    return _make(x.data * w, (x,), "mask_scale", lambda g: (_unbroadcast(g * w, x.shape),))


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()
