"""Small dense reverse-mode differentiation engine on float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded in execution
order; :func:`backward` walks that record in reverse. Outside a tape every op
runs in plain inference mode and nothing is recorded.

>>> store = ParamStore()
>>> x = store.add("x", np.array([1.0, 2.0]))
>>> with Tape():
...     loss = (x * x).sum()
...     backward(loss)
>>> x.grad
array([2., 4.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

STD_EPS = 1e-5

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, node: "Tensor") -> None:
        node._tape = self
        node._pos = len(self.nodes)
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_tape", "_pos", "_g")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents: tuple = ()
        self._backward = None
        self._tape = None
        self._pos = -1
        self._g = None

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
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"op '{op}' produced non-finite values")
    out = Tensor(data, op=op)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.exp(x - out)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: ``0.5 x^2 / beta`` inside ``|x| < beta``."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _make(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),), "smooth_l1")


# reductions and shape ---------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def _normalize_index(idx):
    # np.add.at wants integer arrays rather than boolean masks
    if isinstance(idx, np.ndarray) and idx.dtype == bool:
        return np.nonzero(idx)
    if isinstance(idx, tuple):
        out = []
        for part in idx:
            if isinstance(part, np.ndarray) and part.dtype == bool:
                out.extend(np.nonzero(part))
            else:
                out.append(part)
        return tuple(out)
    return idx


def index(a, idx) -> Tensor:
    """Basic or fancy indexing; the backward pass scatters with ``np.add.at``."""
    a = as_tensor(a)
    idx = _normalize_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    exp_ = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(exp_, axis=axis)


# linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


# normalisation-style ops --------------------------------------------------------

def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True))
    out = a.data - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = (m + np.log(tot)).squeeze(axis)
    w = s / tot

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), bw, "logsumexp")


def channel_mean_std(x, eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and ``sqrt(var + eps)`` over the last two axes."""
    x = as_tensor(x)
    mu = tmean(x, axis=(-2, -1), keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=(-2, -1), keepdims=True)
    sigma = sqrt(add(var, eps))
    return mu, sigma


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


# convolution and pooling ----------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation, ``x`` (B, C, H, W), ``w`` (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if C != Cw or k != k2:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if pad is None:
        pad = k // 2
    s = stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // s + 1
    Wo = (W + 2 * pad - k) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, i, j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def avg_pool(x, k: int) -> Tensor:
    """Non-overlapping ``k x k`` average pooling over the last two axes."""
    x = as_tensor(x)
    if k == 1:
        return x
    *lead, H, W = x.shape
    if H % k or W % k:
        raise ValueError(f"avg_pool: spatial shape {(H, W)} not divisible by {k}")
    out = x.data.reshape(*lead, H // k, k, W // k, k).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k),)

    return _make(out, (x,), bw, "avg_pool")


def bilinear_matrix(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Dense (P, H*W) interpolation weights for sample points ``(x, y)``.

    Pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)`` in map units.
    Samples outside the map are clamped to the border.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x = np.clip(pts[:, 0] - 0.5, 0.0, width - 1.0)
    y = np.clip(pts[:, 1] - 0.5, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), width - 2) if width > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), height - 2) if height > 1 else np.zeros(len(y), int)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    P = len(pts)
    M = np.zeros((P, height * width))
    rows = np.arange(P)
    np.add.at(M, (rows, y0 * width + x0), (1 - fx) * (1 - fy))
    np.add.at(M, (rows, y0 * width + x1), fx * (1 - fy))
    np.add.at(M, (rows, y1 * width + x0), (1 - fx) * fy)
    np.add.at(M, (rows, y1 * width + x1), fx * fy)
    return M


def bilinear_sample(fmap, points: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at ``points``; returns (C, P).

    Gradients reach ``fmap`` only; the sample locations are constants.
    """
    fmap = as_tensor(fmap)
    C, H, W = fmap.shape
    M = bilinear_matrix(points, H, W)
    return matmul(reshape(fmap, (C, H * W)), Tensor(M.T))


# backward ----------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every leaf that requires it.

    Intermediate gradients are discarded afterwards, so calling twice on the
    same graph adds the leaf gradients twice.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise RuntimeError("loss was not recorded on a tape")
    loss._g = np.ones_like(loss.data)
    touched = [loss]
    for node in reversed(tape.nodes[: loss._pos + 1]):
        g = node._g
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if not parent.requires_grad or pg is None:
                continue
            if parent._backward is None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
            elif parent._g is None:
                parent._g = np.array(pg, dtype=np.float64, copy=True)
                touched.append(parent)
            else:
                parent._g += pg
    for node in touched:
        node._g = None


class ParamStore:
    """Named trainable tensors with matching gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=f"param:{name}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self._params.items()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            p = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.shape}")
            p.data = v.copy()

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())


class SGD:
    """SGD with momentum and optional L2 weight decay."""

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        grads = self.params.grads()
        total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.clip_norm is not None and total > self.clip_norm:
            factor = self.clip_norm / total
        for k, p in self.params.items():
            g = grads[k] * factor
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
        return total


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. The error for each coordinate is
    ``|a - c| / max(1e-8, |a| + |c|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        out = f(leaf)
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    flat = x0.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        central = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - central) / max(1e-8, abs(a) + abs(central))
        worst = max(worst, err)
    return worst
