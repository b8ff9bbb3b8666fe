"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations needed by the illumination networks, the
comparametric module and the unsupervised losses are provided. Graphs are
built on the fly: every tensor produced by an operation remembers its
inputs and a closure that maps the output gradient to input gradients.
:func:`backward` orders the recorded nodes topologically and accumulates
gradients into the requested leaves.

Storage is float32 unless a tensor is created with ``dtype=np.float64``;
operations keep the widest input dtype, which is what :func:`gradcheck`
relies on.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "BatchNormState",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "absolute",
    "exp",
    "clamp",
    "relu",
    "sum",
    "mean",
    "conv3x3",
    "batchnorm",
    "avg_pool",
    "spatial_gradient",
    "custom",
    "backward",
    "gradcheck",
]

_ids = itertools.count()


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it.

    ``op``/``parents``/``grad_fn`` are empty for leaves. ``requires_grad``
    marks trainable leaves; interior nodes inherit it from their inputs.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or np.float32, order="C", copy=None)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _index(self, index)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(value, dtype=dtype)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad_fn = grad_fn
    return out


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    dtype = _result_dtype(a, b)
    out = (a.data + b.data).astype(dtype, copy=False)
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    dtype = _result_dtype(a, b)
    out = (a.data - b.data).astype(dtype, copy=False)
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    dtype = _result_dtype(a, b)
    out = (a.data * b.data).astype(dtype, copy=False)
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    dtype = _result_dtype(a, b)
    out = (a.data / b.data).astype(dtype, copy=False)

    def grad_fn(g):
        ga = g / b.data
        gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def absolute(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the value was not clipped."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def _index(a: Tensor, index) -> Tensor:
    out = np.array(a.data[index])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("index", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make("sum", np.asarray(out, dtype=a.dtype), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), grad_fn)


# ---------------------------------------------------------------------------
# image operators


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with zero "same" padding.

    ``x`` is C_in x H x W, ``weight`` C_out x C_in x 3 x 3, ``bias`` C_out.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv3x3 expects a C x H x W input, got shape {x.shape}")
    c_in, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[1:] != (c_in, 3, 3):
        raise ShapeError(
            f"conv3x3 kernel shape {weight.shape} does not match input channels {c_in}")
    c_out = weight.shape[0]
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3x3 bias shape {bias.shape}, expected ({c_out},)")

    dtype = _result_dtype(x, weight, bias)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1))).astype(dtype, copy=False)
    cols = np.empty((c_in, 3, 3, h, w), dtype=dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    cols = cols.reshape(c_in * 9, h * w)
    w2 = weight.data.astype(dtype, copy=False).reshape(c_out, c_in * 9)
    out = w2 @ cols
    out += bias.data.astype(dtype)[:, None]

    def grad_fn(g):
        g2 = g.reshape(c_out, h * w)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (w2.T @ g2).reshape(c_in, 3, 3, h, w)
        gx = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gx[:, dy:dy + h, dx:dx + w] += gcols[:, dy, dx]
        return gx[:, 1:-1, 1:-1], gw, g2.sum(axis=1)

    return _make("conv3x3", out.reshape(c_out, h, w), (x, weight, bias), grad_fn)


class BatchNormState:
    """Running per-channel statistics for :func:`batchnorm`.

    ``count`` is the number of training batches folded in so far; inference
    with ``count == 0`` is refused.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.count = 0
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> BatchNormState:
        other = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        other.count = self.count
        return other


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train") -> Tensor:
    """Per-channel normalisation over H x W (batch size one), then affine.

    Train mode normalises with the biased batch variance and folds the
    batch statistics into ``state`` (unbiased variance, like most
    frameworks). This mutates ``state``, so train-mode calls are not pure.
    """
    c, h, w = x.shape
    eps = state.eps
    flat = x.data.reshape(c, -1)
    if mode == "train":
        mu = flat.mean(axis=1)
        var = flat.var(axis=1)
        n = flat.shape[1]
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(np.float32)
        state.count += 1
    elif mode == "infer":
        if state.count == 0:
            raise RuntimeError("batchnorm inference requested before running statistics exist")
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu[:, None]) * inv[:, None]
    dtype = _result_dtype(x, gamma, beta)
    out = (gamma.data[:, None] * xhat + beta.data[:, None]).astype(dtype).reshape(c, h, w)

    def grad_fn(g):
        g2 = g.reshape(c, -1)
        ggamma = (g2 * xhat).sum(axis=1)
        gbeta = g2.sum(axis=1)
        gxhat = g2 * gamma.data[:, None]
        if mode == "train":
            gx = inv[:, None] * (gxhat - gxhat.mean(axis=1, keepdims=True)
                                 - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        else:
            gx = gxhat * inv[:, None]
        return gx.reshape(c, h, w), ggamma, gbeta

    return _make("batchnorm", out, (x, gamma, beta), grad_fn)


def avg_pool(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling over the last two axes.

    Trailing windows that do not fit are averaged over the pixels they
    actually cover, so output dims are ``ceil(dim / kernel)``.
    """
    if kernel < 1:
        raise ValueError(f"pooling kernel must be >= 1, got {kernel}")
    c, h, w = x.shape
    ho, wo = -(-h // kernel), -(-w // kernel)
    ph, pw = ho * kernel - h, wo * kernel - w
    padded = np.pad(x.data, ((0, 0), (0, ph), (0, pw)))
    sums = padded.reshape(c, ho, kernel, wo, kernel).sum(axis=(2, 4))
    rows = np.minimum(kernel, h - np.arange(ho) * kernel)
    cols = np.minimum(kernel, w - np.arange(wo) * kernel)
    counts = (rows[:, None] * cols[None, :]).astype(x.dtype)
    out = (sums / counts).astype(x.dtype)

    def grad_fn(g):
        spread = np.repeat(np.repeat(g / counts, kernel, axis=1), kernel, axis=2)
        return (spread[:, :h, :w],)

    return _make("avg_pool", out, (x,), grad_fn)


def spatial_gradient(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along width and height; the last column/row is 0."""
    gx = np.zeros_like(x.data)
    gy = np.zeros_like(x.data)
    gx[..., :, :-1] = x.data[..., :, 1:] - x.data[..., :, :-1]
    gy[..., :-1, :] = x.data[..., 1:, :] - x.data[..., :-1, :]

    def grad_x(g):
        out = np.zeros_like(x.data)
        out[..., :, 1:] += g[..., :, :-1]
        out[..., :, :-1] -= g[..., :, :-1]
        return (out,)

    def grad_y(g):
        out = np.zeros_like(x.data)
        out[..., 1:, :] += g[..., :-1, :]
        out[..., :-1, :] -= g[..., :-1, :]
        return (out,)

    return _make("grad_x", gx, (x,), grad_x), _make("grad_y", gy, (x,), grad_y)


def custom(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Register an operation whose gradient is supplied in closed form."""
    return _make(op, np.asarray(data), parents, grad_fn)


# ---------------------------------------------------------------------------
# differentiation


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             accumulate: bool = True) -> list[np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns one gradient per entry of ``params`` (defaults to every
    ``requires_grad`` leaf reachable from ``loss``); unreachable parameters
    get zeros. When ``accumulate`` is true the gradients are also added to
    each parameter's ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    if params is None:
        params = [n for n in order if n.op == "leaf" and n.requires_grad]
    params = list(params)

    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
        if g is None or node.grad_fn is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient reaching op {node.op!r}")
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg

    result = []
    for p in params:
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.data)
        if accumulate:
            p.grad = g.copy() if p.grad is None else p.grad + g
        result.append(g)
    return result


def gradcheck(fn: Callable[..., Tensor], point, h: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``point`` is a Tensor/array or a sequence of them; ``fn`` receives them
    as float64 tensors and must return a scalar tensor. The relative error
    per entry is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("gradcheck step must be positive")
    single = isinstance(point, (Tensor, np.ndarray)) or np.isscalar(point)
    points = [point] if single else list(point)
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in points]

    inputs = [Tensor(b.copy(), requires_grad=True, dtype=np.float64) for b in base]
    analytic = backward(fn(*inputs), inputs, accumulate=False)

    def value(arrays):
        return float(fn(*[Tensor(a, dtype=np.float64) for a in arrays]).data)

    worst = 0.0
    for i, b in enumerate(base):
        flat = b.reshape(-1)
        for j in range(flat.size):
            probe = [a.copy() for a in base]
            pf = probe[i].reshape(-1)
            pf[j] = flat[j] + h
            up = value(probe)
            pf[j] = flat[j] - h
            down = value(probe)
            numeric = (up - down) / (2 * h)
            ga = float(analytic[i].reshape(-1)[j])
            denom = max(abs(ga), abs(numeric), 1e-8)
            worst = max(worst, abs(ga - numeric) / denom)
    return worst
