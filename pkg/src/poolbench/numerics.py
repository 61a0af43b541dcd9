"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` and a ``backward`` staticmethod. Calling ``Fn.apply(...)`` runs the
forward on raw arrays and, when gradients are enabled and any input requires
them, appends a :class:`Node` to the current thread's :class:`Tape`.
:func:`backward` walks that tape in exact reverse recording order.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NondeterminismError(RuntimeError):
    pass


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        # gradient buffers are never mutated in place, so the first one may alias
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    fn: type
    ctx: "Context"
    inputs: tuple[Tensor, ...]
    output: Tensor
    index: int = -1
    tape: "Tape | None" = None


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Context:
    """Scratch space a forward pass leaves for its backward rule.

    ``needs`` holds one flag per tensor input telling backward which input
    gradients are wanted.
    """

    needs: tuple[bool, ...] = ()

    def save(self, **values) -> None:
        self.__dict__.update(values)


class Function:
    @staticmethod
    def forward(ctx: Context, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        ctx.needs = tuple(t.requires_grad for t in tensors)
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        needs_grad = grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=needs_grad)
        if needs_grad:
            node = Node(cls, ctx, tensors, result)
            current_tape().record(node)
            result.node = node
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a_shape=a.shape, b_shape=b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        return _unbroadcast(grad, ctx.a_shape), _unbroadcast(grad, ctx.b_shape)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a_shape=a.shape, b_shape=b.shape)
        return a - b

    @staticmethod
    def backward(ctx, grad):
        return _unbroadcast(grad, ctx.a_shape), _unbroadcast(-grad, ctx.b_shape)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        ga = _unbroadcast(grad * ctx.b, ctx.a.shape) if ctx.needs[0] else None
        gb = _unbroadcast(grad * ctx.a, ctx.b.shape) if ctx.needs[1] else None
        return ga, gb


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        return a / b

    @staticmethod
    def backward(ctx, grad):
        ga = grad / ctx.b
        gb = -grad * ctx.a / (ctx.b * ctx.b)
        return _unbroadcast(ga, ctx.a.shape), _unbroadcast(gb, ctx.b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, grad):
        return (-grad,)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx.out,)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return np.log(a)

    @staticmethod
    def backward(ctx, grad):
        return (grad / ctx.a,)


class Tanh(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, grad):
        return (grad * (1.0 - ctx.out * ctx.out),)


def _logistic(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never sees a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        out = _logistic(a)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx, grad):
        s = ctx.out
        return (grad * s * (1.0 - s),)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""

    @staticmethod
    def forward(ctx, a):
        t = a * a
        t *= 0.044715
        t += 1.0
        t *= a
        t *= _GELU_C
        np.tanh(t, out=t)
        ctx.save(a=a, t=t)
        out = t + 1.0
        out *= a
        out *= 0.5
        return out

    @staticmethod
    def backward(ctx, grad):
        a, t = ctx.a, ctx.t
        # d/da = 0.5 (1 + t) + 0.5 a (1 - t^2) C (1 + 3 * 0.044715 a^2)
        du = a * a
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        du *= a
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        du *= sech2
        du += 1.0
        du += t
        du *= 0.5
        du *= grad
        return (du,)


# ---------------------------------------------------------------------------
# shape and reduction


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad, ctx.shape).copy(),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        ctx.save(shape=a.shape, axis=axis, keepdims=keepdims, count=count)
        return np.mean(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, grad):
        if ctx.axis is not None and not ctx.keepdims:
            grad = np.expand_dims(grad, ctx.axis)
        return (np.broadcast_to(grad / ctx.count, ctx.shape).copy(),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.save(shape=a.shape)
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(axes=axes)
        return np.transpose(a, axes)

    @staticmethod
    def backward(ctx, grad):
        return (np.transpose(grad, np.argsort(ctx.axes)),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=-1):
        sizes = [a.shape[axis] for a in arrays]
        ctx.save(bounds=np.cumsum(sizes)[:-1], axis=axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.split(grad, ctx.bounds, axis=ctx.axis))


class Stack(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(axis=axis, count=len(arrays))
        return np.stack(arrays, axis=axis)

    @staticmethod
    def backward(ctx, grad):
        return tuple(np.take(grad, i, axis=ctx.axis) for i in range(ctx.count))


class Embedding(Function):
    """Row gather ``table[ids]``; ids is an integer array and gets no gradient."""

    @staticmethod
    def forward(ctx, table, ids):
        idx = ids.astype(np.int64)
        ctx.save(idx=idx, shape=table.shape)
        return table[idx]

    @staticmethod
    def backward(ctx, grad):
        g = np.zeros(ctx.shape, dtype=DTYPE)
        np.add.at(g, ctx.idx, grad)
        return g, None


class MaskFill(Function):
    """Replace entries where ``keep`` is False with ``value`` (no gradient there)."""

    @staticmethod
    def forward(ctx, a, keep, value=-np.inf):
        keep = np.broadcast_to(keep.astype(bool), a.shape)
        ctx.save(keep=keep)
        return np.where(keep, a, value)

    @staticmethod
    def backward(ctx, grad):
        return np.where(ctx.keep, grad, 0.0), None


# ---------------------------------------------------------------------------
# linear algebra and normalisation


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a=a, b=b)
        if b.ndim == 2 and a.ndim > 2:
            # fold leading axes into one GEMM
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.a, ctx.b
        ga = gb = None
        if b.ndim == 2 and a.ndim > 2:
            g2 = grad.reshape(-1, grad.shape[-1])
            if ctx.needs[0]:
                ga = (g2 @ b.T).reshape(a.shape)
            if ctx.needs[1]:
                gb = a.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if ctx.needs[0]:
            ga = _unbroadcast(np.matmul(grad, np.swapaxes(b, -1, -2)), a.shape)
        if ctx.needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), grad), b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return MatMul.apply(a, b)


class Softmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        out = a - np.max(a, axis=axis, keepdims=True)
        np.exp(out, out=out)
        out /= np.sum(out, axis=axis, keepdims=True)
        ctx.save(out=out, axis=axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        y = ctx.out
        g = grad * y
        dot = np.sum(g, axis=ctx.axis, keepdims=True)
        g -= y * dot
        return (g,)


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        z = a - np.max(a, axis=axis, keepdims=True)
        out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        ctx.save(out=out, axis=axis)
        return out

    @staticmethod
    def backward(ctx, grad):
        p = np.exp(ctx.out)
        return (grad - p * np.sum(grad, axis=ctx.axis, keepdims=True),)


class LayerNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat=xhat, inv=inv, gamma=gamma)
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, grad):
        xhat, inv, gamma = ctx.xhat, ctx.inv, ctx.gamma
        lead = tuple(range(grad.ndim - 1))
        dgamma = np.sum(grad * xhat, axis=lead)
        dbeta = np.sum(grad, axis=lead)
        dxhat = grad * gamma
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


class MaskedMean(Function):
    @staticmethod
    def forward(ctx, h, mask):
        counts = mask.sum(axis=1)
        if np.any(counts <= 0):
            rows = np.flatnonzero(counts <= 0).tolist()
            raise ValueError(f"masked_mean: empty sequence (all-zero mask) in rows {rows}")
        # sequential accumulation: appended masked positions add exact zeros,
        # so the result is bit-identical with or without trailing padding
        acc = np.zeros((h.shape[0], h.shape[2]), dtype=DTYPE)
        for t in range(h.shape[1]):
            acc = acc + h[:, t, :] * mask[:, t, None]
        ctx.save(mask=mask, counts=counts, shape=h.shape)
        return acc / counts[:, None]

    @staticmethod
    def backward(ctx, grad):
        w = ctx.mask / ctx.counts[:, None]
        return w[:, :, None] * grad[:, None, :], None


# ---------------------------------------------------------------------------
# functional surface


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def tanh(x) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma = as_tensor(x), as_tensor(gamma)
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"layer_norm: last dimension {x.shape[-1]} != gain width {gamma.shape[-1]}")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def masked_mean(h, mask) -> Tensor:
    """Average ``h[b, t]`` over positions with ``mask[b, t] == 1``."""
    h = as_tensor(h)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=DTYPE)
    if h.ndim != 3 or mask.shape != h.shape[:2]:
        raise ShapeError(f"masked_mean: hidden {h.shape} incompatible with mask {mask.shape}")
    return MaskedMean.apply(h, mask)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def embedding(table, ids) -> Tensor:
    return Embedding.apply(table, np.asarray(ids))


def mask_fill(x, keep, value: float = -np.inf) -> Tensor:
    return MaskFill.apply(x, np.asarray(keep), value=value)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Returns ``x`` itself when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an RNG stream")
    keep = rng.random(x.shape) >= rate
    return Mul.apply(x, keep / (1.0 - rate))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Gradients accumulate into existing buffers; the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=DTYPE)
    if loss.node is None:
        if not loss.requires_grad:
            raise ValueError("loss is not on the tape and does not require grad")
        loss._accumulate(seed)
        return
    tape = loss.node.tape
    loss._accumulate(seed)
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        out = node.output
        if out.grad is None:
            continue
        grads = node.fn.backward(node.ctx, out.grad)
        if not isinstance(grads, tuple):
            grads = (grads,)
        for inp, g in zip(node.inputs, grads):
            if g is not None and inp.requires_grad:
                inp._accumulate(g)
    tape.clear()


# ---------------------------------------------------------------------------
# seeded random streams


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """PCG64 stream keyed by ``(seed, sha256(label))``.

    Distinct labels give statistically independent streams; the same pair
    always reproduces the same sequence on any platform.
    """
    key = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    size: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float
    h: float

    @property
    def passed(self) -> bool:
        return bool(self.entries) and all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps parameters whose true gradient is exactly zero (an
    attention key bias under softmax shift invariance, say) from comparing
    finite-difference noise against itself.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on each
    call and be deterministic; two reference evaluations are compared first.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    with no_grad():
        first = f().data.copy()
        second = f().data.copy()
    if not np.array_equal(first, second):
        raise NondeterminismError("grad_check: f returned different values on identical inputs")

    for _, p in named:
        p.grad = None
    backward(f())

    entries = []
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.empty(p.size, dtype=DTYPE)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
        err = relative_error(analytic.reshape(-1), numeric, floor)
        entries.append(GradCheckEntry(name, p.size, err, err < tol))
    return GradCheckReport(entries, tol, h)
