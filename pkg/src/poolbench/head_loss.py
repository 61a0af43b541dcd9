"""Classification head with multi-sample dropout, focal loss, and prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, ShapeError, Tensor

NUM_CLASSES = 2
DROPOUT_RATES = (0.1, 0.15, 0.2, 0.25, 0.3)
INIT_STD = 0.02


@dataclass
class HeadParams:
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def hidden(self) -> int:
        return self.tensors["dense.weight"].shape[0]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def head_shapes(hidden: int) -> dict[str, tuple]:
    return {
        "dense.weight": (hidden, hidden),
        "dense.bias": (hidden,),
        "norm.gain": (hidden,),
        "norm.bias": (hidden,),
        "classifier.weight": (hidden, NUM_CLASSES),
        "classifier.bias": (NUM_CLASSES,),
    }


def init_head(hidden: int, seed: int) -> HeadParams:
    rng = nx.rng_stream(seed, "init/head")
    tensors = {}
    for name, shape in head_shapes(hidden).items():
        if name == "norm.gain":
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name="head." + name)
    return HeadParams(tensors)


def head_forward(
    params: HeadParams,
    pooled: Tensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
    rates: tuple[float, ...] = DROPOUT_RATES,
) -> Tensor:
    """Dense -> LayerNorm -> GELU, then dropout and the 2-way classifier.

    In training mode the dense block runs once and each rate in ``rates``
    draws its own mask; the resulting logits are averaged.
    """
    pooled = nx.as_tensor(pooled)
    if pooled.ndim != 2 or pooled.shape[1] != params.hidden:
        raise ShapeError(f"head expects B x {params.hidden} input, got {pooled.shape}")
    z = pooled @ params["dense.weight"] + params["dense.bias"]
    z = nx.gelu(nx.layer_norm(z, params["norm.gain"], params["norm.bias"]))
    w, b = params["classifier.weight"], params["classifier.bias"]
    if not training:
        return z @ w + b
    if not rates:
        raise ConfigError("multi-sample dropout needs at least one rate")
    samples = [nx.dropout(z, r, True, rng) @ w + b for r in rates]
    # anchored mean: first + mean of offsets, exact when all samples agree
    first = samples[0]
    if len(samples) == 1:
        return first
    offsets = [s - first for s in samples[1:]]
    total = offsets[0]
    for o in offsets[1:]:
        total = total + o
    return first + total * (1.0 / len(samples))


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"focal alpha must lie in [0, 1], got {self.alpha}")


class FocalLoss(nx.Function):
    @staticmethod
    def forward(ctx, logits, labels=None, gamma=2.0, alpha=0.5):
        b = logits.shape[0]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(b)
        logpt = logp[rows, labels]
        miss = -np.expm1(logpt)  # 1 - p_t without cancellation
        weight = np.where(labels == 1, 2.0 * alpha, 2.0 * (1.0 - alpha))
        modulator = miss**gamma
        ctx.save(logp=logp, logpt=logpt, miss=miss, weight=weight, modulator=modulator, labels=labels, gamma=gamma)
        return np.asarray(np.mean(-weight * modulator * logpt))

    @staticmethod
    def backward(ctx, grad):
        b = ctx.logp.shape[0]
        gamma, miss = ctx.gamma, ctx.miss
        if gamma == 0:
            focus = np.zeros_like(miss)
        else:
            safe = np.where(miss > 0, miss, 1.0)
            focus = np.where(miss > 0, gamma * safe ** (gamma - 1.0) * np.exp(ctx.logpt) * ctx.logpt, 0.0)
        dlogpt = -ctx.weight * (ctx.modulator - focus) / b
        onehot = np.zeros_like(ctx.logp)
        onehot[np.arange(b), ctx.labels] = 1.0
        dlogits = (onehot - np.exp(ctx.logp)) * dlogpt[:, None]
        return (grad * dlogits,)


def focal_loss(logits: Tensor, labels, cfg: FocalConfig = FocalConfig()) -> Tensor:
    """Batch mean of ``-alpha_t (1 - p_t)^gamma log p_t``.

    ``alpha_t`` is ``2 alpha`` for class 1 and ``2 (1 - alpha)`` for class 0,
    so ``alpha = 0.5`` leaves the classes unweighted.
    """
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] != NUM_CLASSES or labels.shape != (logits.shape[0],):
        raise ShapeError(f"focal_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (not np.all(np.isin(labels, (0, 1)))):
        raise ValueError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()) - {0, 1})}")
    return FocalLoss.apply(logits, labels=labels.astype(np.int64), gamma=float(cfg.gamma), alpha=float(cfg.alpha))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    logits = nx.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(nx.log_softmax(logits, axis=1) * onehot).sum(axis=1).mean()


def predict(logits) -> tuple[np.ndarray, np.ndarray]:
    """Argmax labels (ties go to class 0, human) and softmax probabilities."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=nx.DTYPE)
    labels = (z[:, 1] > z[:, 0]).astype(np.int64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return labels, e / e.sum(axis=1, keepdims=True)
