"""AdamW with layer-wise learning-rate decay, cosine warmup, and accumulation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .head_loss import DROPOUT_RATES, FocalConfig
from .numerics import ConfigError, Tensor
from .pooling import KINDS


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 2e-5
    weight_decay: float = 0.01
    llrd: float = 0.95
    warmup_ratio: float = 0.10
    epochs: int = 2
    micro_batch: int = 16
    grad_accum: int = 4
    max_seq_len: int = 128
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    dropout_rates: tuple[float, ...] = DROPOUT_RATES
    pooling: str = "mean"
    attention_heads: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in (0, 1), got {self.warmup_ratio}")
        if not 0.0 < self.llrd <= 1.0:
            raise ConfigError(f"llrd must lie in (0, 1], got {self.llrd}")
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ConfigError("micro_batch and grad_accum must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be at least 1")
        if self.pooling not in KINDS:
            raise ConfigError(f"unknown pooling kind {self.pooling!r}; expected one of {', '.join(KINDS)}")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigError(f"dropout rates must lie in [0, 1), got {self.dropout_rates}")
        FocalConfig(self.focal_gamma, self.focal_alpha)

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_gamma, self.focal_alpha)

    def total_steps(self, train_size: int) -> int:
        return math.ceil(train_size / self.effective_batch) * self.epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_rates"] = list(self.dropout_rates)
        return d


@dataclass
class ParamGroup:
    names: list[str]
    params: list[Tensor]
    lr_scale: float
    weight_decay: float


def is_no_decay(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gain", "bias") or (len(leaf) == 2 and leaf[0] == "b")


def encoder_lr_scale(name: str, num_layers: int, llrd: float) -> float:
    """``llrd ** (L - i)`` for layer i, ``llrd ** (L + 1)`` for embeddings."""
    if name.startswith("embed."):
        return llrd ** (num_layers + 1)
    if name.startswith("layers."):
        i = int(name.split(".")[1])
        return llrd ** (num_layers - i)
    raise ValueError(f"not an encoder parameter name: {name}")


def build_llrd_groups(encoder, pooling, head, cfg: TrainConfig) -> list[ParamGroup]:
    """Groups ordered head, pooling, top encoder layer ... embeddings.

    Each scale is split into a decayed and a non-decayed group.
    """
    L = encoder.config.num_layers
    groups: dict[tuple, ParamGroup] = {}

    def add(name: str, tensor: Tensor, scale: float, order: int):
        wd = 0.0 if is_no_decay(name) else cfg.weight_decay
        key = (order, wd)
        if key not in groups:
            groups[key] = ParamGroup([], [], scale, wd)
        groups[key].names.append(tensor.name or name)
        groups[key].params.append(tensor)

    for name, t in head.tensors.items():
        add(name, t, 1.0, 0)
    for name, t in pooling.parameters.items():
        add(name, t, 1.0, 0)
    for name, t in encoder.tensors.items():
        scale = encoder_lr_scale(name, L, cfg.llrd)
        order = L + 1 if name.startswith("embed.") else L - int(name.split(".")[1])
        add(name, t, scale, order)
    return [groups[k] for k in sorted(groups)]


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    # round half up, not Python's banker's rounding
    return int(math.floor(warmup_ratio * total_steps + 0.5))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to 1 followed by half-cosine decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, cfg.warmup_ratio)
    if step < warm:
        return step / warm
    span = max(total_steps - warm, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    groups: Sequence[ParamGroup],
    multiplier: float,
    state: AdamState,
    base_lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    for group in groups:
        for name, p in zip(group.names, group.params):
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for group in groups:
        lr = base_lr * group.lr_scale * multiplier
        for name, p in zip(group.names, group.params):
            g = p.grad
            m = state.m.get(name)
            v = state.v.get(name)
            m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
            v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
            state.m[name], state.v[name] = m, v
            if group.weight_decay:
                p.data -= lr * group.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def zero_grad(groups: Sequence[ParamGroup]) -> None:
    for group in groups:
        for p in group.params:
            p.grad = None


def accumulate_gradients(micro_batches: Sequence, loss_fn: Callable[[object], Tensor]) -> float:
    """Backward each micro-batch loss weighted by its share of the examples.

    With equal-sized micro-batches the weight is ``1 / len(micro_batches)``;
    the accumulated gradient equals that of the concatenated batch.
    """
    total = sum(len(mb) for mb in micro_batches)
    running = 0.0
    for mb in micro_batches:
        loss = loss_fn(mb)
        share = len(mb) / total
        running += share * loss.item()
        nx.backward(loss * share)
    return running


def accumulate_and_step(
    micro_batches: Sequence,
    loss_fn: Callable[[object], Tensor],
    groups: Sequence[ParamGroup],
    state: AdamState,
    cfg: TrainConfig,
    multiplier: float,
) -> float:
    zero_grad(groups)
    loss = accumulate_gradients(micro_batches, loss_fn)
    adam_step(groups, multiplier, state, cfg.base_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    zero_grad(groups)
    return loss


def group_summary(groups: Sequence[ParamGroup]) -> list[Mapping]:
    return [
        {"lr_scale": g.lr_scale, "weight_decay": g.weight_decay, "params": len(g.params)}
        for g in groups
    ]
