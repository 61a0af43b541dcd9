"""Token/layer aggregation strategies and the four pooling pipelines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import LayerStates
from .numerics import ConfigError, ShapeError, Tensor

KINDS = ("mean", "wlp_mean", "wlp_attention", "wlp_attention_gated")

LABELS = {
    "mean": "Mean Pooling",
    "wlp_mean": "Weighted Layer Pooling + Mean",
    "wlp_attention": "Weighted Layer Pooling + Attention",
    "wlp_attention_gated": "Weighted Layer Pooling + Attention + Gated Fusion",
}

INIT_STD = 0.02


@dataclass
class PoolingConfig:
    kind: str
    attention_heads: int = 8
    parameters: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown pooling kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.attention_heads < 1:
            raise ConfigError("attention_heads must be at least 1")

    def count(self) -> int:
        return sum(t.size for t in self.parameters.values())


def parameter_shapes(kind: str, num_states: int, hidden: int, attention_heads: int = 8) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    if kind == "mean":
        return shapes
    shapes["layer_weights"] = (num_states,)
    if kind in ("wlp_attention", "wlp_attention_gated"):
        shapes["queries"] = (attention_heads, hidden)
        shapes["projection"] = (attention_heads * hidden, hidden)
    if kind == "wlp_attention_gated":
        width = 2 * hidden
        shapes["gate.weight"] = (width, width)
        shapes["gate.bias"] = (width,)
    return shapes


def parameter_count(kind: str, num_states: int, hidden: int, attention_heads: int = 8) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(kind, num_states, hidden, attention_heads).values())


def init_pooling(kind: str, num_states: int, hidden: int, attention_heads: int = 8, seed: int = 0) -> PoolingConfig:
    """Neutral start: uniform layer weights, half-open gates, small queries."""
    cfg = PoolingConfig(kind, attention_heads)
    rng = nx.rng_stream(seed, "init/pooling")
    for name, shape in parameter_shapes(kind, num_states, hidden, attention_heads).items():
        if name in ("queries", "projection"):
            values = rng.normal(0.0, INIT_STD, size=shape)
        else:
            values = np.zeros(shape)
        cfg.parameters[name] = Tensor(values, requires_grad=True, name="pooling." + name)
    return cfg


def mean_pool(states: LayerStates, mask) -> Tensor:
    return nx.masked_mean(states.final, mask)


def weighted_layer_combine(states: LayerStates, w: Tensor) -> Tensor:
    """Softmax-weighted sum of all layer states, shape B x T x H."""
    w = nx.as_tensor(w)
    if w.shape != (len(states),):
        raise ShapeError(f"layer weights have shape {w.shape}, need ({len(states)},)")
    alpha = nx.softmax(w, axis=0).reshape(len(states), 1, 1, 1)
    return (alpha * nx.stack(list(states), axis=0)).sum(axis=0)


def attention_pool(h: Tensor, mask, queries: Tensor, projection: Tensor) -> Tensor:
    """Each query attends over tokens; contexts are concatenated then projected.

    Scores are ``q . h_t / sqrt(H)`` with masked positions at -inf.
    """
    b, t, hidden = h.shape
    heads = queries.shape[0]
    if queries.shape[1] != hidden or projection.shape != (heads * hidden, hidden):
        raise ShapeError(
            f"attention_pool: queries {queries.shape} / projection {projection.shape} "
            f"do not fit hidden width {hidden}"
        )
    mask = np.asarray(mask, dtype=nx.DTYPE)
    if np.any(mask.sum(axis=1) <= 0):
        raise ValueError("attention_pool: a row has no unmasked tokens")
    scores = (h @ queries.transpose()).transpose(0, 2, 1) * (1.0 / np.sqrt(hidden))
    scores = nx.mask_fill(scores, mask[:, None, :] > 0)
    contexts = nx.softmax(scores, axis=-1) @ h
    return contexts.reshape(b, heads * hidden) @ projection


def gated_fusion(pooled: Sequence[Tensor], gate_weight: Tensor, gate_bias: Tensor) -> Tensor:
    """Elementwise sigmoid gates computed from the concatenated candidates."""
    k = len(pooled)
    if k < 2:
        raise ValueError("gated_fusion needs at least two pooled inputs")
    shape = pooled[0].shape
    if any(p.shape != shape for p in pooled):
        raise ShapeError(f"gated_fusion inputs disagree in shape: {[p.shape for p in pooled]}")
    b, hidden = shape
    z = nx.concat(list(pooled), axis=-1)
    gates = nx.sigmoid(z @ gate_weight + gate_bias)
    return (gates * z).reshape(b, k, hidden).sum(axis=1)


def pool(config: PoolingConfig, states: LayerStates, mask) -> Tensor:
    if config.kind == "mean":
        return mean_pool(states, mask)
    params = config.parameters
    combined = weighted_layer_combine(states, params["layer_weights"])
    if config.kind == "wlp_mean":
        return nx.masked_mean(combined, mask)
    attended = attention_pool(combined, mask, params["queries"], params["projection"])
    if config.kind == "wlp_attention":
        return attended
    averaged = nx.masked_mean(combined, mask)
    return gated_fusion([averaged, attended], params["gate.weight"], params["gate.bias"])
