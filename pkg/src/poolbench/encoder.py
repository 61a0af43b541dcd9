"""Small pre-norm transformer encoder that returns every layer's hidden states."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 1000
    max_positions: int = 128
    dropout_rate: float = 0.1

    def __post_init__(self):
        for key in ("num_layers", "hidden", "heads", "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerStates:
    """Embedding output followed by the output of each encoder layer."""

    states: list[Tensor]

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, i: int) -> Tensor:
        return self.states[i]

    def __iter__(self):
        return iter(self.states)

    @property
    def final(self) -> Tensor:
        return self.states[-1]


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def parameter_count(config: EncoderConfig) -> int:
    h, f, layers = config.hidden, config.ffn_dim, config.num_layers
    embeddings = (config.vocab_size + config.max_positions) * h
    attention = 4 * (h * h + h)
    ffn = h * f + f + f * h + h
    norms = 2 * 2 * h
    return embeddings + layers * (attention + ffn + norms)


def layer_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.ffn_dim
    shapes = {
        "embed.tokens": (config.vocab_size, h),
        "embed.positions": (config.max_positions, h),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "ln1.gain": (h,),
                p + "ln1.bias": (h,),
                p + "attn.wq": (h, h),
                p + "attn.bq": (h,),
                p + "attn.wk": (h, h),
                p + "attn.bk": (h,),
                p + "attn.wv": (h, h),
                p + "attn.bv": (h,),
                p + "attn.wo": (h, h),
                p + "attn.bo": (h,),
                p + "ln2.gain": (h,),
                p + "ln2.bias": (h,),
                p + "ffn.w1": (h, f),
                p + "ffn.b1": (f,),
                p + "ffn.w2": (f, h),
                p + "ffn.b2": (h,),
            }
        )
    return shapes


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    rng = nx.rng_stream(seed, "init/encoder")
    tensors = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name="encoder." + name)
    return EncoderParams(config, tensors)


def _attention(params: EncoderParams, prefix: str, x: Tensor, keep: np.ndarray) -> Tensor:
    cfg = params.config
    b, t, h = x.shape
    nh, d = cfg.heads, cfg.hidden // cfg.heads

    def split_heads(y: Tensor) -> Tensor:
        return y.reshape(b, t, nh, d).transpose(0, 2, 1, 3)

    q = split_heads(x @ params[prefix + "wq"] + params[prefix + "bq"])
    k = split_heads(x @ params[prefix + "wk"] + params[prefix + "bk"])
    v = split_heads(x @ params[prefix + "wv"] + params[prefix + "bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    scores = nx.mask_fill(scores, keep)
    ctx = nx.softmax(scores, axis=-1) @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, t, h)
    return merged @ params[prefix + "wo"] + params[prefix + "bo"]


def encode(
    params: EncoderParams,
    token_ids,
    mask,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> LayerStates:
    """Run the encoder; masked key positions get -inf attention logits."""
    cfg = params.config
    ids = np.asarray(token_ids)
    mask = np.asarray(mask, dtype=nx.DTYPE)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise nx.ShapeError(f"token ids {ids.shape} and mask {mask.shape} must both be B x T")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("token ids must be integers")
    b, t = ids.shape
    if t > cfg.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    rate = cfg.dropout_rate if training else 0.0

    positions = nx.embedding(params["embed.positions"], np.arange(t)).reshape(1, t, cfg.hidden)
    x = nx.embedding(params["embed.tokens"], ids) + positions
    x = nx.dropout(x, rate, training, rng)
    states = [x]
    keep = mask[:, None, None, :] > 0
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        a = nx.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        x = x + nx.dropout(_attention(params, p + "attn.", a, keep), rate, training, rng)
        f = nx.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        f = nx.gelu(f @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        x = x + nx.dropout(f, rate, training, rng)
        states.append(x)
    return LayerStates(states)
