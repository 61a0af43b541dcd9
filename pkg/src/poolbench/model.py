"""Encoder -> pooling -> head classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import pooling as pl
from .head_loss import DROPOUT_RATES, HeadParams, head_forward, init_head
from .numerics import Tensor


@dataclass
class Classifier:
    encoder: enc.EncoderParams
    pooling: pl.PoolingConfig
    head: HeadParams

    @property
    def kind(self) -> str:
        return self.pooling.kind

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for prefix, tensors in (
            ("encoder.", self.encoder.tensors),
            ("pooling.", self.pooling.parameters),
            ("head.", self.head.tensors),
        ):
            for name, t in tensors.items():
                named[prefix + name] = t
        return named

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            "encoder": self.encoder.count(),
            "pooling": self.pooling.count(),
            "head": self.head.count(),
        }
        counts["total"] = sum(counts.values())
        return counts

    def forward(
        self,
        token_ids,
        mask,
        training: bool = False,
        rngs: tuple[np.random.Generator, np.random.Generator] | None = None,
        rates: tuple[float, ...] = DROPOUT_RATES,
    ) -> Tensor:
        enc_rng, head_rng = rngs if rngs is not None else (None, None)
        states = enc.encode(self.encoder, token_ids, mask, training=training, rng=enc_rng)
        pooled = pl.pool(self.pooling, states, mask)
        return head_forward(self.head, pooled, training=training, rng=head_rng, rates=rates)


def build_model(config: enc.EncoderConfig, kind: str, attention_heads: int = 8, seed: int = 0) -> Classifier:
    return Classifier(
        enc.init_encoder(config, seed),
        pl.init_pooling(kind, config.num_layers + 1, config.hidden, attention_heads, seed),
        init_head(config.hidden, seed),
    )
