"""Training and inference loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import Sample, Vocab, build_vocab, make_batches
from .encoder import EncoderConfig
from .head_loss import focal_loss, predict
from .model import Classifier, build_model
from .optim import AdamState, TrainConfig, accumulate_and_step, build_llrd_groups, lr_at

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: Classifier
    vocab: Vocab
    state: AdamState
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    completed_epochs: int = 0


def epoch_seed(seed: int, epoch: int) -> int:
    return int(nx.rng_stream(seed, f"epoch/{epoch}").integers(2**62))


def train_model(
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig,
    train_samples: Sequence[Sample],
    resume: TrainResult | None = None,
    on_epoch: Callable[[int, float, TrainResult], None] | None = None,
) -> TrainResult:
    """Run the full recipe: LLRD groups, cosine warmup, accumulation, focal loss.

    ``resume`` continues a previous run from its last completed epoch; with the
    same config the result is bit-identical to an uninterrupted run.
    ``on_epoch(epoch, mean_loss, result)`` fires after every completed epoch.
    """
    if resume is None:
        vocab = build_vocab(train_samples, encoder_cfg.vocab_size)
        model = build_model(encoder_cfg, cfg.pooling, cfg.attention_heads, cfg.seed)
        result = TrainResult(model, vocab, AdamState())
    else:
        result = resume
    model, vocab = result.model, result.vocab
    groups = build_llrd_groups(model.encoder, model.pooling, model.head, cfg)
    total = cfg.total_steps(len(train_samples))

    for epoch in range(result.completed_epochs, cfg.epochs):
        micro = make_batches(train_samples, vocab, cfg.micro_batch, cfg.max_seq_len, True, epoch_seed(cfg.seed, epoch))
        counter = iter(range(len(micro)))

        def loss_fn(batch):
            k = next(counter)
            rngs = (
                nx.rng_stream(cfg.seed, f"dropout/encoder/{epoch}/{k}"),
                nx.rng_stream(cfg.seed, f"dropout/head/{epoch}/{k}"),
            )
            logits = model.forward(batch.token_ids, batch.mask, True, rngs, cfg.dropout_rates)
            return focal_loss(logits, batch.labels, cfg.focal)

        losses = []
        for start in range(0, len(micro), cfg.grad_accum):
            mult = lr_at(result.state.step, total, cfg)
            loss = accumulate_and_step(micro[start : start + cfg.grad_accum], loss_fn, groups, result.state, cfg, mult)
            losses.append(loss)
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        result.completed_epochs = epoch + 1
        log.info("epoch %d: loss %.6f", epoch + 1, result.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, result.epoch_losses[-1], result)
    return result


def predict_samples(
    model: Classifier,
    vocab: Vocab,
    samples: Sequence[Sample],
    max_seq_len: int,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode labels and class probabilities, in input order."""
    labels, probs = [], []
    with nx.no_grad():
        for batch in make_batches(samples, vocab, batch_size, max_seq_len):
            y, p = predict(model.forward(batch.token_ids, batch.mask))
            labels.append(y)
            probs.append(p)
    return np.concatenate(labels), np.concatenate(probs)
