"""Samples, tokenization, dynamic-padding batches, synthetic corpora, stats."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import rng_stream

HUMAN, MACHINE = 0, 1
LABEL_NAMES = {HUMAN: "human", MACHINE: "machine"}
LABEL_IDS = {v: k for k, v in LABEL_NAMES.items()}

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    label: int

    def __post_init__(self):
        if self.label not in LABEL_NAMES:
            raise DatasetError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")

    @property
    def word_count(self) -> int:
        return len(self.text.split())

    @property
    def char_count(self) -> int:
        return len(self.text)

    def to_record(self) -> dict:
        return {"id": self.id, "text": self.text, "label": LABEL_NAMES[self.label]}


def write_jsonl(samples: Iterable[Sample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[Sample]:
    try:
        # split on "\n" only: str.splitlines would also break on U+2028 etc., which JSON leaves raw
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            label = rec["label"]
            if label not in LABEL_IDS:
                raise DatasetError(f"{path}:{lineno}: label must be 'human' or 'machine', got {label!r}")
            samples.append(Sample(str(rec["id"]), rec["text"], LABEL_IDS[label]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return samples


# ---------------------------------------------------------------------------
# vocabulary and batching


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("vocab must start with PAD and UNK")
        self.index = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index


def build_vocab(corpus: Iterable, vocab_size: int) -> Vocab:
    """Keep the ``vocab_size - 2`` most frequent words; ties go lexicographically."""
    if vocab_size < 3:
        raise ValueError("vocab_size must be at least 3")
    counts: Counter[str] = Counter()
    n = 0
    for item in corpus:
        counts.update(words(item.text if isinstance(item, Sample) else item))
        n += 1
    if n == 0:
        raise DatasetError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([PAD, UNK] + [w for w, _ in ranked[: vocab_size - 2]])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    ids = [vocab.index.get(w, UNK_ID) for w in words(text)]
    return ids or [UNK_ID]


@dataclass
class Batch:
    token_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def pad_batch(sequences: Sequence[Sequence[int]], labels, sample_ids, max_seq_len: int) -> Batch:
    seqs = [list(s[:max_seq_len]) for s in sequences]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return Batch(ids, mask, np.asarray(labels, dtype=np.int64), list(sample_ids))


def make_batches(
    samples: Sequence[Sample],
    vocab: Vocab,
    micro_batch: int,
    max_seq_len: int,
    shuffle: bool = False,
    seed: int = 0,
) -> list[Batch]:
    """Head-truncate to ``max_seq_len``; pad each batch to its own longest row."""
    if not samples:
        raise DatasetError("make_batches needs at least one sample")
    order = np.arange(len(samples))
    if shuffle:
        order = rng_stream(seed, "shuffle").permutation(len(samples))
    batches = []
    for start in range(0, len(order), micro_batch):
        chunk = [samples[i] for i in order[start : start + micro_batch]]
        batches.append(
            pad_batch(
                [tokenize(s.text, vocab) for s in chunk],
                [s.label for s in chunk],
                [s.id for s in chunk],
                max_seq_len,
            )
        )
    return batches


# ---------------------------------------------------------------------------
# synthetic corpus

_ONSETS = "b d f g k l m n p r s t v z sh".split()
_VOWELS = "a e i o u".split()
_SYLLABLES = [c + v for c in _ONSETS for v in _VOWELS]  # 75


def lexicon(size: int = 5000) -> list[str]:
    """Deterministic pseudo-words; the most frequent ranks get one syllable."""
    n = len(_SYLLABLES)
    if size > n + n * n:
        raise ValueError(f"lexicon size is capped at {n + n * n}")
    out = list(_SYLLABLES[:size])
    for q in range(max(0, size - n)):
        out.append(_SYLLABLES[q // n] + _SYLLABLES[q % n])
    return out


@dataclass(frozen=True)
class GenConfig:
    lexicon_size: int = 5000
    human_mean_words: float = 63.0
    machine_mean_words: float = 30.0
    length_sigma: float = 0.35
    human_zipf: float = 1.1
    machine_zipf: float = 1.4
    template_fraction: float = 0.30
    burst_prob: float = 0.25
    rare_rank: int = 1000


def _zipf_probs(size: int, s: float) -> np.ndarray:
    w = np.arange(1, size + 1, dtype=float) ** -s
    return w / w.sum()


def _lognormal_length(rng, mean: float, sigma: float) -> int:
    mu = math.log(mean) - 0.5 * sigma * sigma
    return max(1, int(round(rng.lognormal(mu, sigma))))


def generate_synthetic_corpus(n_per_class: int, gen: GenConfig = GenConfig(), seed: int = 0) -> list[Sample]:
    """Two-class corpus: long, higher-entropy "human" texts with rare-word bursts
    and short, lower-entropy "machine" texts, some built from repeated 3-grams.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    lex = np.array(lexicon(gen.lexicon_size))
    p_human = _zipf_probs(gen.lexicon_size, gen.human_zipf)
    p_machine = _zipf_probs(gen.lexicon_size, gen.machine_zipf)
    rng_h = rng_stream(seed, "corpus/human")
    rng_m = rng_stream(seed, "corpus/machine")

    samples = []
    for i in range(n_per_class):
        n = _lognormal_length(rng_h, gen.human_mean_words, gen.length_sigma)
        ranks = rng_h.choice(gen.lexicon_size, size=n, p=p_human)
        if rng_h.random() < gen.burst_prob:
            rare = rng_h.integers(gen.rare_rank, gen.lexicon_size)
            k = min(n, int(rng_h.integers(2, 5)))
            ranks[rng_h.choice(n, size=k, replace=False)] = rare
        samples.append(Sample(f"syn-h-{i:05d}", " ".join(lex[ranks]), HUMAN))

    for i in range(n_per_class):
        n = _lognormal_length(rng_m, gen.machine_mean_words, gen.length_sigma)
        if rng_m.random() < gen.template_fraction:
            templates = rng_m.choice(gen.lexicon_size, size=(int(rng_m.integers(2, 4)), 3), p=p_machine)
            picks = rng_m.integers(0, len(templates), size=math.ceil(n / 3))
            ranks = templates[picks].reshape(-1)[:n]
        else:
            ranks = rng_m.choice(gen.lexicon_size, size=n, p=p_machine)
        samples.append(Sample(f"syn-m-{i:05d}", " ".join(lex[ranks]), MACHINE))

    order = rng_stream(seed, "corpus/order").permutation(len(samples))
    return [samples[i] for i in order]


def split_corpus(samples: Sequence[Sample], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[list[Sample]]:
    """Class-stratified seeded split into len(fractions) parts."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    parts: list[list[Sample]] = [[] for _ in fractions]
    for label in (HUMAN, MACHINE):
        members = [s for s in samples if s.label == label]
        order = rng_stream(seed, f"split/{label}").permutation(len(members))
        bounds = np.round(np.cumsum(fractions) * len(members)).astype(int)
        start = 0
        for part, stop in zip(parts, bounds):
            part.extend(members[i] for i in order[start:stop])
            start = stop
    for k, part in enumerate(parts):
        order = rng_stream(seed, f"split/mix{k}").permutation(len(part))
        parts[k] = [part[i] for i in order]
    return parts


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ClassStats:
    count: int
    avg_words: float | None
    avg_chars: float | None
    max_words: int | None


@dataclass(frozen=True)
class CorpusStats:
    human: ClassStats
    machine: ClassStats

    def by_label(self, label: int) -> ClassStats:
        return self.human if label == HUMAN else self.machine

    def to_dict(self) -> dict:
        return {
            name: {
                "samples": st.count,
                "avg_words": st.avg_words,
                "avg_chars": st.avg_chars,
                "max_words": st.max_words,
            }
            for name, st in (("human", self.human), ("machine", self.machine))
        }


def corpus_stats(samples: Sequence[Sample]) -> CorpusStats:
    if not samples:
        raise DatasetError("corpus_stats needs at least one sample")
    per = {}
    for label in (HUMAN, MACHINE):
        wc = [s.word_count for s in samples if s.label == label]
        cc = [s.char_count for s in samples if s.label == label]
        if wc:
            per[label] = ClassStats(len(wc), sum(wc) / len(wc), sum(cc) / len(cc), max(wc))
        else:
            per[label] = ClassStats(0, None, None, None)
    return CorpusStats(per[HUMAN], per[MACHINE])


def length_controlled_eval_set(samples: Sequence[Sample], band: tuple[float, float]) -> list[Sample]:
    """Samples whose word count lies in the inclusive band; both classes required."""
    lo, hi = band
    subset = [s for s in samples if lo <= s.word_count <= hi]
    for label, name in LABEL_NAMES.items():
        if not any(s.label == label for s in subset):
            raise DatasetError(f"length band [{lo}, {hi}] contains no {name} samples")
    return subset
