"""Synthetic corpus, span corruption and padded batches.

Token id layout: content symbols ``0..content_size-1``, then PAD, BOS, then the
sentinels. Sentinels never collide with content ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Vocab:
    content_size: int = 256
    num_sentinels: int = 16

    @property
    def pad(self) -> int:
        return self.content_size

    @property
    def bos(self) -> int:
        return self.content_size + 1

    @property
    def first_sentinel(self) -> int:
        return self.content_size + 2

    @property
    def size(self) -> int:
        return self.content_size + 2 + self.num_sentinels

    def sentinel(self, k: int) -> int:
        if not 0 <= k < self.num_sentinels:
            raise ValueError(f"sentinel index {k} outside [0, {self.num_sentinels})")
        return self.first_sentinel + k

    def is_sentinel(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return (ids >= self.first_sentinel) & (ids < self.size)


class SynthCorpus:
    """Seeded generator of token sequences with planted motifs.

    Each sequence mixes Zipf-distributed filler with copies of a fixed set of
    short motifs, so both unigram and within-motif structure are learnable.
    """

    def __init__(self, vocab: Vocab = Vocab(), seed: int = 0, num_motifs: int = 16,
                 motif_len: tuple[int, int] = (3, 6), motif_rate: float = 0.5):
        self.vocab = vocab
        self.seed = seed
        self.motif_rate = motif_rate
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        lo, hi = motif_len
        self.motifs = [rng.integers(0, vocab.content_size, size=int(rng.integers(lo, hi + 1)))
                       for _ in range(num_motifs)]
        ranks = np.arange(1, vocab.content_size + 1, dtype=np.float64)
        w = 1.0 / ranks
        self.unigram = w / w.sum()
        self.perm = rng.permutation(vocab.content_size)

    def sequence(self, length: int, rng: np.random.Generator, motif_ids=None) -> np.ndarray:
        out: list[int] = []
        while len(out) < length:
            if rng.random() < self.motif_rate:
                k = int(rng.integers(len(self.motifs))) if motif_ids is None \
                    else int(rng.choice(motif_ids))
                out.extend(int(v) for v in self.motifs[k])
            else:
                out.append(int(self.perm[rng.choice(self.vocab.content_size, p=self.unigram)]))
        return np.array(out[:length], dtype=np.int64)

    def sequences(self, n: int, length: int, rng: np.random.Generator) -> np.ndarray:
        return np.stack([self.sequence(length, rng) for _ in range(n)])


# -- span corruption ------------------------------------------------------

def apply_spans(sequence, spans: list[tuple[int, int]], vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Replace each ``(start, length)`` span by the next sentinel.

    Returns ``(inputs, targets)``; targets are sentinel-delimited removed spans.
    """
    seq = np.asarray(sequence)
    spans = sorted(spans)
    inputs: list[int] = []
    targets: list[int] = []
    cursor = 0
    for k, (start, n) in enumerate(spans):
        if start < cursor or n < 1 or start + n > len(seq):
            raise ValueError(f"span {(start, n)} overlaps or leaves the sequence")
        s = vocab.sentinel(k)
        inputs.extend(seq[cursor:start].tolist())
        inputs.append(s)
        targets.append(s)
        targets.extend(seq[start:start + n].tolist())
        cursor = start + n
    inputs.extend(seq[cursor:].tolist())
    return np.array(inputs, dtype=np.int64), np.array(targets, dtype=np.int64)


def sample_spans(length: int, mean_span: float, corrupt_fraction: float,
                 rng: np.random.Generator, max_spans: int) -> list[tuple[int, int]]:
    """Non-overlapping spans with geometric lengths covering ~``corrupt_fraction``."""
    budget = int(round(length * corrupt_fraction))
    if budget == 0:
        return []
    lengths: list[int] = []
    while sum(lengths) < budget:
        lengths.append(int(rng.geometric(1.0 / mean_span)))
    lengths[-1] -= sum(lengths) - budget
    lengths = [n for n in lengths if n > 0]
    # need a gap of at least one kept token between spans
    while len(lengths) > 1 and (len(lengths) > max_spans or
                                length - budget < len(lengths) - 1):
        a = lengths.pop()
        lengths[-1] += a
    if len(lengths) > max_spans:
        raise ValueError("not enough sentinels for the requested corruption")
    k = len(lengths)
    free = length - budget - (k - 1)
    if free < 0:
        raise ValueError("corruption leaves no room between spans")
    # distribute the free kept tokens over k+1 gaps uniformly at random
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans = []
    pos = 0
    for i, n in enumerate(lengths):
        pos += int(gaps[i]) + (1 if i > 0 else 0)
        spans.append((pos, n))
        pos += n
    return spans


def span_corrupt(sequence, rng: np.random.Generator, vocab: Vocab = Vocab(),
                 mean_span: float = 3.0, corrupt_fraction: float = 0.15
                 ) -> tuple[np.ndarray, np.ndarray]:
    seq = np.asarray(sequence)
    if len(seq) < 2:
        raise ValueError("span corruption needs a sequence of length >= 2")
    if not 0 <= corrupt_fraction < 1:
        raise ValueError(f"corrupt_fraction must be in [0, 1), got {corrupt_fraction}")
    if mean_span < 1:
        raise ValueError(f"mean_span must be >= 1, got {mean_span}")
    spans = sample_spans(len(seq), mean_span, corrupt_fraction, rng, vocab.num_sentinels)
    return apply_spans(seq, spans, vocab)


def uncorrupt(inputs, targets, vocab: Vocab) -> np.ndarray:
    """Splice target spans back in at their sentinels."""
    pieces: dict[int, list[int]] = {}
    current = None
    for tok in np.asarray(targets).tolist():
        if vocab.is_sentinel(tok):
            current = tok
            pieces[current] = []
        else:
            pieces[current].append(tok)
    out: list[int] = []
    for tok in np.asarray(inputs).tolist():
        out.extend(pieces[tok] if vocab.is_sentinel(tok) else [tok])
    return np.array(out, dtype=np.int64)


# -- batches --------------------------------------------------------------

@dataclass
class Batch:
    inputs: np.ndarray
    input_mask: np.ndarray
    decoder_inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def pad_batch(pairs: list[tuple[np.ndarray, np.ndarray]], vocab: Vocab, enc_len: int,
              dec_len: int) -> Batch:
    b = len(pairs)
    inputs = np.full((b, enc_len), vocab.pad, dtype=np.int64)
    targets = np.full((b, dec_len), vocab.pad, dtype=np.int64)
    for i, (inp, tgt) in enumerate(pairs):
        if len(inp) > enc_len or len(tgt) > dec_len:
            raise ValueError(f"example {i} ({len(inp)}, {len(tgt)}) exceeds ({enc_len}, {dec_len})")
        inputs[i, :len(inp)] = inp
        targets[i, :len(tgt)] = tgt
    dec_in = np.full_like(targets, vocab.pad)
    dec_in[:, 0] = vocab.bos
    dec_in[:, 1:] = targets[:, :-1]
    tmask = targets != vocab.pad
    return Batch(inputs, inputs != vocab.pad, dec_in, targets, tmask)


def dec_len_for(seq_len: int, corrupt_fraction: float) -> int:
    noise = int(round(seq_len * corrupt_fraction))
    # a sentinel per span plus the span tokens, rounded up to a multiple of 8
    return max(8, -(-2 * noise // 8) * 8)


def span_batch(corpus: SynthCorpus, batch_size: int, seq_len: int, rng: np.random.Generator,
               mean_span: float = 3.0, corrupt_fraction: float = 0.15,
               dec_len: int | None = None) -> Batch:
    dec_len = dec_len_for(seq_len, corrupt_fraction) if dec_len is None else dec_len
    pairs = []
    for _ in range(batch_size):
        seq = corpus.sequence(seq_len, rng)
        pairs.append(span_corrupt(seq, rng, corpus.vocab, mean_span, corrupt_fraction))
    return pad_batch(pairs, corpus.vocab, seq_len, dec_len)


# -- classification task for fine-tuning ----------------------------------

@dataclass
class ClassificationTask:
    """Label = which class's motifs appear in the sequence (plus label noise).

    Labels are emitted as a single decoder target token ``label_tokens[k]``.
    """

    inputs: np.ndarray
    labels: np.ndarray
    label_tokens: np.ndarray
    vocab: Vocab

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        pairs = [(self.inputs[i], np.array([self.label_tokens[self.labels[i]]])) for i in idx]
        return pad_batch(pairs, self.vocab, self.inputs.shape[1], 2)


def make_classification(corpus: SynthCorpus, n: int, seq_len: int, num_classes: int,
                        seed: int, label_noise: float = 0.0) -> ClassificationTask:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    motif_groups = np.array_split(np.arange(len(corpus.motifs)), num_classes)
    labels = rng.integers(0, num_classes, size=n)
    seqs = np.stack([corpus.sequence(seq_len, rng, motif_groups[k]) for k in labels])
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        labels = np.where(flip, rng.integers(0, num_classes, size=n), labels)
    label_tokens = np.arange(num_classes, dtype=np.int64)
    return ClassificationTask(seqs, labels, label_tokens, corpus.vocab)
