"""Corpus ingestion, vocabularies, and minibatch planning.

Language-model corpora are flat token-id streams; classification corpora
are labelled sentences. Two batch schedules exist: successive minibatches
reshape the stream into ``minibatch_size`` parallel substreams and walk
them in time order (hidden state carries between consecutive batches),
while random minibatches shuffle fixed-length windows and reset state to
zero for each batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .numerics import SeededRng

START_TOKEN = "<s>"
END_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (START_TOKEN, END_TOKEN, UNK_TOKEN)


class Vocab:
    """Dense token <-> id maps with reserved START/END/UNK entries at ids 0..2."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def start_id(self) -> int:
        return 0

    @property
    def end_id(self) -> int:
        return 1

    @property
    def unk_id(self) -> int:
        return 2

    def encode(self, tokens) -> np.ndarray:
        unk = self.unk_id
        return np.asarray([self.token_to_id.get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self.id_to_token[int(i)] for i in ids]

    def to_json(self) -> list:
        return list(self.id_to_token)

    @classmethod
    def from_json(cls, token_list) -> "Vocab":
        vocab = cls([])
        vocab.id_to_token = list(token_list)
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        return vocab


def build_vocab(tokens, max_size: int = 0, min_count: int = 1) -> Vocab:
    """Keep the most frequent tokens (ties broken lexicographically); rest map to UNK.

    max_size counts kept non-reserved tokens; 0 means unlimited.
    """
    counts: dict = {}
    for t in tokens:
        counts[t] = counts.get(t, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_count]
    if max_size > 0:
        kept = kept[:max_size]
    return Vocab(kept)


def tokenize_chars(text: str) -> list:
    return list(text)


def tokenize_words(text: str) -> list:
    return text.split()


@dataclass
class StreamCorpus:
    """Token-id stream for language modelling."""

    split: str
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class SentenceCorpus:
    """Labelled sentences for classification; tokens stay raw until a vocab exists."""

    split: str
    examples: list  # (label_id, token list) pairs
    labels: list  # label names, index == label id

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.examples)

    def encoded(self, vocab: Vocab) -> list:
        return [(label, vocab.encode(toks)) for label, toks in self.examples]


@dataclass
class BatchPlan:
    """How to cut a stream into minibatches."""

    mode: str  # successive | random
    minibatch_size: int
    unroll_length: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("successive", "random"):
            raise ValueError(f"unknown batch mode {self.mode!r}")
        if self.minibatch_size < 1 or self.unroll_length < 1:
            raise ValueError("minibatch_size and unroll_length must be >= 1")


@dataclass
class Batch:
    inputs: np.ndarray  # (B, U) token ids
    targets: np.ndarray  # (B, U) next-token ids
    reset_state: bool  # zero the hidden state before this batch


@dataclass
class SuccessivePlan:
    """Time-contiguous batches over parallel substreams; state carries across batches."""

    batches: list
    dropped_tokens: int
    tokens_per_batch: int

    def epoch_batches(self, rng: Optional[SeededRng] = None) -> list:
        return self.batches


@dataclass
class RandomPlan:
    """Shuffled fixed-length windows; every window appears once per epoch."""

    inputs: np.ndarray  # (num_windows, U)
    targets: np.ndarray  # (num_windows, U)
    minibatch_size: int
    dropped_tokens: int

    @property
    def num_windows(self) -> int:
        return self.inputs.shape[0]

    def epoch_batches(self, rng: SeededRng) -> list:
        order = rng.permutation(self.num_windows)
        B = self.minibatch_size
        out = []
        for start in range(0, self.num_windows, B):
            sel = order[start : start + B]
            out.append(Batch(inputs=self.inputs[sel], targets=self.targets[sel], reset_state=True))
        return out


def plan_successive(corpus: StreamCorpus, plan: BatchPlan) -> SuccessivePlan:
    """Reshape the stream into minibatch_size parallel substreams.

    Batch k covers columns [k*U, (k+1)*U) of every substream; trailing
    remainder tokens are dropped. Targets are the stream shifted by one;
    the final position of each substream predicts the next substream's
    first token (a deliberate wrap at stream seams, standard for this
    reshaping).
    """
    ids = corpus.ids
    B, U = plan.minibatch_size, plan.unroll_length
    L = len(ids) // B
    nb = L // U
    if nb < 1:
        raise ValueError(f"corpus too small: {len(ids)} tokens for batch {B} x unroll {U}")
    used = ids[: B * L]
    streams = used.reshape(B, L)
    shifted = np.roll(used, -1).reshape(B, L)
    batches = [
        Batch(
            inputs=streams[:, k * U : (k + 1) * U],
            targets=shifted[:, k * U : (k + 1) * U],
            reset_state=(k == 0),
        )
        for k in range(nb)
    ]
    return SuccessivePlan(batches=batches, dropped_tokens=len(ids) - B * U * nb, tokens_per_batch=B * U)


def plan_random(corpus: StreamCorpus, plan: BatchPlan) -> RandomPlan:
    """Cut the stream into disjoint windows of unroll_length + 1 tokens.

    Each window yields (inputs=w[:-1], targets=w[1:]); shuffling happens
    per epoch via epoch_batches(rng). Remainder tokens beyond the last
    full window are dropped.
    """
    ids = corpus.ids
    U = plan.unroll_length
    W = len(ids) // (U + 1)
    if W < 1:
        raise ValueError(f"corpus too small: {len(ids)} tokens for windows of {U + 1}")
    windows = ids[: W * (U + 1)].reshape(W, U + 1)
    return RandomPlan(
        inputs=windows[:, :-1],
        targets=windows[:, 1:],
        minibatch_size=plan.minibatch_size,
        dropped_tokens=len(ids) - W * (U + 1),
    )


def load_classification_tsv(path, split: str = "train") -> SentenceCorpus:
    """Parse "label<TAB>sentence" lines; label ids follow sorted label order."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[0] or not parts[1].strip():
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>sentence'")
            label, sentence = parts
            tokens = tokenize_words(sentence)
            rows.append((label, tokens))
    labels = sorted({label for label, _ in rows})
    label_ids = {name: i for i, name in enumerate(labels)}
    examples = [(label_ids[label], tokens) for label, tokens in rows]
    return SentenceCorpus(split=split, examples=examples, labels=labels)


def kfold_indices(n: int, k: int, rng: SeededRng) -> list:
    """k disjoint shuffled folds covering range(n); sizes differ by at most one."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= folds <= items, got k={k}, n={n}")
    perm = rng.permutation(n)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


def split_stream(ids: np.ndarray, fractions) -> tuple:
    """Split one stream into train/valid/test by fractions summing to ~1."""
    f = [float(x) for x in fractions]
    if len(f) != 3 or any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-6:
        raise ValueError("split fractions must be three positives summing to 1")
    n = len(ids)
    a = int(n * f[0])
    b = a + int(n * f[1])
    return ids[:a], ids[a:b], ids[b:]
