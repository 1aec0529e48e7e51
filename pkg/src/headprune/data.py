"""Synthetic tasks: needle counting (classification) and sequence reversal (seq2seq)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GenerationError

NEEDLE = 0  # the designated token


@dataclass
class Dataset:
    """Parallel arrays ``x`` (inputs) and ``y`` (labels or target sequences)."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x[idx], self.y[idx]

    def batches(self, size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), size):
            yield self.batch(order[start : start + size])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return Dataset(self.x[:n_first], self.y[:n_first]), Dataset(self.x[n_first:], self.y[n_first:])


def _check(vocab: int, length: int, size: int) -> None:
    if vocab < 4 or length < 4:
        raise DomainError("need vocab >= 4 and length >= 4")
    if size < 1:
        raise DomainError("dataset size must be positive")


def needle_label(seq) -> int:
    return int(np.count_nonzero(np.asarray(seq) == NEEDLE) >= 2)


def gen_needle_data(seed: int, size: int, vocab: int, length: int, max_draws: int = 200) -> Dataset:
    """Sequences labelled 1 iff token ``NEEDLE`` occurs at least twice; classes exactly balanced.

    Positives are drawn with the needle planted at a random count in [2, length/2]
    and negatives with a count in {0, 1}, so neither class is rare for any vocab.
    Balance is enforced by quota; ``max_draws`` batches of rejections before giving up.
    """
    _check(vocab, length, size)
    rng = np.random.default_rng(seed)
    quota = {0: size // 2, 1: size - size // 2}
    rows: dict[int, list[np.ndarray]] = {0: [], 1: []}
    for _ in range(max_draws):
        seqs = rng.integers(1, vocab, size=(size, length))
        counts = np.where(rng.random(size) < 0.5, rng.integers(0, 2, size), rng.integers(2, length // 2 + 1, size))
        for seq, c in zip(seqs, counts):
            seq[rng.permutation(length)[:c]] = NEEDLE
            lab = needle_label(seq)
            if len(rows[lab]) < quota[lab]:
                rows[lab].append(seq)
        if all(len(rows[k]) == quota[k] for k in quota):
            break
    else:
        raise GenerationError("could not fill balanced class quotas")
    x = np.array(rows[0] + rows[1], dtype=np.int64)
    y = np.array([0] * quota[0] + [1] * quota[1], dtype=np.int64)
    order = rng.permutation(size)
    return Dataset(x[order], y[order])


def gen_reversal_data(seed: int, size: int, vocab: int, length: int) -> Dataset:
    """Uniform random sources; the target is the source reversed."""
    _check(vocab, length, size)
    rng = np.random.default_rng(seed)
    src = rng.integers(0, vocab, size=(size, length), dtype=np.int64)
    return Dataset(src, src[:, ::-1].copy())


def token_accuracy(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    return float(np.mean(pred == target))
