"""Posterior snapshot collection during training and test-time averaging.

A :class:`SampleBank` holds parameter snapshots stamped with the epoch
fraction at which they were taken. Collection follows a burn-in /
thinning schedule anchored to epoch fractions: the first snapshot lands
one full thinning interval past the burn-in boundary, and each further
snapshot one interval after its scheduled predecessor (so the number of
snapshots over E epochs is (E - burn_in) / thinning regardless of how
often the trainer checks). Test-time prediction averages per-sample
probabilities, never logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import FlatParams
from .numerics import ShapeError


@dataclass
class CollectionPolicy:
    burn_in_epochs: float = 0.0
    thinning_interval_epochs: float = 0.0  # 0 collects at every check past burn-in

    def __post_init__(self):
        if self.burn_in_epochs < 0 or self.thinning_interval_epochs < 0:
            raise ValueError("burn-in and thinning must be >= 0")


@dataclass
class AveragingStrategy:
    kind: str  # forward | backward | thinned
    S: int

    def __post_init__(self):
        if self.kind not in ("forward", "backward", "thinned"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.S < 1:
            raise ValueError("S must be >= 1")


class MemoryBankStore:
    """Keeps snapshots in RAM; fine for tests and small runs."""

    def __init__(self):
        self._snaps = []

    def append(self, values: np.ndarray, stamp: float = 0.0) -> int:
        self._snaps.append(values.copy())
        return len(self._snaps) - 1

    def load(self, handle: int) -> np.ndarray:
        return self._snaps[handle].copy()

    def __len__(self) -> int:
        return len(self._snaps)


class SampleBank:
    """Ordered posterior snapshots with epoch-fraction stamps."""

    def __init__(self, store=None):
        self.store = store if store is not None else MemoryBankStore()
        self.stamps: list = []
        self.handles: list = []
        self.intervals_done: int = 0  # thinning intervals already consumed
        self._last_checked: float = -math.inf
        self._size: Optional[int] = None

    def __len__(self) -> int:
        return len(self.handles)

    def append(self, stamp: float, values: np.ndarray) -> None:
        if self.stamps and stamp <= self.stamps[-1]:
            raise ValueError("snapshot stamps must be strictly increasing")
        if self._size is None:
            self._size = values.size
        elif values.size != self._size:
            raise ShapeError(f"snapshot size {values.size} != bank size {self._size}")
        self.handles.append(self.store.append(values, stamp))
        self.stamps.append(float(stamp))

    def load(self, i: int) -> np.ndarray:
        return self.store.load(self.handles[i])

    def load_all(self) -> list:
        return [self.load(i) for i in range(len(self))]

    # resumability: everything except the snapshots themselves
    def meta(self) -> dict:
        return {
            "stamps": list(self.stamps),
            "handles": list(self.handles),
            "intervals_done": self.intervals_done,
            "last_checked": self._last_checked if self._last_checked != -math.inf else None,
        }

    def restore_meta(self, meta: dict) -> None:
        self.stamps = list(meta["stamps"])
        self.handles = list(meta["handles"])
        self.intervals_done = int(meta["intervals_done"])
        lc = meta.get("last_checked")
        self._last_checked = -math.inf if lc is None else float(lc)
        if self.handles:
            self._size = self.load(0).size

    @classmethod
    def from_store(cls, store) -> "SampleBank":
        """Rebuild a read-only view of an existing bank directory or store."""
        bank = cls(store)
        bank.handles = list(range(len(store)))
        stamps = store.stamps() if hasattr(store, "stamps") else None
        bank.stamps = list(stamps) if stamps else [float(i + 1) for i in bank.handles]
        if bank.handles:
            bank._size = bank.load(0).size
        return bank


def maybe_collect(bank: SampleBank, policy: CollectionPolicy, epoch_fraction: float, theta) -> bool:
    """Snapshot theta if the schedule says so; returns True when collected.

    epoch_fraction must be nondecreasing across calls. A snapshot is due
    once epoch_fraction reaches burn_in + (k+1) * thinning for the next
    interval k; a check that jumps several intervals collects once and
    skips the missed ones.
    """
    if epoch_fraction < bank._last_checked:
        raise ValueError("epoch_fraction must be nondecreasing across calls")
    bank._last_checked = epoch_fraction
    values = theta.values if isinstance(theta, FlatParams) else np.asarray(theta)
    thin = policy.thinning_interval_epochs
    if thin == 0:
        if epoch_fraction >= policy.burn_in_epochs:
            bank.append(epoch_fraction, values)
            return True
        return False
    due = policy.burn_in_epochs + (bank.intervals_done + 1) * thin
    if epoch_fraction < due:
        return False
    bank.append(epoch_fraction, values)
    bank.intervals_done = int(math.floor((epoch_fraction - policy.burn_in_epochs) / thin + 1e-9))
    return True


def select(bank: SampleBank, strategy: AveragingStrategy) -> list:
    """Pick S snapshots: first S, last S, or evenly thinned across the bank.

    Thinned uses 1-based indices ceil(k * K / S) for k = 1..S.
    """
    K = len(bank)
    if K == 0:
        raise ValueError("empty sample bank")
    if strategy.S > K:
        raise ValueError(f"S={strategy.S} exceeds bank size {K}")
    S = strategy.S
    if strategy.kind == "forward":
        idx = list(range(S))
    elif strategy.kind == "backward":
        idx = list(range(K - S, K))
    else:
        idx = [int(math.ceil(k * K / S)) - 1 for k in range(1, S + 1)]
    return [bank.load(i) for i in idx]


def ensemble_predict(model, samples, inputs):
    """Average the per-sample predictive distributions (in probability space).

    model is used as a template: its parameters are swapped for each
    sample and restored afterwards. Returns (avg_probs, per_sample_probs)
    with per_sample_probs stacked on axis 0.
    """
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    saved = model.get_flat()
    per = []
    try:
        for s in samples:
            model.set_flat(s)
            out = model.predict_probs(inputs)
            probs = out[0] if isinstance(out, tuple) else out
            per.append(probs)
    finally:
        model.set_flat(saved)
    per_sample = np.stack(per, axis=0)
    return per_sample.mean(axis=0), per_sample


def map_predict(model, theta_map, inputs):
    """Single point-estimate prediction (the optimization baseline)."""
    saved = model.get_flat()
    try:
        model.set_flat(theta_map)
        out = model.predict_probs(inputs)
        return out[0] if isinstance(out, tuple) else out
    finally:
        model.set_flat(saved)


def predictive_stats(per_sample_probs: np.ndarray):
    """Mean and population standard deviation across samples (axis 0)."""
    arr = np.asarray(per_sample_probs)
    return arr.mean(axis=0), arr.std(axis=0, ddof=0)
