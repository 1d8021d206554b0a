"""Mini-batch pseudo-replay: every optimizer batch mixes current and replay data at a fixed ratio."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class EpochEnd(Exception):
    """The current-data stream has no unseen samples left in this epoch."""


@dataclass(frozen=True)
class BatchPlan:
    s_d: int  # current-data items per batch
    s_r: int  # replay items per batch

    @property
    def batch_size(self) -> int:
        return self.s_d + self.s_r


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def compute_ratio(n_current: int, n_replay: int, batch_size: int = 16) -> BatchPlan:
    """Split ``batch_size`` proportionally to the current and replay set sizes.

    The replay share is rounded half away from zero and clamped to
    ``[1, batch_size - 1]`` whenever replay data exists.

    >>> compute_ratio(400, 40, 16)
    BatchPlan(s_d=15, s_r=1)
    """
    if n_current < 1:
        raise ValueError("n_current must be >= 1")
    if n_replay < 0:
        raise ValueError("n_replay must be >= 0")
    if n_replay == 0:
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return BatchPlan(batch_size, 0)
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 when replay data is present")
    s_r = _round_half_away(batch_size * n_replay / (n_replay + n_current))
    s_r = min(max(s_r, 1), batch_size - 1)
    return BatchPlan(batch_size - s_r, s_r)


class CurrentStream:
    """Shuffled draws without replacement, reshuffled every epoch.

    The last batch of an epoch is topped up by wrapping around to the start
    of the same epoch's order, and flagged as padded.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("current stream needs at least one sample")
        self.n = n
        self.rng = rng
        self.epoch = -1
        self.start_epoch()

    def start_epoch(self) -> None:
        self.order = self.rng.permutation(self.n)
        self.pos = 0
        self.epoch += 1

    def draw(self, k: int) -> tuple[np.ndarray, bool]:
        if self.pos >= self.n:
            raise EpochEnd
        idx = self.order[self.pos : self.pos + k]
        self.pos += k
        padded = len(idx) < k
        if padded:
            idx = np.concatenate([idx, np.resize(self.order, k - len(idx))])
        return idx, padded


class ReplayStream:
    """Uniform draws with replacement from a small replay set."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng

    def draw(self, k: int) -> np.ndarray:
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        if self.n == 0:
            raise ValueError("cannot draw from an empty replay set")
        return self.rng.integers(0, self.n, size=k)


@dataclass
class TrainBatch:
    images: np.ndarray  # B x H x W x 3
    masks: np.ndarray  # B x H x W
    from_replay: np.ndarray  # B bools, current items first
    ids: list[str]
    padded: bool = False

    @property
    def n_replay(self) -> int:
        return int(self.from_replay.sum())


def next_batch(current: CurrentStream, replay: ReplayStream | None, plan: BatchPlan,
               current_items: Sequence, replay_items: Sequence = ()) -> TrainBatch:
    """Draw ``plan.s_d`` current and ``plan.s_r`` replay items and concatenate them.

    Items need ``id``, ``image`` and ``mask`` attributes. Raises
    :class:`EpochEnd` once the current epoch is exhausted.
    """
    if plan.s_r > 0 and (replay is None or replay.n == 0):
        raise ValueError("plan requires replay items but the replay set is empty")
    cur_idx, padded = current.draw(plan.s_d)
    rep_idx = replay.draw(plan.s_r) if plan.s_r else np.zeros(0, dtype=np.int64)
    chosen = [current_items[i] for i in cur_idx] + [replay_items[i] for i in rep_idx]
    return TrainBatch(
        images=np.stack([it.image for it in chosen]).astype(np.float32),
        masks=np.stack([it.mask for it in chosen]).astype(np.int64),
        from_replay=np.array([False] * len(cur_idx) + [True] * len(rep_idx)),
        ids=[it.id for it in chosen],
        padded=padded,
    )


def iter_epoch(current: CurrentStream, replay: ReplayStream | None, plan: BatchPlan,
               current_items: Sequence, replay_items: Sequence = ()) -> Iterator[TrainBatch]:
    """All batches of one epoch; the stream is reshuffled afterwards."""
    try:
        while True:
            yield next_batch(current, replay, plan, current_items, replay_items)
    except EpochEnd:
        current.start_epoch()
