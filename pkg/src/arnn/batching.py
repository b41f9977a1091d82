"""Session-parallel mini-batches with in-batch negative items.

Each of B lanes walks one session a step at a time; a batch pairs every
active lane's previous item with its next item.  When a lane's session runs
out it loads the next unstarted session (flagging a boundary so the
recurrent state gets reset) and goes inactive once none remain.  The other
active lanes' target items double as the negative samples, minus any that
collide with a lane's own target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SessionDataset
from .errors import ConfigError, LaneError


@dataclass
class MiniBatch:
    prev_items: np.ndarray        # int [B]
    target_items: np.ndarray      # int [B]
    contexts: list                # sparse position tuple per lane
    session_boundary: np.ndarray  # bool [B]; True = lane starts a new session
    active: np.ndarray            # bool [B]

    @property
    def n_lanes(self) -> int:
        return len(self.prev_items)


def negatives_for(batch: MiniBatch, lane: int) -> np.ndarray:
    """Other active lanes' targets, minus collisions with this lane's target."""
    if not batch.active[lane]:
        raise LaneError(f"lane {lane} is inactive")
    own = batch.target_items[lane]
    keep = batch.active.copy()
    keep[lane] = False
    keep &= batch.target_items != own
    return np.unique(batch.target_items[keep])


class SessionParallelIterator:
    """One epoch of session-parallel batches over a dataset.

    Session-to-lane assignment follows ``order`` (pass a permutation for a
    shuffled epoch); with a fixed order the batch stream is deterministic.
    """

    def __init__(self, dataset: SessionDataset, batch_lanes: int,
                 order: np.ndarray | None = None):
        if batch_lanes < 2:
            raise ConfigError(f"batch_lanes must be at least 2, got {batch_lanes}")
        self.dataset = dataset
        self.lanes = batch_lanes
        n = len(dataset.sessions)
        self.order = np.arange(n) if order is None else np.asarray(order)
        self._next = 0
        self._lane_session = [-1] * batch_lanes  # index into order
        self._lane_pos = [0] * batch_lanes
        self._lane_fresh = [False] * batch_lanes
        for lane in range(batch_lanes):
            self._load_next(lane)

    def _load_next(self, lane: int) -> None:
        if self._next < len(self.order):
            self._lane_session[lane] = int(self.order[self._next])
            self._lane_pos[lane] = 0
            self._lane_fresh[lane] = True
            self._next += 1
        else:
            self._lane_session[lane] = -1

    def __iter__(self):
        return self

    def __next__(self) -> MiniBatch:
        b = self.lanes
        if all(s < 0 for s in self._lane_session):
            raise StopIteration
        prev = np.zeros(b, dtype=np.int64)
        target = np.zeros(b, dtype=np.int64)
        contexts: list = [()] * b
        boundary = np.zeros(b, dtype=bool)
        active = np.zeros(b, dtype=bool)
        for lane in range(b):
            si = self._lane_session[lane]
            if si < 0:
                continue
            steps = self.dataset.sessions[si].steps
            pos = self._lane_pos[lane]
            ctx, prev_item = steps[pos]
            _, target_item = steps[pos + 1]
            prev[lane] = prev_item
            target[lane] = target_item
            contexts[lane] = ctx
            boundary[lane] = self._lane_fresh[lane]
            active[lane] = True
            self._lane_fresh[lane] = False
            if pos + 2 >= len(steps):
                self._load_next(lane)
            else:
                self._lane_pos[lane] = pos + 1
        return MiniBatch(prev, target, contexts, boundary, active)
