"""Sequence replay with local forgetting.

Two coupled stores:

* ``TrajectoryBuffer`` keeps every transition in arrival order, one slot per
  transition, tagged with its episode. A slot's reward becomes ``None`` once
  its state has been forgotten.
* ``StateBuffer`` holds the candidate start states for sequence sampling and
  is curated with the same local-forgetting rule as the flat buffer. Each
  entry points at its trajectory slot.

A slot whose state was forgotten stays in the trajectory buffer while some
live start state at most ``N - 1`` slots earlier in the same episode still
covers it. Once nothing covers it, it is removed. This keeps at most
``N`` slots per state-buffer entry and never leaves ``N`` consecutive
``None`` rewards.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np

from .replay import LofoParams, _neighbours


class SeqTransition(NamedTuple):
    obs: Any
    action: int
    reward: float
    episode: int
    embedding: Any


@dataclass
class Slot:
    obs: np.ndarray
    action: int
    reward: Optional[float]
    episode: int


@dataclass
class EvictionReport:
    slot: int
    evicted: list = field(default_factory=list)
    pruned: list = field(default_factory=list)


class MaskedSequence(NamedTuple):
    start: int
    slots: np.ndarray      # slot index per position, -1 past the end
    obs: np.ndarray        # zero-padded past the end
    actions: np.ndarray
    rewards: np.ndarray    # 0 where masked
    mask: np.ndarray       # True where the reward is a training target


class StateBuffer:
    """Start states for sequence sampling, curated by local forgetting.

    ``capacity`` optionally caps the number of entries. Past it, the oldest
    entry overall is forgotten.
    """

    def __init__(self, params: LofoParams, embed_dim, capacity=None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.params = params
        self.capacity = capacity
        self._emb = np.zeros((256, int(embed_dim)))
        self._ptr = np.zeros(256, np.int64)
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def embed_dim(self) -> int:
        return self._emb.shape[1]

    def pointers(self) -> np.ndarray:
        return np.sort(self._ptr[:self._size])

    def neighborhood(self, e) -> np.ndarray:
        e = np.ascontiguousarray(e, dtype=np.float64)
        pos = _neighbours(self._emb, self._size, e, float(self.params.d_local))
        return np.sort(self._ptr[pos])

    def _remove_at(self, pos) -> int:
        ptr = int(self._ptr[pos])
        last = self._size - 1
        self._emb[pos] = self._emb[last]
        self._ptr[pos] = self._ptr[last]
        self._size = last
        return ptr

    def add(self, e, pointer) -> list:
        """Insert an entry. Returns the pointers of forgotten entries."""
        e = np.ascontiguousarray(e, dtype=np.float64)
        if e.shape != (self.embed_dim,):
            raise ValueError(f"embedding shape {e.shape} != ({self.embed_dim},)")
        forgotten = []
        pos = _neighbours(self._emb, self._size, e, float(self.params.d_local))
        if pos.size >= self.params.n_local:
            forgotten.append(self._remove_at(int(pos[np.argmin(self._ptr[pos])])))
        if self._size == self._ptr.shape[0]:
            self._emb = np.concatenate([self._emb, np.zeros_like(self._emb)])
            self._ptr = np.concatenate([self._ptr, np.zeros_like(self._ptr)])
        self._emb[self._size] = e
        self._ptr[self._size] = pointer
        self._size += 1
        if self.capacity is not None and self._size > self.capacity:
            forgotten.append(self._remove_at(int(np.argmin(self._ptr[:self._size]))))
        return forgotten

    def sample_pointer(self, rng) -> int:
        if self._size == 0:
            raise ValueError("cannot sample from an empty state buffer")
        return int(self._ptr[rng.integers(self._size)])


class TrajectoryBuffer:
    """Transitions in arrival order, keyed by a global slot index."""

    def __init__(self, seq_len):
        if seq_len < 1:
            raise ValueError("sequence length must be positive")
        self.seq_len = int(seq_len)
        self.slots: dict[int, Slot] = {}
        self.next_slot = 0

    def __len__(self):
        return len(self.slots)

    def append(self, obs, action, reward, episode) -> int:
        i = self.next_slot
        self.slots[i] = Slot(np.asarray(obs), int(action), float(reward), int(episode))
        self.next_slot += 1
        return i

    def _valid(self, i, episode) -> bool:
        s = self.slots.get(i)
        return s is not None and s.episode == episode and s.reward is not None

    def covered(self, i) -> bool:
        """A live start state lies in the ``N`` slots ending at ``i``."""
        ep = self.slots[i].episode
        return any(self._valid(k, ep) for k in range(i, max(i - self.seq_len, -1), -1))

    def forget(self, i) -> list:
        """Mark slot ``i``'s reward as ``None`` and prune what that uncovers."""
        slot = self.slots[i]
        slot.reward = None
        return self._prune_range(i, i + self.seq_len, slot.episode)

    def _prune_range(self, lo, hi, episode) -> list:
        pruned = []
        for k in range(lo, hi):
            s = self.slots.get(k)
            if s is None or s.episode != episode:
                continue
            if s.reward is None and not self.covered(k):
                pruned.append(k)
        for k in pruned:
            del self.slots[k]
        return pruned


def prune(tb: TrajectoryBuffer, seq_len=None) -> list:
    """Remove every slot no live start state can reach. Returns removed slots."""
    n = tb.seq_len if seq_len is None else int(seq_len)
    saved, tb.seq_len = tb.seq_len, n
    try:
        dead = [i for i, s in tb.slots.items() if s.reward is None and not tb.covered(i)]
    finally:
        tb.seq_len = saved
    for i in dead:
        del tb.slots[i]
    return sorted(dead)


def seq_insert(sb: StateBuffer, tb: TrajectoryBuffer, tr: SeqTransition) -> EvictionReport:
    slot = tb.append(tr.obs, tr.action, tr.reward, tr.episode)
    report = EvictionReport(slot)
    for ptr in sb.add(tr.embedding, slot):
        report.evicted.append(ptr)
        report.pruned += tb.forget(ptr)
    return report


def sample_sequence(sb: StateBuffer, tb: TrajectoryBuffer, rng, seq_len=None) -> MaskedSequence:
    """Uniform start from the state buffer, then up to ``N`` slots forward.

    The sequence stops early at the end of the start's episode, and the
    rest is zero-padded with a false mask.
    """
    n = tb.seq_len if seq_len is None else int(seq_len)
    start = sb.sample_pointer(rng)
    first = tb.slots[start]
    slots = np.full(n, -1, np.int64)
    obs = np.zeros((n,) + first.obs.shape, first.obs.dtype)
    actions = np.zeros(n, np.int64)
    rewards = np.zeros(n)
    mask = np.zeros(n, bool)
    for j in range(n):
        s = tb.slots.get(start + j)
        if s is None or s.episode != first.episode:
            break
        slots[j], obs[j], actions[j] = start + j, s.obs, s.action
        if s.reward is not None:
            rewards[j], mask[j] = s.reward, True
    return MaskedSequence(start, slots, obs, actions, rewards, mask)


def masked_reward_loss(predicted, seq: MaskedSequence):
    """Squared reward error over unmasked positions, and its gradient.

    Masked positions contribute nothing to either.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    diff = np.where(seq.mask, predicted - seq.rewards, 0.0)
    n = max(int(seq.mask.sum()), 1)
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


def dump_ndjson(tb: TrajectoryBuffer, path, sb: StateBuffer | None = None) -> Path:
    """One line per live slot, oldest first. Forgotten rewards are ``null``."""
    starts = set(sb.pointers().tolist()) if sb is not None else set()
    path = Path(path)
    with path.open("w") as fh:
        for i in sorted(tb.slots):
            s = tb.slots[i]
            fh.write(json.dumps({"slot": i, "episode": s.episode, "action": s.action,
                                 "reward": s.reward, "start": i in starts}) + "\n")
    return path
