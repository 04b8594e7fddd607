"""Replay buffers that differ only in their eviction policy.

* ``FIFOBuffer``: evicts the globally oldest transition at capacity.
* ``ReservoirBuffer``: Algorithm R, a uniform sample of everything seen.
* ``LoFoBuffer``: evicts the oldest transition inside the embedding
  neighbourhood of the incoming one once that neighbourhood is full.

Transitions are stored column-wise in slot arrays that grow on demand, so a
4.5e6-capacity FIFO only allocates what it actually holds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numba
import numpy as np


class Transition(NamedTuple):
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    terminal: bool
    tick: int = -1
    embedding: np.ndarray | None = None


class TransitionBatch(NamedTuple):
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    ticks: np.ndarray


@dataclass(frozen=True)
class LofoParams:
    d_local: float
    n_local: int

    def __post_init__(self):
        if not self.d_local > 0:
            raise ValueError(f"D_local must be positive, got {self.d_local}")
        if int(self.n_local) != self.n_local or self.n_local < 1:
            raise ValueError(f"N_local must be an integer >= 1, got {self.n_local}")


@dataclass
class BufferStats:
    size: int
    inserts: int
    evictions: int
    bins: np.ndarray | None = None


@dataclass(frozen=True)
class GridSpec:
    """A 2-D binning of observations. ``project`` maps an observation batch
    to two coordinate arrays, which are then binned by the edge arrays."""

    x_edges: np.ndarray
    y_edges: np.ndarray
    project: Callable = field(compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.x_edges) - 1, len(self.y_edges) - 1

    def counts(self, obs) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.shape[0] == 0:
            return np.zeros(self.shape, dtype=np.int64)
        x, y = self.project(obs)
        h, _, _ = np.histogram2d(x, y, bins=(self.x_edges, self.y_edges))
        return h.astype(np.int64)


class _Columns:
    """Slot-addressed struct-of-arrays storage with geometric growth."""

    def __init__(self, obs_shape, obs_dtype, max_slots=None, initial=1024):
        self.obs_shape = tuple(obs_shape)
        self.obs_dtype = np.dtype(obs_dtype)
        self.max_slots = max_slots
        n = initial if max_slots is None else min(initial, max_slots)
        self._alloc(max(n, 1))

    def _alloc(self, n):
        self.obs = np.zeros((n,) + self.obs_shape, self.obs_dtype)
        self.next_obs = np.zeros((n,) + self.obs_shape, self.obs_dtype)
        self.action = np.zeros(n, np.int64)
        self.reward = np.zeros(n, np.float64)
        self.terminal = np.zeros(n, np.bool_)
        self.tick = np.full(n, -1, np.int64)

    @property
    def n_slots(self) -> int:
        return self.action.shape[0]

    def ensure(self, n):
        if n <= self.n_slots:
            return
        if self.max_slots is not None and n > self.max_slots:
            raise IndexError("slot beyond fixed capacity")
        new = max(n, 2 * self.n_slots)
        if self.max_slots is not None:
            new = min(new, self.max_slots)
        old = {k: getattr(self, k) for k in ("obs", "next_obs", "action", "reward", "terminal", "tick")}
        self._alloc(new)
        for k, arr in old.items():
            getattr(self, k)[:arr.shape[0]] = arr

    def write(self, slot, obs, action, reward, next_obs, terminal, tick):
        self.ensure(slot + 1)
        self.obs[slot] = obs
        self.next_obs[slot] = next_obs
        self.action[slot] = action
        self.reward[slot] = reward
        self.terminal[slot] = terminal
        self.tick[slot] = tick

    def read(self, slot, embedding=None) -> Transition:
        return Transition(self.obs[slot].copy(), int(self.action[slot]), float(self.reward[slot]),
                          self.next_obs[slot].copy(), bool(self.terminal[slot]),
                          int(self.tick[slot]), embedding)

    def gather(self, slots) -> TransitionBatch:
        return TransitionBatch(self.obs[slots], self.action[slots], self.reward[slots],
                               self.next_obs[slots], self.terminal[slots], self.tick[slots])


class ReplayBuffer:
    """Common interface. Subclasses decide which slot a new transition goes
    to and what, if anything, is evicted to make room."""

    kind = "base"

    def __init__(self, obs_shape, obs_dtype=np.float32, max_slots=None):
        self._cols = _Columns(obs_shape, obs_dtype, max_slots)
        self.inserts = 0
        self.evictions = 0

    def __len__(self) -> int:
        return self.inserts - self.evictions

    @property
    def obs_shape(self):
        return self._cols.obs_shape

    def insert(self, obs, action, reward, next_obs, terminal, embedding=None) -> Transition | None:
        raise NotImplementedError

    def insert_transition(self, t: Transition) -> Transition | None:
        return self.insert(t.obs, t.action, t.reward, t.next_obs, t.terminal, t.embedding)

    def _live_slots(self) -> np.ndarray:
        raise NotImplementedError

    def _slot_at(self, positions) -> np.ndarray:
        """Map uniform positions in ``[0, len)`` to storage slots."""
        raise NotImplementedError

    def sample(self, k, rng: np.random.Generator) -> TransitionBatch:
        """``k`` transitions drawn uniformly with replacement."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        positions = rng.integers(len(self), size=int(k))
        return self._cols.gather(self._slot_at(positions))

    def batch(self) -> TransitionBatch:
        """Every live transition, oldest first."""
        slots = self._live_slots()
        slots = slots[np.argsort(self._cols.tick[slots], kind="stable")]
        return self._cols.gather(slots)

    def observations(self) -> np.ndarray:
        return self._cols.obs[self._live_slots()]

    def ticks(self) -> np.ndarray:
        return np.sort(self._cols.tick[self._live_slots()])

    def stats(self, grid: GridSpec | None = None) -> BufferStats:
        bins = None if grid is None else grid.counts(self.observations())
        return BufferStats(len(self), self.inserts, self.evictions, bins)

    def dump_ndjson(self, path) -> Path:
        """One JSON record per live transition, oldest first."""
        path = Path(path)
        b = self.batch()
        with open(path, "w") as fh:
            for i in range(len(b.ticks)):
                fh.write(json.dumps({
                    "tick": int(b.ticks[i]), "obs": b.obs[i].tolist(), "action": int(b.actions[i]),
                    "reward": float(b.rewards[i]), "next_obs": b.next_obs[i].tolist(),
                    "terminal": bool(b.terminals[i]),
                }) + "\n")
        return path


class FIFOBuffer(ReplayBuffer):
    kind = "fifo"

    def __init__(self, capacity, obs_shape, obs_dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        super().__init__(obs_shape, obs_dtype, max_slots=int(capacity))
        self.capacity = int(capacity)

    def insert(self, obs, action, reward, next_obs, terminal, embedding=None):
        slot = self.inserts % self.capacity
        evicted = None
        if self.inserts >= self.capacity:
            evicted = self._cols.read(slot)
            self.evictions += 1
        self._cols.write(slot, obs, action, reward, next_obs, terminal, self.inserts)
        self.inserts += 1
        return evicted

    def _live_slots(self):
        return np.arange(len(self))

    def _slot_at(self, positions):
        return positions


class ReservoirBuffer(ReplayBuffer):
    """Algorithm R. When an incoming transition is not admitted it is
    reported back as the evicted item, so ``size == inserts - evictions``
    holds throughout."""

    kind = "reservoir"

    def __init__(self, capacity, obs_shape, obs_dtype=np.float32, rng=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        super().__init__(obs_shape, obs_dtype, max_slots=int(capacity))
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(rng)

    def insert(self, obs, action, reward, next_obs, terminal, embedding=None, rng=None):
        rng = self.rng if rng is None else rng
        tick = self.inserts
        self.inserts += 1
        if tick < self.capacity:
            self._cols.write(tick, obs, action, reward, next_obs, terminal, tick)
            return None
        j = int(rng.integers(self.inserts))
        self.evictions += 1
        if j >= self.capacity:
            return Transition(np.asarray(obs), int(action), float(reward),
                              np.asarray(next_obs), bool(terminal), tick, embedding)
        evicted = self._cols.read(j)
        self._cols.write(j, obs, action, reward, next_obs, terminal, tick)
        return evicted

    def _live_slots(self):
        return np.arange(len(self))

    def _slot_at(self, positions):
        return positions


@numba.njit(cache=True, nogil=True)
def _neighbours(emb, size, e, d_local):
    """Positions ``i < size`` with ``||e - emb[i]|| < d_local``."""
    out = np.empty(size, np.int64)
    n = 0
    for i in range(size):
        acc = 0.0
        for k in range(e.shape[0]):
            diff = e[k] - emb[i, k]
            acc += diff * diff
        if np.sqrt(acc) < d_local:
            out[n] = i
            n += 1
    return out[:n]


@numba.njit(cache=True, nogil=True)
def _lofo_extend(emb, ticks, slots, size, free, n_free, next_slot,
                 new_emb, new_ticks, d_local, n_local, new_slots, evicted_slots, evicted_ticks):
    """Insert ``new_emb`` rows one after another under the LoFo rule.

    Live entries sit compactly in positions ``[0, size)`` of ``emb``/``ticks``
    /``slots``; removal swaps the last entry into the hole. Storage slots are
    recycled through the ``free`` stack. Returns the updated
    ``(size, n_free, next_slot)``.
    """
    for j in range(new_emb.shape[0]):
        count = 0
        oldest = -1
        oldest_tick = np.iinfo(np.int64).max
        for i in range(size):
            acc = 0.0
            for k in range(new_emb.shape[1]):
                diff = new_emb[j, k] - emb[i, k]
                acc += diff * diff
            if np.sqrt(acc) < d_local:
                count += 1
                if ticks[i] < oldest_tick:
                    oldest_tick = ticks[i]
                    oldest = i
        evicted_slots[j] = -1
        evicted_ticks[j] = -1
        if count >= n_local:
            evicted_slots[j] = slots[oldest]
            evicted_ticks[j] = oldest_tick
            free[n_free] = slots[oldest]
            n_free += 1
            last = size - 1
            emb[oldest, :] = emb[last, :]
            ticks[oldest] = ticks[last]
            slots[oldest] = slots[last]
            size -= 1
        if n_free > 0:
            n_free -= 1
            slot = free[n_free]
        else:
            slot = next_slot
            next_slot += 1
        emb[size, :] = new_emb[j, :]
        ticks[size] = new_ticks[j]
        slots[size] = slot
        new_slots[j] = slot
        size += 1
    return size, n_free, next_slot


class LoFoBuffer(ReplayBuffer):
    """Local-forgetting buffer.

    On each insert, the neighbourhood ``K`` of the incoming embedding is found
    by a linear scan (``||e - e_i|| < D_local``, strict). If ``|K| >= N_local``
    exactly one transition, the oldest in ``K``, is evicted; the new one is
    then appended. Embeddings are cached alongside the transitions.
    """

    kind = "lofo"

    def __init__(self, params: LofoParams, embed_dim, obs_shape, obs_dtype=np.float32,
                 embed_dtype=np.float64):
        super().__init__(obs_shape, obs_dtype)
        self.params = params
        self.embed_dim = int(embed_dim)
        self._emb = np.zeros((1024, self.embed_dim), embed_dtype)
        self._ticks = np.zeros(1024, np.int64)
        self._slots = np.zeros(1024, np.int64)
        self._free = np.zeros(1024, np.int64)
        self._n_free = 0
        self._next_slot = 0

    def _grow(self, extra):
        need = len(self) + extra
        if need <= self._ticks.shape[0]:
            return
        n = max(need, 2 * self._ticks.shape[0])
        emb = np.zeros((n, self.embed_dim), self._emb.dtype)
        emb[:len(self)] = self._emb[:len(self)]
        self._emb = emb
        for name in ("_ticks", "_slots", "_free"):
            old = getattr(self, name)
            new = np.zeros(n, np.int64)
            new[:old.shape[0]] = old
            setattr(self, name, new)

    def _check_embeddings(self, e):
        e = np.asarray(e, dtype=self._emb.dtype)
        if e.ndim == 1:
            e = e[None, :]
        if e.ndim != 2 or e.shape[1] != self.embed_dim:
            raise ValueError(f"embedding width {e.shape[-1]} != {self.embed_dim}")
        return np.ascontiguousarray(e)

    def neighborhood(self, e) -> np.ndarray:
        """Ticks of stored transitions strictly within ``D_local`` of ``e``."""
        e = self._check_embeddings(e)[0]
        pos = _neighbours(self._emb, len(self), e, float(self.params.d_local))
        return np.sort(self._ticks[pos])

    def extend_embeddings(self, embeddings, payload=None) -> np.ndarray:
        """Insert a batch of transitions given their embeddings.

        ``payload`` (optional) is a tuple of per-row arrays ``(obs, action,
        reward, next_obs, terminal)``. Returns the evicted tick per row, or
        -1 where nothing was evicted. Equivalent to inserting row by row.
        """
        e = self._check_embeddings(embeddings)
        m = e.shape[0]
        self._grow(m)
        new_ticks = np.arange(self.inserts, self.inserts + m, dtype=np.int64)
        new_slots = np.empty(m, np.int64)
        ev_slots = np.empty(m, np.int64)
        ev_ticks = np.empty(m, np.int64)
        size, self._n_free, self._next_slot = _lofo_extend(
            self._emb, self._ticks, self._slots, len(self), self._free, self._n_free,
            self._next_slot, e, new_ticks, float(self.params.d_local), int(self.params.n_local),
            new_slots, ev_slots, ev_ticks)
        n_ev = int(np.count_nonzero(ev_ticks >= 0))
        self.inserts += m
        self.evictions += n_ev
        assert size == len(self)
        cols = self._cols
        cols.ensure(self._next_slot)
        if payload is None:
            cols.tick[new_slots] = new_ticks
        else:
            obs, action, reward, next_obs, terminal = payload
            # rows reuse slots freed earlier in the same batch, so write in order
            for j in range(m):
                cols.write(new_slots[j], obs[j], action[j], reward[j], next_obs[j], terminal[j],
                           new_ticks[j])
        return ev_ticks

    def insert(self, obs, action, reward, next_obs, terminal, embedding=None):
        if embedding is None:
            raise ValueError("LoFo insert needs the transition's embedding")
        e = self._check_embeddings(embedding)
        self._grow(1)
        new_slots = np.empty(1, np.int64)
        ev_slots = np.empty(1, np.int64)
        ev_ticks = np.empty(1, np.int64)
        evicted = None
        size, self._n_free, self._next_slot = _lofo_extend(
            self._emb, self._ticks, self._slots, len(self), self._free, self._n_free,
            self._next_slot, e, np.array([self.inserts], np.int64), float(self.params.d_local),
            int(self.params.n_local), new_slots, ev_slots, ev_ticks)
        if ev_ticks[0] >= 0:
            # the freed slot is the one the new transition is about to take
            evicted = self._cols.read(int(ev_slots[0]))
            self.evictions += 1
        self._cols.write(int(new_slots[0]), obs, action, reward, next_obs, terminal, self.inserts)
        self.inserts += 1
        assert size == len(self)
        return evicted

    def _live_slots(self):
        return self._slots[:len(self)].copy()

    def _slot_at(self, positions):
        return self._slots[positions]

    def embeddings(self) -> np.ndarray:
        """Cached embeddings of live transitions, oldest first."""
        order = np.argsort(self._ticks[:len(self)], kind="stable")
        return self._emb[:len(self)][order].copy()


def make_buffer(kind: str, obs_shape, obs_dtype=np.float32, capacity=None,
                lofo: LofoParams | None = None, embed_dim=None, rng=None) -> ReplayBuffer:
    if kind == "fifo":
        return FIFOBuffer(capacity, obs_shape, obs_dtype)
    if kind == "reservoir":
        return ReservoirBuffer(capacity, obs_shape, obs_dtype, rng)
    if kind == "lofo":
        if lofo is None or embed_dim is None:
            raise ValueError("a LoFo buffer needs LofoParams and an embedding width")
        return LoFoBuffer(lofo, embed_dim, obs_shape, obs_dtype)
    raise ValueError(f"unknown buffer kind {kind!r}")


# functional spellings
def fifo_insert(buffer: FIFOBuffer, t: Transition):
    return buffer.insert_transition(t)


def reservoir_insert(buffer: ReservoirBuffer, t: Transition, rng=None):
    return buffer.insert(t.obs, t.action, t.reward, t.next_obs, t.terminal, t.embedding, rng=rng)


def lofo_insert(buffer: LoFoBuffer, t: Transition):
    return buffer.insert_transition(t)


def neighborhood(buffer: LoFoBuffer, e) -> np.ndarray:
    return buffer.neighborhood(e)


def sample_batch(buffer: ReplayBuffer, k, rng) -> TransitionBatch:
    return buffer.sample(k, rng)


def write_histogram_csv(path, counts: np.ndarray) -> Path:
    """``bin_x,bin_y,count`` rows for every bin, including empty ones."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("bin_x,bin_y,count\n")
        for bx in range(counts.shape[0]):
            for by in range(counts.shape[1]):
                fh.write(f"{bx},{by},{int(counts[bx, by])}\n")
    return path


def export_histogram(buffer: ReplayBuffer, grid: GridSpec, path) -> Path:
    return write_histogram_csv(path, grid.counts(buffer.observations()))
