"""MiniGridLoCA: an 8x8 open grid with a 2x2 one-way zone around the
top-left target (T1) and a second target in the bottom-right corner (T2).

Actions follow MiniGrid numbering: 0 turn left, 1 turn right, 2 forward.
Directions: 0 north, 1 east, 2 south, 3 west.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .base import TASK_REWARDS, LocaEnv, Phase, ResetMode, StepOutcome

TURN_LEFT, TURN_RIGHT, FORWARD = 0, 1, 2
# (dcol, drow) per direction
DIR_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))
CELL_PX = 3

_TRIANGLE_N = np.array([[0, 1, 0],
                        [0, 1, 0],
                        [1, 1, 1]], dtype=float)
# rot90 is counter-clockwise; east = north rotated clockwise once
_TRIANGLES = [np.rot90(_TRIANGLE_N, k=-d) for d in range(4)]


class GridState(NamedTuple):
    col: int
    row: int
    dir: int


class MiniGridLoCA(LocaEnv):
    n_actions = 3
    max_steps = 100
    gamma = 0.99
    name = "minigrid"

    def __init__(self, phase: Phase = Phase.A, size: int = 8, zone: int = 2,
                 encoding: str = "onehot", rewards: dict | None = None):
        super().__init__(phase, rewards)
        if encoding not in ("onehot", "coarse-image"):
            raise ValueError(f"unknown encoding {encoding!r}")
        self.size = size
        self.zone = zone
        self.encoding = encoding
        self.t1 = (0, 0)
        self.t2 = (size - 1, size - 1)

    @property
    def n_states(self) -> int:
        return self.size * self.size * 4

    @property
    def obs_dim(self) -> int:
        if self.encoding == "onehot":
            return self.n_states
        return 3 * (self.size * CELL_PX) ** 2

    # geometry
    def in_t1_zone(self, state: GridState) -> bool:
        return state.col < self.zone and state.row < self.zone

    def is_terminal_cell(self, col: int, row: int) -> bool:
        return (col, row) == self.t1 or (col, row) == self.t2

    def all_states(self) -> list[GridState]:
        """Every state in encoding order."""
        return [self.state_from_index(i) for i in range(self.n_states)]

    def nonterminal_states(self) -> list[GridState]:
        return [s for s in self.all_states() if not self.is_terminal_cell(s.col, s.row)]

    def state_index(self, state: GridState) -> int:
        return (state.row * self.size + state.col) * 4 + state.dir

    def state_from_index(self, index: int) -> GridState:
        cell, d = divmod(int(index), 4)
        row, col = divmod(cell, self.size)
        return GridState(col, row, d)

    # dynamics
    def _transition(self, state: GridState, action: int, phase: Phase):
        col, row, d = state
        if action == TURN_LEFT:
            return GridState(col, row, (d - 1) % 4), 0.0, False
        if action == TURN_RIGHT:
            return GridState(col, row, (d + 1) % 4), 0.0, False
        if action != FORWARD:
            raise ValueError(f"invalid action {action}")
        dc, dr = DIR_VEC[d]
        nc, nr = col + dc, row + dr
        if not (0 <= nc < self.size and 0 <= nr < self.size):
            return state, 0.0, False
        r_t1, r_t2 = self.rewards[Phase(phase)]
        if (nc, nr) == self.t1:
            return GridState(nc, nr, d), r_t1, True
        if (nc, nr) == self.t2:
            return GridState(nc, nr, d), r_t2, True
        nxt = GridState(nc, nr, d)
        if self.in_t1_zone(state) and not self.in_t1_zone(nxt):
            return state, 0.0, False
        return nxt, 0.0, False

    def transition(self, state: GridState, action: int, phase: Phase | None = None):
        return self._transition(state, action, self.phase if phase is None else phase)

    def _sample_state(self, mode: ResetMode, rng: np.random.Generator) -> GridState:
        if mode is ResetMode.TRAIN_PHASE2:
            cells = [(c, r) for r in range(self.zone) for c in range(self.zone)
                     if not self.is_terminal_cell(c, r)]
        else:
            cells = [(c, r) for r in range(self.size) for c in range(self.size)
                     if not self.is_terminal_cell(c, r)]
        c, r = cells[rng.integers(len(cells))]
        return GridState(c, r, int(rng.integers(4)))

    # observations
    def encode(self, state: GridState, scheme: str | None = None) -> np.ndarray:
        scheme = self.encoding if scheme is None else scheme
        if scheme == "onehot":
            x = np.zeros(self.n_states)
            x[self.state_index(state)] = 1.0
            return x
        if scheme == "coarse-image":
            return self.render(state).ravel()
        raise ValueError(f"unknown encoding {scheme!r}")

    def render(self, state: GridState) -> np.ndarray:
        """Channel-first RGB image, 3 pixels per cell."""
        px = self.size * CELL_PX
        img = np.zeros((3, px, px))
        for c, r in (self.t1, self.t2):
            img[1, r * CELL_PX:(r + 1) * CELL_PX, c * CELL_PX:(c + 1) * CELL_PX] = 1.0
        r0, c0 = state.row * CELL_PX, state.col * CELL_PX
        img[0, r0:r0 + CELL_PX, c0:c0 + CELL_PX] = _TRIANGLES[state.dir]
        return img

    def decode(self, obs) -> GridState:
        """Inverse of the one-hot encoding."""
        if self.encoding != "onehot":
            raise ValueError("decode() only supports the onehot encoding")
        return self.state_from_index(int(np.argmax(obs)))

    def decode_index(self, obs: np.ndarray) -> np.ndarray:
        """Vectorised state indices for a batch of one-hot observations."""
        return np.argmax(np.asarray(obs), axis=-1)


def grid_step(env: MiniGridLoCA, state: GridState, action: int, phase: Phase) -> StepOutcome:
    nxt, reward, terminal = env.transition(state, action, phase)
    return StepOutcome(env.encode(nxt), reward, terminal, False)


def grid_encode(env: MiniGridLoCA, state: GridState, scheme: str = "onehot") -> np.ndarray:
    return env.encode(state, scheme)


def grid_reset(env: MiniGridLoCA, mode: ResetMode, rng: np.random.Generator) -> GridState:
    return env._sample_state(ResetMode(mode), rng)


__all__ = [
    "FORWARD", "TURN_LEFT", "TURN_RIGHT", "GridState", "MiniGridLoCA",
    "grid_encode", "grid_reset", "grid_step", "TASK_REWARDS",
]
