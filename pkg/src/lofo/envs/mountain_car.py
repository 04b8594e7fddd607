"""MountainCarLoCA: classic mountain-car physics with two terminal regions.

T1 sits at the hilltop (position > 0.5 with positive velocity), T2 in the
valley around position -0.52 at near-zero velocity. The T1-zone is a
one-way box just below the hilltop: moves that would leave it without
reaching T1 are rejected and the car stays put for that step.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .base import TASK_REWARDS, LocaEnv, Phase, ResetMode, StepOutcome

MIN_POSITION, MAX_POSITION = -1.2, 0.6
MAX_SPEED = 0.07
FORCE = 0.001
GRAVITY = 0.0025

T1_ZONE_POSITION = (0.4, 0.5)
T1_ZONE_VELOCITY = (0.0, 0.07)
EVAL_POSITION = (-0.2, -0.1)
EVAL_VELOCITY = (-0.01, 0.01)

# action index -> applied force direction
ACTION_FORCES = (-1.0, 0.0, 1.0)


class MCState(NamedTuple):
    position: float
    velocity: float


def mc_in_t1_zone(state: MCState) -> bool:
    x, v = state
    return (T1_ZONE_POSITION[0] <= x <= T1_ZONE_POSITION[1]
            and T1_ZONE_VELOCITY[0] <= v <= T1_ZONE_VELOCITY[1])


def mc_at_t1(state: MCState) -> bool:
    return state.position > 0.5 and state.velocity > 0


def mc_at_t2(state: MCState) -> bool:
    return (state.position + 0.52) ** 2 + 100 * state.velocity ** 2 <= 0.07 ** 2


def mc_is_terminal(state: MCState) -> bool:
    return mc_at_t1(state) or mc_at_t2(state)


def _physics(x: float, v: float, force: float) -> MCState:
    v = v + FORCE * force - GRAVITY * math.cos(3 * x)
    v = min(max(v, -MAX_SPEED), MAX_SPEED)
    x = x + v
    x = min(max(x, MIN_POSITION), MAX_POSITION)
    if x == MIN_POSITION and v < 0:
        v = 0.0
    return MCState(x, v)


def mc_transition(state: MCState, action: int, phase: Phase,
                  rewards: dict | None = None) -> tuple[MCState, float, bool]:
    """Pure dynamics: returns ``(next_state, reward, terminal)``."""
    rewards = TASK_REWARDS if rewards is None else rewards
    nxt = _physics(state.position, state.velocity, ACTION_FORCES[action])
    r_t1, r_t2 = rewards[Phase(phase)]
    if mc_at_t1(nxt):
        return nxt, r_t1, True
    if mc_at_t2(nxt):
        return nxt, r_t2, True
    if mc_in_t1_zone(state) and not mc_in_t1_zone(nxt):
        return MCState(state.position, state.velocity), 0.0, False
    return nxt, 0.0, False


def mc_step(state: MCState, action: int, phase: Phase,
            rewards: dict | None = None) -> StepOutcome:
    nxt, reward, terminal = mc_transition(state, action, phase, rewards)
    return StepOutcome(mc_encode(nxt), reward, terminal, False)


def mc_reset(mode: ResetMode, rng: np.random.Generator) -> MCState:
    mode = ResetMode(mode)
    if mode is ResetMode.TRAIN_PHASE2:
        return MCState(rng.uniform(*T1_ZONE_POSITION), rng.uniform(*T1_ZONE_VELOCITY))
    if mode is ResetMode.EVAL:
        return MCState(rng.uniform(*EVAL_POSITION), rng.uniform(*EVAL_VELOCITY))
    while True:
        s = MCState(rng.uniform(MIN_POSITION, MAX_POSITION), rng.uniform(-MAX_SPEED, MAX_SPEED))
        if not mc_is_terminal(s):
            return s


def mc_encode(state: MCState) -> np.ndarray:
    """Scale position and velocity to [-1, 1]."""
    x, v = state
    return np.array([
        2.0 * (x - MIN_POSITION) / (MAX_POSITION - MIN_POSITION) - 1.0,
        v / MAX_SPEED,
    ])


def mc_decode(obs) -> MCState:
    obs = np.asarray(obs, dtype=float)
    x = (obs[..., 0] + 1.0) * 0.5 * (MAX_POSITION - MIN_POSITION) + MIN_POSITION
    v = obs[..., 1] * MAX_SPEED
    return MCState(x, v)


class MountainCarLoCA(LocaEnv):
    n_actions = 3
    max_steps = 500
    gamma = 0.99
    name = "mountaincar"

    def _sample_state(self, mode, rng):
        return mc_reset(mode, rng)

    def _transition(self, state, action, phase):
        return mc_transition(state, action, phase, self.rewards)

    def encode(self, state) -> np.ndarray:
        return mc_encode(state)

    def decode(self, obs) -> MCState:
        return mc_decode(obs)

    @property
    def obs_dim(self) -> int:
        return 2

    def in_t1_zone(self, state) -> bool:
        return mc_in_t1_zone(state)
