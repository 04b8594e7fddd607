"""Shared types for the LoCA environments."""

from __future__ import annotations

import enum
from typing import NamedTuple

import numpy as np


class Phase(str, enum.Enum):
    """Which task's reward function is active. Never exposed to the agent."""

    A = "A"
    B = "B"


class ResetMode(str, enum.Enum):
    TRAIN_PHASE1 = "train_phase1"
    TRAIN_PHASE2 = "train_phase2"
    EVAL = "eval"


class StepOutcome(NamedTuple):
    observation: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


# (T1, T2) terminal rewards per task
TASK_REWARDS = {Phase.A: (4.0, 2.0), Phase.B: (1.0, 2.0)}


def training_reset_mode(phase: Phase) -> ResetMode:
    return ResetMode.TRAIN_PHASE1 if phase is Phase.A else ResetMode.TRAIN_PHASE2


class LocaEnv:
    """Minimal stateful wrapper around a pure ``step`` function.

    Subclasses implement ``_sample_state``, ``_transition`` and ``encode``.
    The wrapper owns the step counter used for time-limit truncation.
    """

    n_actions: int
    max_steps: int
    gamma: float = 0.99

    def __init__(self, phase: Phase = Phase.A, rewards: dict | None = None):
        self.phase = Phase(phase)
        self.rewards = dict(TASK_REWARDS if rewards is None else rewards)
        self.state = None
        self.elapsed = 0

    def reset(self, mode: ResetMode, rng: np.random.Generator) -> np.ndarray:
        self.state = self._sample_state(ResetMode(mode), rng)
        self.elapsed = 0
        return self.encode(self.state)

    def reset_to(self, state) -> np.ndarray:
        self.state = state
        self.elapsed = 0
        return self.encode(state)

    def step(self, action: int) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("step() called before reset()")
        next_state, reward, terminal = self._transition(self.state, int(action), self.phase)
        self.state = next_state
        self.elapsed += 1
        truncated = (not terminal) and self.elapsed >= self.max_steps
        return StepOutcome(self.encode(next_state), reward, terminal, truncated)

    # subclass hooks
    def _sample_state(self, mode: ResetMode, rng: np.random.Generator):
        raise NotImplementedError

    def _transition(self, state, action: int, phase: Phase):
        raise NotImplementedError

    def encode(self, state) -> np.ndarray:
        raise NotImplementedError
