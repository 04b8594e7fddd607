from .base import TASK_REWARDS, LocaEnv, Phase, ResetMode, StepOutcome, training_reset_mode
from .minigrid import GridState, MiniGridLoCA, grid_encode, grid_reset, grid_step
from .mountain_car import (
    MCState,
    MountainCarLoCA,
    mc_decode,
    mc_encode,
    mc_in_t1_zone,
    mc_is_terminal,
    mc_reset,
    mc_step,
    mc_transition,
)


def make_env(name: str, phase: Phase = Phase.A, **kwargs) -> LocaEnv:
    if name == "mountaincar":
        return MountainCarLoCA(phase, **kwargs)
    if name == "minigrid":
        return MiniGridLoCA(phase, **kwargs)
    raise ValueError(f"unknown environment {name!r}")


__all__ = [
    "GridState", "LocaEnv", "MCState", "MiniGridLoCA", "MountainCarLoCA", "Phase",
    "ResetMode", "StepOutcome", "TASK_REWARDS", "grid_encode", "grid_reset", "grid_step",
    "make_env", "mc_decode", "mc_encode", "mc_in_t1_zone", "mc_is_terminal", "mc_reset",
    "mc_step", "mc_transition", "training_reset_mode",
]
