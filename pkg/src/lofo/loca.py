"""The two-phase LoCA harness.

Phase 1 trains on task A from the full training start distribution. At the
phase boundary the environment's reward function and training start
distribution switch to task B (starts inside the T1-zone); the agent is
not told. Every ``eval_period`` training steps the agent is frozen and
evaluated from the evaluation start distribution under the current task.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .config import ExperimentConfig
from .dyna import AgentMode, DynaQAgent, EmbeddingLookup, TrainingLoop
from .envs import (
    TASK_REWARDS,
    GridState,
    LocaEnv,
    MCState,
    MiniGridLoCA,
    MountainCarLoCA,
    Phase,
    ResetMode,
    make_env,
    mc_decode,
    mc_encode,
    mc_in_t1_zone,
)
from .envs.minigrid import FORWARD
from .envs.mountain_car import (
    ACTION_FORCES,
    EVAL_POSITION,
    EVAL_VELOCITY,
    FORCE,
    GRAVITY,
    MAX_POSITION,
    MAX_SPEED,
    MIN_POSITION,
    T1_ZONE_POSITION,
    T1_ZONE_VELOCITY,
)
from .locality import (
    ContrastiveEmbedding,
    HandcraftedMCLocality,
    collect_random_dataset,
    train_embedding,
)
from .replay import GridSpec, LofoParams, ReplayBuffer, make_buffer, write_histogram_csv

log = logging.getLogger(__name__)

CURVE_HEADER = "step,phase,mean_return,stderr,n_runs"
_EVAL_STREAM = 0x5EED
# nodes per axis of the MountainCar value-iteration grid; doubling it moves
# both task optima by under 1%, which 200 does not achieve
MC_ORACLE_RESOLUTION = 400


@dataclass(frozen=True)
class LocaSchedule:
    phase1_steps: int
    phase2_steps: int
    eval_period: int = 10_000
    eval_episodes: int = 10
    gamma: float = 0.99

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps

    def eval_steps(self) -> list[int]:
        return list(range(self.eval_period, self.total_steps + 1, self.eval_period))

    def phase_at(self, step: int) -> Phase:
        """Phase of the training step with 1-based index ``step``; an
        evaluation after ``step`` steps uses the same phase."""
        return Phase.A if step <= self.phase1_steps else Phase.B


class OptimalReturn(NamedTuple):
    value: float
    method: str


@dataclass
class LearningCurve:
    steps: list
    phases: list
    mean: list
    stderr: list
    n_runs: int

    @classmethod
    def aggregate(cls, runs: list["RunResult"]) -> "LearningCurve":
        """Mean and standard error across runs (a pure fold)."""
        returns = np.array([r.returns for r in runs], dtype=float)
        n = returns.shape[0]
        mean = returns.mean(axis=0)
        se = returns.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        return cls(list(runs[0].steps), list(runs[0].phases), mean.tolist(), se.tolist(), n)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [CURVE_HEADER]
        for s, p, m, e in zip(self.steps, self.phases, self.mean, self.stderr):
            lines.append(f"{s},{p},{float(m)!r},{float(e)!r},{self.n_runs}")
        path.write_text("\n".join(lines) + "\n")
        return path

    def final_mean(self, k: int) -> float:
        return float(np.mean(self.mean[-k:]))


@dataclass
class RunResult:
    seed: int
    steps: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    hist: dict = field(default_factory=dict)          # phase -> 2-D counts
    rewards: dict = field(default_factory=dict)       # phase -> 2-D heatmap
    entry_rewards: dict = field(default_factory=dict)  # phase -> {"T1": , "T2": }
    zone_fraction: dict = field(default_factory=dict)  # phase -> fraction of T1-zone samples
    buffer_size: dict = field(default_factory=dict)
    training_steps: int = 0
    agent: object = None
    buffer: object = None

    def curve(self) -> LearningCurve:
        return LearningCurve.aggregate([self])


# --- evaluation ------------------------------------------------------------

def discounted_return(rewards, gamma) -> float:
    return float(sum(r * gamma ** t for t, r in enumerate(rewards)))


def rollout(policy: Callable, env: LocaEnv, start, gamma) -> float:
    """Return of one greedy episode from ``start`` (capped by the env)."""
    obs = env.reset_to(start)
    rewards = []
    while True:
        out = env.step(policy(obs))
        rewards.append(out.reward)
        if out.terminal or out.truncated:
            return discounted_return(rewards, gamma)
        obs = out.observation


def _policy(agent) -> Callable:
    if callable(agent) and not hasattr(agent, "act"):
        return agent
    return lambda obs: agent.act(obs, None, AgentMode.EVALUATION)


def evaluate(agent, env: LocaEnv, episodes: int, gamma: float, rng: np.random.Generator,
             starts=None) -> float:
    """Mean discounted return of the greedy policy from evaluation starts.

    ``agent`` is a DynaQAgent (switched to evaluation mode for the duration)
    or any ``obs -> action`` callable.
    """
    if starts is None:
        starts = [env._sample_state(ResetMode.EVAL, rng) for _ in range(episodes)]
    prior = getattr(agent, "mode", None)
    if prior is not None:
        agent.mode = AgentMode.EVALUATION
    try:
        policy = _policy(agent)
        returns = [rollout(policy, env, s, gamma) for s in starts]
    finally:
        if prior is not None:
            agent.mode = prior
    return float(np.mean(returns))


# --- optimal-return oracles -------------------------------------------------

def minigrid_values(env: MiniGridLoCA, phase: Phase, gamma: float, tol=1e-9, max_iter=100_000):
    """Exact value iteration; returns ``(V, Q)`` indexed by state index."""
    n = env.n_states
    nxt = np.zeros((n, 3), np.int64)
    rew = np.zeros((n, 3))
    done = np.zeros((n, 3), bool)
    for i in range(n):
        s = env.state_from_index(i)
        if env.is_terminal_cell(s.col, s.row):
            nxt[i] = i
            done[i] = True
            continue
        for a in range(3):
            s2, r, d = env.transition(s, a, phase)
            nxt[i, a], rew[i, a], done[i, a] = env.state_index(s2), r, d
    v = np.zeros(n)
    for _ in range(max_iter):
        q = rew + gamma * np.where(done, 0.0, v[nxt])
        new = q.max(axis=1)
        if np.max(np.abs(new - v)) < tol:
            return new, q
        v = new
    raise RuntimeError("value iteration did not converge")


def _mc_step_batch(x, v, force, phase_rewards):
    """Vectorized MountainCar transition (same rules as ``mc_transition``)."""
    v2 = np.clip(v + FORCE * force - GRAVITY * np.cos(3 * x), -MAX_SPEED, MAX_SPEED)
    x2 = np.clip(x + v2, MIN_POSITION, MAX_POSITION)
    v2 = np.where((x2 == MIN_POSITION) & (v2 < 0), 0.0, v2)
    at_t1 = (x2 > 0.5) & (v2 > 0)
    at_t2 = ((x2 + 0.52) ** 2 + 100 * v2 ** 2 <= 0.07 ** 2) & ~at_t1
    r = np.where(at_t1, phase_rewards[0], np.where(at_t2, phase_rewards[1], 0.0))
    done = at_t1 | at_t2
    (x_lo, x_hi), (v_lo, v_hi) = T1_ZONE_POSITION, T1_ZONE_VELOCITY

    def zone(a, b):
        return (a >= x_lo) & (a <= x_hi) & (b >= v_lo) & (b <= v_hi)

    hold = zone(x, v) & ~zone(x2, v2) & ~done
    x2 = np.where(hold, x, x2)
    v2 = np.where(hold, v, v2)
    return x2, v2, r, done


def mountaincar_values(phase: Phase, gamma: float, n=MC_ORACLE_RESOLUTION, tol=1e-9,
                       rewards=None, max_iter=200_000):
    """Value iteration on an ``n x n`` grid with nearest-node projection.

    Returns ``(V, xs, vs)`` with ``V[i, j]`` the value at ``(xs[i], vs[j])``.
    """
    pr = (TASK_REWARDS if rewards is None else rewards)[Phase(phase)]
    xs = np.linspace(MIN_POSITION, MAX_POSITION, n)
    vs = np.linspace(-MAX_SPEED, MAX_SPEED, n)
    X, V = np.meshgrid(xs, vs, indexing="ij")
    nxt, rew, done = [], [], []
    for force in ACTION_FORCES:
        x2, v2, r, d = _mc_step_batch(X.ravel(), V.ravel(), force, pr)
        i = np.rint((x2 - MIN_POSITION) / (xs[1] - xs[0])).astype(int).clip(0, n - 1)
        j = np.rint((v2 + MAX_SPEED) / (vs[1] - vs[0])).astype(int).clip(0, n - 1)
        nxt.append(i * n + j)
        rew.append(r)
        done.append(d)
    nxt, rew, done = np.stack(nxt, 1), np.stack(rew, 1), np.stack(done, 1)
    val = np.zeros(n * n)
    for _ in range(max_iter):
        new = (rew + gamma * np.where(done, 0.0, val[nxt])).max(axis=1)
        if np.max(np.abs(new - val)) < tol:
            return new.reshape(n, n), xs, vs
        val = new
    raise RuntimeError("value iteration did not converge")


def _mc_eval_starts(count=1000, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(*EVAL_POSITION, size=count), rng.uniform(*EVAL_VELOCITY, size=count)


def optimal_return_oracle(env: LocaEnv, phase: Phase, gamma: float,
                          resolution=MC_ORACLE_RESOLUTION) -> OptimalReturn:
    """Expected optimal discounted return over the evaluation starts."""
    phase = Phase(phase)
    if isinstance(env, MiniGridLoCA):
        v, _ = minigrid_values(env, phase, gamma)
        idx = [env.state_index(s) for s in env.nonterminal_states()]
        return OptimalReturn(float(v[idx].mean()), "dp-exact")
    if isinstance(env, MountainCarLoCA):
        V, xs, vs = mountaincar_values(phase, gamma, resolution, rewards=env.rewards)
        x, v = _mc_eval_starts()
        i = np.rint((x - MIN_POSITION) / (xs[1] - xs[0])).astype(int)
        j = np.rint((v + MAX_SPEED) / (vs[1] - vs[0])).astype(int)
        return OptimalReturn(float(V[i, j].mean()), f"dp-grid-{resolution}")
    raise TypeError(f"no oracle for {type(env).__name__}")


# --- histograms and reward heatmaps ------------------------------------------

def state_grid(env: LocaEnv, x_bins=20, y_bins=20) -> GridSpec:
    """Coarse 2-D binning: position x velocity, or grid cell (col, row)."""
    if isinstance(env, MiniGridLoCA):
        size = env.size
        edges = np.arange(size + 1) - 0.5

        def cells(obs):
            idx = env.decode_index(obs)
            cell = idx // 4
            return cell % size, cell // size
        return GridSpec(edges, edges, cells)
    return GridSpec(np.linspace(MIN_POSITION, MAX_POSITION, x_bins + 1),
                    np.linspace(-MAX_SPEED, MAX_SPEED, y_bins + 1),
                    lambda obs: mc_decode(obs))


def zone_fraction(env: LocaEnv, buffer: ReplayBuffer) -> float:
    """Fraction of stored transitions whose start state is in the T1-zone."""
    obs = buffer.observations()
    if len(obs) == 0:
        return 0.0
    if isinstance(env, MiniGridLoCA):
        states = [env.state_from_index(i) for i in env.decode_index(obs)]
        return float(np.mean([env.in_t1_zone(s) for s in states]))
    x, v = mc_decode(obs)
    return float(np.mean([mc_in_t1_zone(MCState(a, b)) for a, b in zip(x, v)]))


def export_histogram(buffer: ReplayBuffer, grid: GridSpec, path) -> Path:
    return write_histogram_csv(path, grid.counts(buffer.observations()))


def reward_heatmap(model, env: LocaEnv, x_bins=20, y_bins=20) -> np.ndarray:
    """Predicted reward over a state grid, indexed ``[x_bin, y_bin]``.

    MiniGrid: per cell, the forward-action prediction summed over the four
    headings. MountainCar: per bin centre, the largest prediction over
    actions.
    """
    if isinstance(env, MiniGridLoCA):
        states = env.all_states()
        obs = np.stack([env.encode(s) for s in states])
        r, _, _ = model.predict(obs, np.full(len(states), FORWARD))
        out = np.zeros((env.size, env.size))
        for s, val in zip(states, r):
            if not env.is_terminal_cell(s.col, s.row):
                out[s.col, s.row] += val
        return out
    xe = np.linspace(MIN_POSITION, MAX_POSITION, x_bins + 1)
    ve = np.linspace(-MAX_SPEED, MAX_SPEED, y_bins + 1)
    X, V = np.meshgrid((xe[:-1] + xe[1:]) / 2, (ve[:-1] + ve[1:]) / 2, indexing="ij")
    obs = np.stack([mc_encode(MCState(a, b)) for a, b in zip(X.ravel(), V.ravel())])
    preds = [model.predict(obs, np.full(len(obs), a))[0] for a in range(len(ACTION_FORCES))]
    return np.max(preds, axis=0).reshape(x_bins, y_bins)


def export_reward_heatmap(model, env: LocaEnv, path, x_bins=20, y_bins=20) -> Path:
    return write_reward_csv(path, reward_heatmap(model, env, x_bins, y_bins))


def write_reward_csv(path, heat: np.ndarray) -> Path:
    """``bin_x,bin_y,reward`` rows for every bin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["bin_x,bin_y,reward"]
    for i in range(heat.shape[0]):
        for j in range(heat.shape[1]):
            lines.append(f"{i},{j},{float(heat[i, j])!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def minigrid_entry_rewards(model, env: MiniGridLoCA) -> dict:
    """Predicted reward on the forward moves that enter each target,
    averaged over the two neighbouring cells that face it."""
    last = env.size - 1
    entries = {
        "T1": [GridState(1, 0, 3), GridState(0, 1, 0)],
        "T2": [GridState(last - 1, last, 1), GridState(last, last - 1, 2)],
    }
    out = {}
    for name, states in entries.items():
        obs = np.stack([env.encode(s) for s in states])
        r, _, _ = model.predict(obs, np.full(len(states), FORWARD))
        out[name] = float(np.mean(r))
    return out


def write_pgm(path, values: np.ndarray, scale: int = 8) -> Path:
    """Grayscale PGM render of a 2-D array (x along columns, y down rows)."""
    path = Path(path)
    v = np.asarray(values, dtype=float).T
    lo, hi = float(v.min()), float(v.max())
    img = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((scale, scale), np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P5 {img.shape[1]} {img.shape[0]} 255\n".encode())
        fh.write(img.tobytes())
    return path


# --- experiment driver -------------------------------------------------------

def build_env(config: ExperimentConfig, phase=Phase.A) -> LocaEnv:
    if config.env == "minigrid":
        return make_env("minigrid", phase, encoding=config.encoding)
    return make_env(config.env, phase)


def build_locality(config: ExperimentConfig):
    """The embedding function the LoFo buffer uses (or None)."""
    src = config.locality.source
    if src == "none" or config.buffer.kind != "lofo":
        return None
    if src == "handcrafted":
        return HandcraftedMCLocality().fit()
    if src == "snapshot":
        return ContrastiveEmbedding.load(config.locality.snapshot)
    return train_locality(config)


def train_locality(config: ExperimentConfig) -> ContrastiveEmbedding:
    emb = config.locality.embedding.build()
    rng = np.random.default_rng(config.locality.seed)
    env = build_env(config)
    data = collect_random_dataset(env, emb.collect_steps, emb.num_negatives, rng)
    return train_embedding(data, emb, rng)


def _embed_dim(embed) -> int:
    return int(getattr(embed, "embed_dim"))


def build_buffer(config: ExperimentConfig, env: LocaEnv, embed) -> ReplayBuffer:
    b = config.buffer
    onehot = isinstance(env, MiniGridLoCA) and env.encoding == "onehot"
    obs_shape = (env.obs_dim,)
    obs_dtype = np.uint8 if onehot else np.float32
    if b.kind == "lofo":
        return make_buffer("lofo", obs_shape, obs_dtype, lofo=LofoParams(b.d_local, b.n_local),
                           embed_dim=_embed_dim(embed))
    return make_buffer(b.kind, obs_shape, obs_dtype, capacity=b.capacity)


def _streams(seed: int):
    train, agent = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train), np.random.default_rng(agent)


def _snapshot(result: RunResult, phase: Phase, env: LocaEnv, agent, buffer, grid: GridSpec, gcfg):
    key = phase.value
    result.hist[key] = grid.counts(buffer.observations())
    result.rewards[key] = reward_heatmap(agent.model, env, gcfg.x_bins, gcfg.y_bins) \
        if hasattr(agent, "model") else None
    if isinstance(env, MiniGridLoCA) and hasattr(agent, "model"):
        result.entry_rewards[key] = minigrid_entry_rewards(agent.model, env)
    result.zone_fraction[key] = zone_fraction(env, buffer)
    result.buffer_size[key] = len(buffer)


def run_experiment(config: ExperimentConfig, seed: int, embed=None, agent=None,
                   out_dir=None, progress: Callable | None = None) -> RunResult:
    """One LoCA run for one seed.

    ``embed`` overrides the configured locality (useful to share one trained
    embedding across seeds); ``agent`` injects a pre-built agent.
    """
    sched = LocaSchedule(config.schedule.phase1_steps, config.schedule.phase2_steps,
                         config.schedule.eval_period, config.schedule.eval_episodes,
                         config.agent.gamma)
    env = build_env(config, Phase.A)
    eval_env = build_env(config, Phase.A)
    if embed is None:
        embed = build_locality(config)
    onehot = isinstance(env, MiniGridLoCA) and env.encoding == "onehot"
    train_rng, agent_rng = _streams(seed)
    if agent is None:
        agent = DynaQAgent(env.obs_dim, env.n_actions, config.agent.build(), onehot, seed=agent_rng)
    buffer = build_buffer(config, env, embed)
    embed_fn = None
    if config.buffer.kind == "lofo":
        embed_fn = EmbeddingLookup(embed, env.obs_dim) if onehot else embed
    loop = TrainingLoop(agent, env, buffer, train_rng, embed_fn, ResetMode.TRAIN_PHASE1)
    grid = state_grid(env, config.grid.x_bins, config.grid.y_bins)
    result = RunResult(seed)
    eval_at = set(sched.eval_steps())
    for step in range(1, sched.total_steps + 1):
        if step == sched.phase1_steps + 1:
            _snapshot(result, Phase.A, env, agent, buffer, grid, config.grid)
            env.phase = Phase.B
            loop.reset_mode = ResetMode.TRAIN_PHASE2
            loop.obs = None  # the next training episode starts inside the T1-zone
        loop.step()
        result.training_steps += 1
        if step in eval_at:
            phase = sched.phase_at(step)
            eval_env.phase = phase
            # keyed by step so training never depends on evaluation cadence
            erng = np.random.default_rng([seed, step, _EVAL_STREAM])
            ret = evaluate(agent, eval_env, sched.eval_episodes, sched.gamma, erng)
            result.steps.append(step)
            result.phases.append(phase.value)
            result.returns.append(ret)
            if progress is not None:
                progress(seed, step, phase.value, ret, len(buffer))
    _snapshot(result, Phase.B, env, agent, buffer, grid, config.grid)
    result.agent = agent
    result.buffer = buffer
    if out_dir is not None:
        write_run_artifacts(result, config, out_dir)
    return result


def write_run_artifacts(result: RunResult, config: ExperimentConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    result.curve().to_csv(run_dir / "curve.csv")
    for key, tag in (("A", "p1"), ("B", "p2")):
        write_histogram_csv(run_dir / f"hist_{tag}.csv", result.hist[key])
        heat = result.rewards.get(key)
        if heat is not None:
            write_reward_csv(run_dir / f"reward_{tag}.csv", heat)
    (run_dir / "config.json").write_text(json.dumps(config.resolved(), indent=2, sort_keys=True))
    return run_dir
