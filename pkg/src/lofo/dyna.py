"""Deep Dyna-Q: a learned world model plus a Q-network trained only on
model-predicted transitions.

The world model has three heads (dynamics, reward, termination). Each is
an MLP whose hidden representation is concatenated with a one-hot action
mid-network. Planning samples stored ``(obs, action)`` pairs, asks the
model for ``(r, s', done)`` and regresses ``Q(obs, action)`` towards
``r + gamma * (1 - done) * max_a' Q_target(s', a')``. There is no direct
TD update from real transitions.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .envs import LocaEnv, ResetMode, StepOutcome
from .nn import Adam, DenseNet, load_snapshot, mse, save_snapshot
from .replay import ReplayBuffer, TransitionBatch

_LOG_EPS = 1e-7


class AgentMode(str, enum.Enum):
    TRAINING = "training"
    EVALUATION = "evaluation"


@dataclass
class NetSpec:
    """Hidden widths and where the action joins (index into ``hidden``,
    counted from 1 like ``DenseNet.inject_after``)."""

    hidden: tuple
    activation: str = "tanh"
    inject_after: int | None = None

    def sizes(self, in_dim, out_dim):
        return [in_dim, *self.hidden, out_dim]


@dataclass
class AgentConfig:
    gamma: float = 0.99
    epsilon: float = 0.5
    value_lr: float = 5e-6
    model_lr: float = 5e-5
    model_steps: int = 5
    planning_steps: int = 5
    model_batch: int = 32
    planning_batch: int = 32
    warmup_steps: int = 50_000
    target_sync: int = 500
    model_net: NetSpec = field(default_factory=lambda: NetSpec((64, 64, 63, 64, 64), "tanh", 3))
    dynamics_net: NetSpec | None = None  # defaults to model_net
    q_net: NetSpec = field(default_factory=lambda: NetSpec((64, 64, 64, 64), "tanh"))
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        for name in ("model_batch", "planning_batch", "target_sync"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("model_steps", "planning_steps", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("model_net", "dynamics_net", "q_net"):
            spec = getattr(self, name)
            if isinstance(spec, dict):
                spec = NetSpec(**spec)
            if spec is not None:
                spec.hidden = tuple(int(h) for h in spec.hidden)
            setattr(self, name, spec)
        for name in ("model_net", "dynamics_net"):
            spec = getattr(self, name)
            # joining the action at the output layer makes the head additive
            # in state and action, which cannot fit most transition tables
            if spec is not None and not (spec.inject_after and spec.inject_after < len(spec.hidden)):
                raise ValueError(f"{name} must join the action before its last hidden layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("model_net", "dynamics_net", "q_net"):
            if d[name] is not None:
                d[name]["hidden"] = list(d[name]["hidden"])
        return d


MOUNTAINCAR_AGENT = AgentConfig()

# Dense stand-ins for the image networks, used with one-hot observations.
# The dynamics head is a softmax over the 256 observation slots.
MINIGRID_AGENT = AgentConfig(
    value_lr=6.25e-5, model_lr=1e-4, model_steps=1, planning_steps=1,
    model_batch=128, planning_batch=128, warmup_steps=2000, target_sync=5000,
    model_net=NetSpec((64, 64), "relu", 1),
    dynamics_net=NetSpec((64, 64), "relu", 1),
    q_net=NetSpec((64, 64), "relu"),
)


class WorldModel:
    """Dynamics, reward and termination heads.

    With ``onehot=True`` observations are one-hot vectors and the dynamics
    head outputs a categorical distribution over them (softmax, trained
    with cross-entropy). Otherwise it predicts the change ``s' - s``.
    """

    def __init__(self, obs_dim, n_actions, config: AgentConfig, onehot=False, seed=None):
        rng = np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.onehot = onehot
        dt = np.dtype(config.dtype)

        def head(spec, out_dim, out_act):
            return DenseNet(spec.sizes(obs_dim, out_dim), spec.activation, out_act,
                            inject_after=spec.inject_after, inject_dim=n_actions, seed=rng, dtype=dt)

        dyn_spec = config.dynamics_net or config.model_net
        self.dynamics = head(dyn_spec, obs_dim, "softmax" if onehot else "identity")
        self.reward = head(config.model_net, 1, "identity")
        self.termination = head(config.model_net, 1, "sigmoid")
        self.opts = {name: Adam.for_net(net, config.model_lr) for name, net in self.nets().items()}

    def nets(self) -> dict:
        return {"dynamics": self.dynamics, "reward": self.reward, "termination": self.termination}

    def _inputs(self, obs, actions):
        a = np.eye(self.n_actions, dtype=self.dynamics.dtype)[np.asarray(actions)]
        if self.onehot:
            return np.asarray(obs).argmax(axis=-1), a
        return np.asarray(obs, dtype=self.dynamics.dtype), a

    def predict(self, obs, actions):
        """``(reward, next_obs, done_prob)`` for a batch of pairs."""
        x, a = self._inputs(obs, actions)
        oh = self.onehot
        r = self.reward.forward(x, a, cache=False, onehot=oh)[:, 0]
        t = self.termination.forward(x, a, cache=False, onehot=oh)[:, 0]
        s = self.dynamics.forward(x, a, cache=False, onehot=oh)
        if not oh:
            s = x + s
        return r, s, t

    def update(self, batch: TransitionBatch) -> dict:
        """One Adam step per head; returns the three losses."""
        x, a = self._inputs(batch.obs, batch.actions)
        oh = self.onehot
        n = len(batch.actions)
        dt = self.dynamics.dtype
        losses = {}

        out = self.dynamics.forward(x, a, onehot=oh)
        if oh:
            target_idx = np.asarray(batch.next_obs).argmax(axis=-1)
            p_true = out[np.arange(n), target_idx]
            losses["dynamics"] = float(-np.mean(np.log(np.maximum(p_true, _LOG_EPS))))
            g = out.copy()
            g[np.arange(n), target_idx] -= 1.0
            self.dynamics.backward(g / n, wrt_logits=True)
        else:
            delta = np.asarray(batch.next_obs, dtype=dt) - x
            losses["dynamics"], g = mse(out, delta)
            self.dynamics.backward(g)
        self._step("dynamics")

        out = self.reward.forward(x, a, onehot=oh)
        losses["reward"], g = mse(out, np.asarray(batch.rewards, dtype=dt)[:, None])
        self.reward.backward(g)
        self._step("reward")

        out = self.termination.forward(x, a, onehot=oh)
        y = np.asarray(batch.terminals, dtype=dt)[:, None]
        p = np.clip(out, _LOG_EPS, 1 - _LOG_EPS)
        losses["termination"] = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        self.termination.backward((out - y) / n, wrt_logits=True)
        self._step("termination")

        if not all(np.isfinite(v) for v in losses.values()):
            raise FloatingPointError(f"non-finite model loss: {losses}")
        return losses

    def _step(self, name):
        net = getattr(self, name)
        self.opts[name].step(net.params, net.grad)


class QFunction:
    def __init__(self, obs_dim, n_actions, config: AgentConfig, onehot=False, seed=None):
        spec = config.q_net
        self.n_actions = n_actions
        self.onehot = onehot
        self.online = DenseNet(spec.sizes(obs_dim, n_actions), spec.activation,
                               seed=seed, dtype=np.dtype(config.dtype))
        self.target = self.online.clone()
        self.opt = Adam.for_net(self.online, config.value_lr)
        self._state_values = None

    def values(self, obs, target=False):
        """Q-values for a batch of observations (dense vectors)."""
        net = self.target if target else self.online
        obs = np.asarray(obs)
        if self.onehot and obs.ndim == 2 and obs.shape[0] and np.all(obs.max(axis=1) == 1) \
                and np.count_nonzero(obs) == obs.shape[0]:
            return net.forward(obs.argmax(axis=1), cache=False, onehot=True)
        return net.forward(obs.astype(net.dtype, copy=False), cache=False)

    def sync_target(self):
        self.target.copy_from(self.online)
        self._state_values = None

    def state_values(self) -> np.ndarray:
        """``max_a Q_target(s, a)`` for every one-hot state, cached until the
        next target sync."""
        if not self.onehot:
            raise ValueError("state_values needs a one-hot observation space")
        if self._state_values is None:
            n = self.target.in_dim
            q = self.target.forward(np.arange(n), cache=False, onehot=True)
            self._state_values = q.max(axis=1)
        return self._state_values

    def update(self, obs, actions, targets) -> float:
        net = self.online
        n = len(actions)
        if self.onehot:
            q = net.forward(np.asarray(obs).argmax(axis=-1), onehot=True)
        else:
            q = net.forward(np.asarray(obs, dtype=net.dtype))
        rows = np.arange(n)
        err = q[rows, actions] - targets
        g = np.zeros_like(q)
        g[rows, actions] = (2.0 / n) * err
        net.backward(g)
        self.opt.step(net.params, net.grad)
        return float(np.mean(err * err))


def greedy(q_values) -> int:
    """Argmax with ties broken towards the lowest action index."""
    return int(np.argmax(q_values))


def act(q: QFunction, obs, mode: AgentMode, epsilon: float, rng: np.random.Generator) -> int:
    if AgentMode(mode) is AgentMode.TRAINING and rng.random() < epsilon:
        return int(rng.integers(q.n_actions))
    return greedy(q.values(np.asarray(obs)[None])[0])


def planning_targets(q: QFunction, reward, next_obs, done, gamma):
    """One-step targets. With one-hot states ``next_obs`` may be a predicted
    distribution over states; the bootstrap is then its expectation."""
    if q.onehot:
        bootstrap = np.asarray(next_obs, dtype=q.target.dtype) @ q.state_values()
    else:
        bootstrap = q.values(next_obs, target=True).max(axis=1)
    return reward + gamma * (1.0 - done) * bootstrap


def planning_update(q: QFunction, model, batch: TransitionBatch, gamma: float) -> float:
    """One Q step towards model-predicted one-step targets."""
    r, s_next, done = model.predict(batch.obs, batch.actions)
    y = planning_targets(q, r, s_next, done, gamma)
    loss = q.update(batch.obs, batch.actions, y.astype(q.online.dtype, copy=False))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite planning loss")
    return loss


def model_update(model: WorldModel, batch: TransitionBatch) -> dict:
    return model.update(batch)


def sync_target(q: QFunction):
    q.sync_target()


class DynaQAgent:
    def __init__(self, obs_dim, n_actions, config: AgentConfig, onehot=False, seed=None):
        self.config = config
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.onehot = onehot
        rng = np.random.default_rng(seed)
        self.model = WorldModel(obs_dim, n_actions, config, onehot, seed=rng)
        self.q = QFunction(obs_dim, n_actions, config, onehot, seed=rng)
        self.mode = AgentMode.TRAINING
        self.updates = 0

    def act(self, obs, rng=None, mode: AgentMode | None = None) -> int:
        mode = self.mode if mode is None else AgentMode(mode)
        return act(self.q, obs, mode, self.config.epsilon, rng)

    def train_step(self, buffer: ReplayBuffer, rng) -> dict:
        """The configured model-learning then planning updates."""
        if self.mode is not AgentMode.TRAINING:
            raise RuntimeError("updates are disabled in evaluation mode")
        cfg = self.config
        record = {}
        for _ in range(cfg.model_steps):
            record = self.model.update(buffer.sample(cfg.model_batch, rng))
        for _ in range(cfg.planning_steps):
            record["planning"] = planning_update(self.q, self.model,
                                                 buffer.sample(cfg.planning_batch, rng), cfg.gamma)
        self.updates += 1
        return record

    def networks(self) -> dict:
        nets = dict(self.model.nets())
        nets["q"] = self.q.online
        nets["q_target"] = self.q.target
        return nets

    def optimizers(self) -> dict:
        opts = dict(self.model.opts)
        opts["q"] = self.q.opt
        return opts

    def save(self, path, meta=None):
        header = {"config": self.config.to_dict(), "obs_dim": self.obs_dim,
                  "n_actions": self.n_actions, "onehot": self.onehot, "updates": self.updates}
        header.update(meta or {})
        return save_snapshot(path, self.networks(), self.optimizers(), header)

    @classmethod
    def load(cls, path) -> "DynaQAgent":
        nets, opts, meta = load_snapshot(path)
        agent = cls(meta["obs_dim"], meta["n_actions"], AgentConfig(**meta["config"]),
                    meta["onehot"], seed=0)
        for name, net in agent.networks().items():
            net.copy_from(nets[name])
        agent.q._state_values = None
        for name, opt in opts.items():
            agent.optimizers()[name].__dict__.update(opt.__dict__)
        agent.updates = meta["updates"]
        return agent


class EmbeddingLookup:
    """Caches embeddings of one-hot observations: row ``i`` is ``f(e_i)``."""

    def __init__(self, embed: Callable, n_states: int):
        self.table = np.asarray(embed(np.eye(n_states)))

    def __call__(self, obs):
        return self.table[np.asarray(obs).argmax(axis=-1)]


class TrainingLoop:
    """Owns the live episode of a training run.

    ``reset_mode`` is set by the harness; switching it (together with the
    env's phase) is the only thing that happens at a phase boundary.
    """

    def __init__(self, agent: DynaQAgent, env: LocaEnv, buffer: ReplayBuffer, rng,
                 embed: Callable | None = None, reset_mode=ResetMode.TRAIN_PHASE1):
        self.agent = agent
        self.env = env
        self.buffer = buffer
        self.rng = rng
        self.embed = embed
        self.reset_mode = ResetMode(reset_mode)
        self.steps = 0
        self.obs = None
        self.last_record: dict = {}

    def step(self) -> StepOutcome:
        return agent_env_step(self)


def agent_env_step(loop: TrainingLoop) -> StepOutcome:
    """Act, step the env, store the transition, then learn (after warmup)."""
    agent, cfg = loop.agent, loop.agent.config
    if agent.mode is not AgentMode.TRAINING:
        raise RuntimeError("agent_env_step needs training mode")
    if loop.obs is None:
        loop.obs = loop.env.reset(loop.reset_mode, loop.rng)
    obs = loop.obs
    if loop.steps < cfg.warmup_steps:
        action = int(loop.rng.integers(agent.n_actions))
    else:
        action = agent.act(obs, loop.rng)
    out = loop.env.step(action)
    embedding = None if loop.embed is None else np.asarray(loop.embed(obs[None]))[0]
    # a time-limit cut is not a real termination
    loop.buffer.insert(obs, action, out.reward, out.observation, out.terminal, embedding)
    loop.steps += 1
    if loop.steps > cfg.warmup_steps:
        loop.last_record = agent.train_step(loop.buffer, loop.rng)
        if (loop.steps - cfg.warmup_steps) % cfg.target_sync == 0:
            agent.q.sync_target()
    loop.obs = None if (out.terminal or out.truncated) else out.observation
    return out


__all__ = [
    "AgentConfig", "AgentMode", "DynaQAgent", "EmbeddingLookup", "MINIGRID_AGENT",
    "MOUNTAINCAR_AGENT", "NetSpec", "QFunction", "TrainingLoop", "WorldModel", "act",
    "agent_env_step", "greedy", "model_update", "planning_targets", "planning_update",
    "sync_target",
]
