import numpy as np
import pytest

from lofo.dyna import (
    MINIGRID_AGENT,
    AgentConfig,
    AgentMode,
    DynaQAgent,
    NetSpec,
    QFunction,
    TrainingLoop,
    WorldModel,
    act,
    greedy,
    model_update,
    planning_targets,
    planning_update,
    sync_target,
)
from lofo.envs import MiniGridLoCA, MountainCarLoCA, Phase, ResetMode
from lofo.loca import evaluate
from lofo.replay import FIFOBuffer, TransitionBatch
from oracles import grid_value_iteration

SMALL = AgentConfig(
    value_lr=1e-3, model_lr=1e-3, model_steps=1, planning_steps=1, model_batch=16,
    planning_batch=16, warmup_steps=10, target_sync=20,
    model_net=NetSpec((8, 8), "tanh", 1), q_net=NetSpec((8,), "tanh"), dtype="float64")


class FixedQ:
    """Stand-in exposing only what ``act`` needs."""

    n_actions = 3

    def __init__(self, values):
        self._v = np.asarray(values, float)

    def values(self, obs, target=False):
        return np.tile(self._v, (len(obs), 1))


def batch(obs, actions, rewards, next_obs, terminals):
    return TransitionBatch(np.asarray(obs), np.asarray(actions), np.asarray(rewards, float),
                           np.asarray(next_obs), np.asarray(terminals, bool),
                           np.arange(len(actions)))


def test_act_argmax_and_ties():
    rng = np.random.default_rng(0)
    assert act(FixedQ([1, 3, 2]), np.zeros(2), AgentMode.TRAINING, 0.0, rng) == 1
    assert greedy(np.array([2.0, 2.0, 1.0])) == 0


def test_act_epsilon_one_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([act(FixedQ([0, 9, 0]), np.zeros(2), AgentMode.TRAINING, 1.0, rng)
                          for _ in range(30_000)], minlength=3)
    assert np.all(np.abs(counts / 30_000 - 1 / 3) < 0.015)


def test_evaluation_mode_ignores_epsilon():
    rng = np.random.default_rng(0)
    assert {act(FixedQ([0, 0, 5]), np.zeros(2), AgentMode.EVALUATION, 1.0, rng)
            for _ in range(200)} == {2}


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.0)
    with pytest.raises(ValueError):
        AgentConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        AgentConfig(target_sync=0)
    with pytest.raises(ValueError, match="dynamics_net"):
        AgentConfig(dynamics_net=NetSpec((64,), "relu", 1))
    with pytest.raises(ValueError, match="model_net"):
        AgentConfig(model_net=NetSpec((64, 64), "relu"))


def test_model_heads_shapes():
    m = WorldModel(2, 3, SMALL, seed=0)
    r, s, t = m.predict(np.zeros((5, 2)), np.array([0, 1, 2, 0, 1]))
    assert r.shape == (5,) and s.shape == (5, 2) and t.shape == (5,)
    assert np.all((t > 0) & (t < 1))
    mg = WorldModel(256, 3, MINIGRID_AGENT, onehot=True, seed=0)
    obs = np.eye(256)[[3, 7]]
    _, probs, _ = mg.predict(obs, np.array([0, 2]))
    assert probs.shape == (2, 256) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_model_update_converges_on_one_point():
    m = WorldModel(2, 3, SMALL, seed=0)
    b = batch(np.tile([0.2, -0.1], (8, 1)), np.ones(8, int), np.full(8, 2.0),
              np.tile([0.25, -0.05], (8, 1)), np.zeros(8))
    first = model_update(m, b)
    assert set(first) == {"dynamics", "reward", "termination"}
    for _ in range(2000):
        last = model_update(m, b)
    assert last["reward"] < 1e-4 < first["reward"]
    assert last["dynamics"] < 1e-6 and last["termination"] < 1e-2


def test_model_update_leaves_q_untouched():
    agent = DynaQAgent(2, 3, SMALL, seed=0)
    before = agent.q.online.params.copy()
    model_update(agent.model, batch(np.zeros((4, 2)), np.zeros(4, int), np.ones(4),
                                    np.zeros((4, 2)), np.zeros(4)))
    assert np.array_equal(before, agent.q.online.params)


class StubModel:
    def __init__(self, r, s, t):
        self.out = (np.asarray(r, float), np.asarray(s, float), np.asarray(t, float))

    def predict(self, obs, actions):
        return self.out


def test_planning_targets_terminal_and_gamma_zero():
    q = QFunction(2, 3, SMALL, seed=0)
    r = np.array([1.5, -0.5])
    s = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(planning_targets(q, r, s, np.ones(2), 0.99), r)
    assert np.array_equal(planning_targets(q, r, s, np.zeros(2), 0.0), r)
    boot = q.values(s, target=True).max(axis=1)
    assert np.allclose(planning_targets(q, r, s, np.zeros(2), 0.5), r + 0.5 * boot)


def test_onehot_targets_take_expectation_over_predicted_states():
    q = QFunction(256, 3, MINIGRID_AGENT, onehot=True, seed=0)
    v = q.target.forward(np.eye(256)).max(axis=1)
    probs = np.zeros((1, 256))
    probs[0, [4, 9]] = [0.25, 0.75]
    y = planning_targets(q, np.zeros(1), probs, np.zeros(1), 0.9)
    assert y[0] == pytest.approx(0.9 * (0.25 * v[4] + 0.75 * v[9]), rel=1e-5)


def test_planning_update_moves_q_towards_target():
    q = QFunction(2, 3, SMALL, seed=0)
    obs = np.zeros((4, 2))
    b = batch(obs, np.zeros(4, int), np.zeros(4), obs, np.zeros(4))
    model = StubModel(np.full(4, 1.0), obs, np.ones(4))
    start = q.values(obs)[0, 0]
    for _ in range(300):
        planning_update(q, model, b, 0.99)
    assert abs(q.values(obs)[0, 0] - 1.0) < abs(start - 1.0)
    assert abs(q.values(obs)[0, 0] - 1.0) < 0.05


def test_sync_target():
    q = QFunction(2, 3, SMALL, seed=0)
    init = q.target.params.copy()
    q.online.params += 0.1
    assert np.array_equal(q.target.params, init)
    sync_target(q)
    x = np.random.default_rng(1).normal(size=(5, 2))
    assert np.array_equal(q.values(x, target=True), q.values(x))
    sync_target(q)
    assert np.array_equal(q.target.params, q.online.params)


def exact_grid_model(env, phase):
    """Model returning true one-step outcomes for one-hot grid states."""
    table = {}
    for i in range(env.n_states):
        s = env.state_from_index(i)
        for a in range(3):
            s2, r, done = env.transition(s, a, phase)
            table[i, a] = (env.state_index(s2), r, done)

    class Exact:
        def predict(self, obs, actions):
            idx = np.asarray(obs).argmax(axis=1)
            out = [table[int(i), int(a)] for i, a in zip(idx, actions)]
            s2 = np.zeros((len(out), env.n_states))
            s2[np.arange(len(out)), [o[0] for o in out]] = 1.0
            return (np.array([o[1] for o in out]), s2,
                    np.array([float(o[2]) for o in out]))
    return Exact()


@pytest.mark.slow
def test_planning_with_exact_model_recovers_optimal_policy():
    env = MiniGridLoCA()
    gamma = 0.9
    states = [s for s in env.nonterminal_states()]
    idx = np.array([env.state_index(s) for s in states])

    def successor(i, a):
        s = env.state_from_index(i)
        if env.is_terminal_cell(s.col, s.row):
            return i, 0.0, True
        s2, r, done = env.transition(s, a, Phase.A)
        return env.state_index(s2), r, done

    _, q_star = grid_value_iteration(env.n_states, successor, gamma)
    cfg = AgentConfig(gamma=gamma, value_lr=1e-3, planning_batch=128, target_sync=200,
                      q_net=NetSpec((64, 64), "relu"), dtype="float64")
    q = QFunction(env.n_states, 3, cfg, onehot=True, seed=0)
    model = exact_grid_model(env, Phase.A)
    pairs = np.array([(i, a) for i in idx for a in range(3)])
    eye = np.eye(env.n_states)
    rng = np.random.default_rng(0)
    for step in range(1, 100_001):
        rows = pairs[rng.integers(len(pairs), size=128)]
        b = batch(eye[rows[:, 0]], rows[:, 1], np.zeros(128), eye[rows[:, 0]], np.zeros(128))
        planning_update(q, model, b, gamma)
        if step % cfg.target_sync == 0:
            q.sync_target()
    learned = q.values(eye[idx])
    optimal = np.isclose(q_star[idx], q_star[idx].max(axis=1, keepdims=True), atol=1e-9)
    match = optimal[np.arange(len(idx)), learned.argmax(axis=1)]
    assert match.mean() >= 0.95


def test_reward_model_learns_true_rewards_on_buffer_states():
    env = MiniGridLoCA()
    buf = FIFOBuffer(10_000, (256,), np.uint8)
    for s in env.nonterminal_states():
        for a in range(3):
            s2, r, done = env.transition(s, a, Phase.A)
            buf.insert(env.encode(s), a, r, env.encode(s2), done)
    model = WorldModel(256, 3, AgentConfig(model_lr=1e-3, model_net=NetSpec((64, 64), "relu", 1),
                                           dynamics_net=NetSpec((32, 32), "relu", 1)),
                       onehot=True, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(3000):
        model.update(buf.sample(128, rng))
    b = buf.batch()
    r, _, _ = model.predict(b.obs, b.actions)
    assert np.max(np.abs(r - b.rewards)) < 0.25


def test_warmup_acts_randomly_without_updates():
    env = MountainCarLoCA()
    agent = DynaQAgent(2, 3, SMALL, seed=0)
    buf = FIFOBuffer(1000, (2,))
    loop = TrainingLoop(agent, env, buf, np.random.default_rng(0))
    before = [n.params.copy() for n in agent.networks().values()]
    for _ in range(SMALL.warmup_steps):
        loop.step()
    assert all(np.array_equal(b, n.params) for b, n in zip(before, agent.networks().values()))
    assert len(buf) == SMALL.warmup_steps and agent.updates == 0
    loop.step()
    assert agent.updates == 1 and len(buf) == SMALL.warmup_steps + 1


def test_target_syncs_on_schedule():
    env = MountainCarLoCA()
    agent = DynaQAgent(2, 3, SMALL, seed=0)
    loop = TrainingLoop(agent, env, FIFOBuffer(1000, (2,)), np.random.default_rng(0))
    for _ in range(SMALL.warmup_steps + SMALL.target_sync - 1):
        loop.step()
    assert not np.array_equal(agent.q.target.params, agent.q.online.params)
    loop.step()
    assert np.array_equal(agent.q.target.params, agent.q.online.params)


def test_evaluation_is_pure():
    env = MountainCarLoCA()
    agent = DynaQAgent(2, 3, SMALL, seed=0)
    buf = FIFOBuffer(1000, (2,))
    loop = TrainingLoop(agent, env, buf, np.random.default_rng(0))
    for _ in range(40):
        loop.step()
    params = [n.params.copy() for n in agent.networks().values()]
    snapshot = buf.batch()
    evaluate(agent, MountainCarLoCA(Phase.B), 2, 0.99, np.random.default_rng(1))
    assert agent.mode is AgentMode.TRAINING
    assert all(np.array_equal(p, n.params) for p, n in zip(params, agent.networks().values()))
    after = buf.batch()
    assert all(np.array_equal(x, y) for x, y in zip(snapshot, after))
    agent.mode = AgentMode.EVALUATION
    with pytest.raises(RuntimeError):
        agent.train_step(buf, np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        loop.step()


def test_truncation_is_stored_as_non_terminal():
    env = MiniGridLoCA()
    env.max_steps = 3
    agent = DynaQAgent(256, 3, MINIGRID_AGENT, onehot=True, seed=0)
    buf = FIFOBuffer(100, (256,), np.uint8)
    loop = TrainingLoop(agent, env, buf, np.random.default_rng(0))
    env.reset(ResetMode.EVAL, loop.rng)
    loop.obs = env.reset_to(env.state_from_index(4 * 27))  # (3, 3) facing north
    for _ in range(3):
        out = loop.step()
    assert out.truncated and not buf.batch().terminals.any()


def test_agent_save_load_round_trip(tmp_path):
    agent = DynaQAgent(2, 3, SMALL, seed=0)
    buf = FIFOBuffer(100, (2,))
    loop = TrainingLoop(agent, MountainCarLoCA(), buf, np.random.default_rng(0))
    for _ in range(30):
        loop.step()
    path = agent.save(tmp_path / "agent.json")
    again = DynaQAgent.load(path)
    for name, net in agent.networks().items():
        assert np.array_equal(net.params, again.networks()[name].params)
    assert again.updates == agent.updates
    assert again.optimizers()["q"].t == agent.optimizers()["q"].t
