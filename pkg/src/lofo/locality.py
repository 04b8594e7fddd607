"""State-locality functions for the LoFo buffer.

The learned locality is a contrastive embedding ``f``: states one step
apart are pulled together while the summed squared distance to a set of
random states is pushed towards ``beta``. Per record::

    L = ||f(s) - f(s')||^2 + (beta - sum_j ||f(s) - f(n_j)||^2)^2

Distances between embeddings then stand in for temporal reachability.
For MountainCar there is also a handcrafted alternative that rescales the
velocity axis and uses plain Euclidean distance.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .envs import LocaEnv, MCState, ResetMode, mc_decode
from .nn import Adam, DenseNet, load_snapshot, save_snapshot

log = logging.getLogger(__name__)

MC_VELOCITY_SCALE = 150.0


@dataclass
class EmbeddingConfig:
    """Defaults follow the MountainCar embedding setup."""

    hidden: tuple = (64, 64, 64)
    embed_dim: int = 16
    activation: str = "tanh"
    lr: float = 1e-4
    beta: float = 10.0
    num_negatives: int = 128
    batch_size: int = 32
    epochs: int = 5
    collect_steps: int = 100_000

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.num_negatives < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("num_negatives and batch_size must be >= 1, epochs >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)


# dense stand-in for the image encoder when observations are one-hot
MINIGRID_EMBEDDING = EmbeddingConfig(hidden=(64,), activation="relu", collect_steps=25_000)


@dataclass(frozen=True)
class TripleDataset:
    """Records ``(s, s', negatives)`` stored as indices into ``states``.

    ``state_ids`` labels equal observations with equal ids, which is how
    negatives are kept distinct from their own anchor and positive.
    """

    states: np.ndarray       # (M, obs_dim)
    state_ids: np.ndarray    # (M,)
    anchors: np.ndarray      # (R,)
    positives: np.ndarray    # (R,)
    negatives: np.ndarray    # (R, K)

    def __len__(self):
        return len(self.anchors)

    @property
    def num_negatives(self) -> int:
        return self.negatives.shape[1]

    def record(self, i):
        return (self.states[self.anchors[i]], self.states[self.positives[i]],
                self.states[self.negatives[i]])

    def subset(self, rows) -> "TripleDataset":
        return replace(self, anchors=self.anchors[rows], positives=self.positives[rows],
                       negatives=self.negatives[rows])


def collect_random_dataset(env: LocaEnv, steps: int, num_negatives: int,
                           rng: np.random.Generator,
                           mode: ResetMode = ResetMode.TRAIN_PHASE1) -> TripleDataset:
    """Roll out a uniform random policy for ``steps`` observed states.

    Consecutive states of the same episode form (s, s') pairs; episodes end
    on termination or truncation, and pairs never straddle them.
    """
    if steps < 2:
        raise ValueError("need at least two states to form a pair")
    states, anchors = [], []
    obs = env.reset(mode, rng)
    states.append(obs)
    while len(states) < steps:
        out = env.step(int(rng.integers(env.n_actions)))
        anchors.append(len(states) - 1)
        states.append(out.observation)
        if (out.terminal or out.truncated) and len(states) < steps:
            states.append(env.reset(mode, rng))
    states = np.asarray(states, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.int64)
    _, ids = np.unique(states, axis=0, return_inverse=True)
    ids = ids.reshape(-1)
    negatives = _draw_negatives(ids, anchors, anchors + 1, num_negatives, rng)
    return TripleDataset(states, ids, anchors, anchors + 1, negatives)


def _draw_negatives(ids, anchors, positives, k, rng):
    n_states = len(ids)
    if k == 0:
        return np.zeros((len(anchors), 0), np.int64)
    if np.unique(ids).size < 3:
        raise ValueError("need at least three distinct states to draw negatives")
    neg = rng.integers(n_states, size=(len(anchors), k))
    while True:
        bad = (ids[neg] == ids[anchors, None]) | (ids[neg] == ids[positives, None])
        n_bad = int(bad.sum())
        if n_bad == 0:
            return neg
        neg[bad] = rng.integers(n_states, size=n_bad)


def contrastive_terms(anchor, positive, negatives, beta):
    """Per-record loss and its gradients w.r.t. the three embedding groups.

    Shapes: anchor/positive ``(B, d)``, negatives ``(B, K, d)``.
    """
    pull = anchor - positive
    push = anchor[:, None, :] - negatives
    spread = np.einsum("bkd,bkd->b", push, push)
    gap = beta - spread
    loss = np.einsum("bd,bd->b", pull, pull) + gap * gap
    g_pos = -2.0 * pull
    g_neg = (4.0 * gap)[:, None, None] * push
    g_anchor = 2.0 * pull - g_neg.sum(axis=1)
    return loss, g_anchor, g_pos, g_neg


def contrastive_loss(f, record, beta) -> float:
    """Loss of a single ``(s, s', negatives)`` record under embedding ``f``."""
    s, s_next, negatives = record
    a = np.atleast_2d(f(np.atleast_2d(s)))
    p = np.atleast_2d(f(np.atleast_2d(s_next)))
    n = np.asarray(f(np.atleast_2d(negatives)))[None]
    loss, *_ = contrastive_terms(a, p, n, beta)
    return float(loss[0])


def onehot_indices(X):
    """Hot index of each row if ``X`` is a batch of one-hot vectors, else None."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] == 0:
        return None
    idx = X.argmax(axis=1)
    if not (np.all(X[np.arange(len(X)), idx] == 1) and np.count_nonzero(X) == len(X)):
        return None
    return idx


class ContrastiveEmbedding(TransformerMixin, BaseEstimator):
    """Learned locality embedding.

    ``fit`` takes a :class:`TripleDataset`; ``transform`` maps observations
    to embeddings. After fitting, the network is frozen.
    """

    def __init__(self, hidden=(64, 64, 64), embed_dim=16, activation="tanh", lr=1e-4,
                 beta=10.0, batch_size=32, epochs=5, random_state=None):
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.activation = activation
        self.lr = lr
        self.beta = beta
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    @classmethod
    def from_config(cls, config: EmbeddingConfig, random_state=None) -> "ContrastiveEmbedding":
        return cls(config.hidden, config.embed_dim, config.activation, config.lr, config.beta,
                   config.batch_size, config.epochs, random_state)

    def _build(self, in_dim, rng):
        sizes = [in_dim, *self.hidden, self.embed_dim]
        return DenseNet(sizes, self.activation, seed=rng)

    def fit(self, X: TripleDataset, y=None, eval_rows=256):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if len(X) == 0:
            raise ValueError("empty dataset")
        rng = np.random.default_rng(self.random_state)
        net = self._build(X.states.shape[1], rng)
        self._hot = onehot_indices(X.states)
        opt = Adam.for_net(net, self.lr)
        probe = X.subset(np.arange(min(eval_rows, len(X))))
        self.loss_history_ = [self._mean_loss(net, probe)]
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                rows = order[start:start + self.batch_size]
                loss = self._train_batch(net, opt, X, rows)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite contrastive loss at epoch {epoch}, row offset {start}")
            self.loss_history_.append(self._mean_loss(net, probe))
            log.info("embedding epoch %d: probe loss %.4f", epoch + 1, self.loss_history_[-1])
        net.freeze()
        del self._hot
        self.net_ = net
        self.n_features_in_ = X.states.shape[1]
        return self

    def _train_batch(self, net, opt, X, rows):
        b, k = len(rows), X.num_negatives
        idx = np.concatenate([X.anchors[rows], X.positives[rows], X.negatives[rows].ravel()])
        out = self._forward(net, X, idx, cache=True)
        a, p, n = out[:b], out[b:2 * b], out[2 * b:].reshape(b, k, -1)
        loss, ga, gp, gn = contrastive_terms(a, p, n, self.beta)
        net.backward(np.concatenate([ga, gp, gn.reshape(b * k, -1)]))
        opt.step(net.params, net.grad)
        return float(loss.sum())

    def _mean_loss(self, net, X):
        b = len(X)
        a = self._forward(net, X, X.anchors)
        p = self._forward(net, X, X.positives)
        n = self._forward(net, X, X.negatives.ravel()).reshape(b, X.num_negatives, -1)
        return float(contrastive_terms(a, p, n, self.beta)[0].mean())

    def _forward(self, net, X, rows, cache=False):
        # one-hot datasets take the row-gather path; results are identical
        if self._hot is not None:
            return net.forward(self._hot[rows], cache=cache, onehot=True)
        return net.forward(X.states[rows], cache=cache)

    def transform(self, X):
        check_is_fitted(self, "net_")
        hot = onehot_indices(X)
        if hot is not None and X.shape[1] == self.net_.in_dim:
            return self.net_.forward(hot, cache=False, onehot=True)
        return self.net_.forward(np.asarray(X, dtype=np.float64), cache=False)

    def __call__(self, X):
        return self.transform(X)

    def distance(self, o1, o2):
        return distance(self, o1, o2)

    def save(self, path, meta=None):
        check_is_fitted(self, "net_")
        header = {"estimator": self.get_params(), "loss_history": self.loss_history_}
        header.update(meta or {})
        return save_snapshot(path, {"embedding": self.net_}, meta=header)

    @classmethod
    def load(cls, path) -> "ContrastiveEmbedding":
        nets, _, meta = load_snapshot(path)
        params = dict(meta["estimator"])
        params["hidden"] = tuple(params["hidden"])
        est = cls(**params)
        est.net_ = nets["embedding"]
        est.net_.freeze()
        est.loss_history_ = meta.get("loss_history", [])
        est.n_features_in_ = est.net_.in_dim
        return est


def train_embedding(dataset: TripleDataset, config: EmbeddingConfig,
                    rng=None) -> ContrastiveEmbedding:
    """Fit and freeze a contrastive embedding on ``dataset``."""
    seed = rng if not isinstance(rng, np.random.Generator) else int(rng.integers(2**63 - 1))
    return ContrastiveEmbedding.from_config(config, random_state=seed).fit(dataset)


def distance(f, o1, o2):
    """``||f(o1) - f(o2)||``; broadcasts over leading batch dimensions."""
    e1 = np.asarray(f(np.atleast_2d(o1)))
    e2 = np.asarray(f(np.atleast_2d(o2)))
    d = np.linalg.norm(e1 - e2, axis=-1)
    return float(d[0]) if np.ndim(o1) == 1 and np.ndim(o2) == 1 else d


def handcrafted_mc_distance(s1: MCState, s2: MCState) -> float:
    """Euclidean distance after stretching velocity by sqrt(150)."""
    dx = s1[0] - s2[0]
    dv = s1[1] - s2[1]
    return float(np.sqrt(dx * dx + MC_VELOCITY_SCALE * dv * dv))


class HandcraftedMCLocality(TransformerMixin, BaseEstimator):
    """Maps normalized MountainCar observations to ``(x, sqrt(150) v)``.

    Euclidean distance in the output space equals
    :func:`handcrafted_mc_distance` on the underlying states. Stateless;
    ``fit`` only records the input width.
    """

    embed_dim = 2

    def fit(self, X=None, y=None):
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        x, v = mc_decode(np.atleast_2d(X))
        return np.stack([x, np.sqrt(MC_VELOCITY_SCALE) * v], axis=-1)

    def __call__(self, X):
        return self.transform(X)


def config_dict(config: EmbeddingConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d


__all__ = [
    "ContrastiveEmbedding", "EmbeddingConfig", "HandcraftedMCLocality", "MINIGRID_EMBEDDING",
    "TripleDataset", "collect_random_dataset", "config_dict", "contrastive_loss",
    "contrastive_terms", "distance", "handcrafted_mc_distance", "train_embedding",
]
