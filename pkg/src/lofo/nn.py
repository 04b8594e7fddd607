"""Small numpy multilayer perceptrons with hand-written backprop and Adam.

All parameters of a network live in one flat array; per-layer weight and
bias arrays are views into it. That keeps optimizer updates, target-network
copies and snapshots to single vector operations.

Snapshot format (JSON)::

    {"format": "lofo-nn", "version": 1, "meta": {...},
     "networks": {name: {"sizes": [...], "activation": "tanh",
                         "output_activation": "identity",
                         "inject_after": null, "inject_dim": 0,
                         "dtype": "float64", "params": [...]}},
     "optimizers": {name: {"lr": ..., "beta1": ..., "beta2": ..., "eps": ...,
                           "t": ..., "m": [...], "v": [...]}}}

``params`` is the flat parameter vector: for each layer, the row-major
``(fan_in, fan_out)`` weight matrix followed by the bias.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

SNAPSHOT_FORMAT = "lofo-nn"
SNAPSHOT_VERSION = 1

_ACTIVATIONS = ("tanh", "relu")
_OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


def sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    # keep probabilities out of the subnormal range (where BLAS slows down
    # by an order of magnitude); the floor survives normalizing over up to
    # e^10 classes and moves no probability by more than ~1e-33 in float32
    if np.issubdtype(z.dtype, np.floating):
        np.maximum(z, np.log(np.finfo(z.dtype).tiny) + 10.0, out=z)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


@numba.njit(cache=True, nogil=True)
def _scatter_rows(out, rows, g):
    out[...] = 0.0
    # scalar loops; row-slice arithmetic allocates a temporary per row
    for i in range(g.shape[0]):
        r = rows[i]
        for j in range(g.shape[1]):
            out[r, j] += g[i, j]


class DenseNet:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    ``inject_after=k`` concatenates a side input of width ``inject_dim`` to
    the output of hidden layer ``k`` before it enters the next layer. The
    world-model heads use this to feed the action in mid-network.
    """

    def __init__(self, sizes, activation="tanh", output_activation="identity",
                 inject_after=None, inject_dim=0, seed=None, dtype=np.float64):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if output_activation not in _OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        if inject_after is not None and not 1 <= inject_after <= len(sizes) - 2:
            raise ValueError("inject_after must name a hidden layer")
        self.sizes = sizes
        self.activation = activation
        self.output_activation = output_activation
        self.inject_after = inject_after
        self.inject_dim = int(inject_dim) if inject_after is not None else 0
        self.dtype = np.dtype(dtype)

        self._shapes = []
        for layer in range(len(sizes) - 1):
            fan_in = sizes[layer] + (self.inject_dim if layer == inject_after else 0)
            self._shapes.append((fan_in, sizes[layer + 1]))
        n = sum(i * o + o for i, o in self._shapes)
        self.params = np.zeros(n, dtype=self.dtype)
        self.grad = np.zeros(n, dtype=self.dtype)
        self.W, self.b = self._views(self.params)
        self._gW, self._gb = self._views(self.grad)
        self._cache = None
        self.init_params(seed)

    def _views(self, flat):
        Ws, bs, pos = [], [], 0
        for fan_in, fan_out in self._shapes:
            Ws.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            bs.append(flat[pos:pos + fan_out])
            pos += fan_out
        return Ws, bs

    # pickle copies views as independent arrays; rebuild them from the flat
    # buffers so the optimizer keeps updating what forward() reads
    def __getstate__(self):
        state = self.__dict__.copy()
        for key in ("W", "b", "_gW", "_gb"):
            del state[key]
        state["_cache"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.W, self.b = self._views(self.params)
        self._gW, self._gb = self._views(self.grad)

    def init_params(self, seed=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for W, b in zip(self.W, self.b):
            fan_in, fan_out = W.shape
            if self.activation == "relu":
                limit = np.sqrt(6.0 / fan_in)
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            W[...] = rng.uniform(-limit, limit, size=W.shape)
            b[...] = 0.0

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def param_names(self):
        names = []
        for layer, (fan_in, fan_out) in enumerate(self._shapes):
            names += [f"W{layer}[{i},{j}]" for i in range(fan_in) for j in range(fan_out)]
            names += [f"b{layer}[{j}]" for j in range(fan_out)]
        return names

    def forward(self, x, side=None, cache=True, onehot=False):
        """Run the network on a batch ``x`` (or a single vector).

        With ``onehot=True``, ``x`` holds the hot index of each one-hot input
        row instead of the rows themselves; the first layer becomes a row
        gather. Results are identical to the dense call.
        """
        x = np.asarray(x)
        single = x.ndim == (0 if onehot else 1)
        if single:
            x = x[None]
            if side is not None:
                side = np.asarray(side)[None, :]
        if onehot:
            if x.ndim != 1 or (x.size and (x.min() < 0 or x.max() >= self.sizes[0])):
                raise ValueError("one-hot indices out of range")
        elif x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        if (side is None) != (self.inject_after is None):
            raise ValueError("side input required exactly when inject_after is set")
        h = x if onehot else x.astype(self.dtype, copy=False)
        inputs, outs = [], []
        last = len(self.W) - 1
        for layer, (W, b) in enumerate(zip(self.W, self.b)):
            if layer == self.inject_after:
                h = np.concatenate([h, np.asarray(side, dtype=self.dtype)], axis=1)
            inputs.append(h)
            if layer == 0 and onehot:
                z = W[h]
            else:
                z = h @ W
            z += b
            if layer < last:
                if self.activation == "tanh":
                    h = np.tanh(z, out=z)
                else:
                    h = np.maximum(z, 0.0, out=z)
            elif self.output_activation == "sigmoid":
                h = sigmoid(z)
            elif self.output_activation == "softmax":
                h = softmax(z)
            else:
                h = z
            outs.append(h)
        if cache:
            self._cache = (inputs, outs, single, onehot)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out, wrt_logits=False):
        """Gradient of the loss w.r.t. the flat parameters, given the
        gradient w.r.t. the output of the last cached forward pass.

        ``wrt_logits=True`` means ``grad_out`` is already taken w.r.t. the
        pre-activation of the output layer (e.g. ``p - y`` for sigmoid/BCE
        or softmax/cross-entropy). Returns ``self.grad``, overwritten on
        every call.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a cached forward pass")
        inputs, outs, single, onehot = self._cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if single:
            g = g[None, :]
        last = len(self.W) - 1
        for layer in range(last, -1, -1):
            a = outs[layer]
            if layer < last:
                if self.activation == "tanh":
                    g = g * (1.0 - a * a)
                else:
                    g = g * (a > 0)
            elif wrt_logits or self.output_activation == "identity":
                pass
            elif self.output_activation == "sigmoid":
                g = g * a * (1.0 - a)
            else:
                g = a * (g - np.sum(g * a, axis=1, keepdims=True))
            if layer == 0 and onehot:
                _scatter_rows(self._gW[0], inputs[0], g)
            else:
                np.matmul(inputs[layer].T, g, out=self._gW[layer])
            np.sum(g, axis=0, out=self._gb[layer])
            if layer > 0:
                g = g @ self.W[layer].T
                if layer == self.inject_after:
                    g = g[:, :self.sizes[layer]]
        return self.grad

    def copy_from(self, other: "DenseNet"):
        if other.params.shape != self.params.shape:
            raise ValueError("parameter shapes differ")
        self.params[...] = other.params

    def clone(self) -> "DenseNet":
        twin = DenseNet(self.sizes, self.activation, self.output_activation,
                        self.inject_after, self.inject_dim, seed=0, dtype=self.dtype)
        twin.copy_from(self)
        return twin

    def freeze(self):
        self.params.flags.writeable = False

    @property
    def frozen(self) -> bool:
        return not self.params.flags.writeable

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activation": self.activation,
            "output_activation": self.output_activation,
            "inject_after": self.inject_after,
            "inject_dim": self.inject_dim,
            "dtype": self.dtype.name,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        net = cls(d["sizes"], d["activation"], d["output_activation"],
                  d["inject_after"], d["inject_dim"], seed=0, dtype=d["dtype"])
        params = np.asarray(d["params"], dtype=net.dtype)
        if params.shape != net.params.shape:
            raise ValueError("snapshot parameter count does not match its header")
        net.params[...] = params
        return net


# error_model="numpy" drops the zero-division guard that blocks SIMD
@numba.njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _adam_kernel(params, grads, m, v, b1, b2, step_size, eps_hat):
    one = m.dtype.type(1.0)
    b1 = m.dtype.type(b1)
    b2 = m.dtype.type(b2)
    step_size = m.dtype.type(step_size)
    eps_hat = m.dtype.type(eps_hat)
    tiny = m.dtype.type(np.finfo(m.dtype).tiny)
    zero = m.dtype.type(0.0)
    for i in range(params.size):
        g = grads[i]
        mi = b1 * m[i] + (one - b1) * g
        vi = b2 * v[i] + (one - b2) * g * g
        # moments of long-idle parameters decay geometrically; flushing them
        # before they go subnormal avoids the slow denormal arithmetic path
        mi = mi if abs(mi) >= tiny else zero
        vi = vi if vi >= tiny else zero
        m[i] = mi
        v[i] = vi
        params[i] -= step_size * mi / (np.sqrt(vi) + eps_hat)


class Adam:
    """Adam with bias correction, operating in place on a flat vector."""

    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float64):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)

    @classmethod
    def for_net(cls, net: DenseNet, lr, **kwargs) -> "Adam":
        return cls(net.n_params, lr, dtype=net.dtype, **kwargs)

    def step(self, params, grads):
        # a non-finite sum is cheap to detect; confirm element-wise before failing
        if not np.isfinite(grads.sum()) and not np.all(np.isfinite(grads)):
            raise FloatingPointError("non-finite gradient passed to Adam")
        if grads.shape != self.m.shape or params.shape != self.m.shape:
            raise ValueError("parameter/gradient shape does not match optimizer state")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        # eps rescaled so the update equals m_hat / (sqrt(v_hat) + eps)
        eps_hat = self.eps * np.sqrt(1.0 - b2 ** self.t)
        _adam_kernel(params, grads, self.m, self.v, b1, b2, step_size, eps_hat)
        return params

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "dtype": self.m.dtype.name,
                "m": self.m.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Adam":
        opt = cls(len(d["m"]), d["lr"], d["beta1"], d["beta2"], d["eps"], dtype=d["dtype"])
        opt.t = int(d["t"])
        opt.m[...] = d["m"]
        opt.v[...] = d["v"]
        return opt


def adam_step(params, grads, state: Adam):
    """Functional spelling of ``state.step(params, grads)``."""
    return state.step(params, grads)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_probes: int
    tolerance: float
    kinks: int = 0  # probes skipped because the perturbation crossed a ReLU kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


class GradientCheckError(AssertionError):
    pass


def grad_check(net: DenseNet, loss_fn, x, side=None, tolerance=1e-4, step=1e-5,
               n_probes=None, rng=None, floor=1e-6, raise_on_fail=False) -> GradCheckReport:
    """Compare ``backward`` against central differences.

    ``loss_fn(output) -> (loss, dloss_doutput)``. Probes every parameter
    unless ``n_probes`` is given, in which case a random subset is used.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``. For ReLU nets a
    probe whose perturbation flips any unit on or off has no meaningful
    central difference; it is skipped and counted in ``kinks``.
    """
    if net.dtype != np.float64:
        raise ValueError("gradient checks need a float64 network")
    rng = np.random.default_rng(rng)
    relu = net.activation == "relu" and len(net.W) > 1

    def pattern():
        return np.concatenate([(h > 0).ravel() for h in net._cache[1][:-1]])

    out = net.forward(x, side)
    _, dout = loss_fn(out)
    base = pattern() if relu else None
    analytic = net.backward(dout).copy()

    if n_probes is None or n_probes >= net.n_params:
        probes = np.arange(net.n_params)
    else:
        probes = rng.choice(net.n_params, size=n_probes, replace=False)

    worst, worst_idx, kinks = 0.0, int(probes[0]), 0
    for i in probes:
        orig = net.params[i]
        net.params[i] = orig + step
        lp, _ = loss_fn(net.forward(x, side, cache=relu))
        crossed = relu and not np.array_equal(pattern(), base)
        net.params[i] = orig - step
        lm, _ = loss_fn(net.forward(x, side, cache=relu))
        crossed = crossed or (relu and not np.array_equal(pattern(), base))
        net.params[i] = orig
        if crossed:
            kinks += 1
            continue
        numeric = (lp - lm) / (2 * step)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if rel > worst:
            worst, worst_idx = rel, int(i)
    report = GradCheckReport(float(worst), net.param_names()[worst_idx], len(probes), tolerance,
                             kinks)
    if raise_on_fail and not report.passed:
        raise GradientCheckError(
            f"gradient mismatch at {report.worst_param}: rel error {report.max_rel_error:.3g}")
    return report


def mse(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def save_snapshot(path, networks: dict, optimizers: dict | None = None, meta: dict | None = None):
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "meta": meta or {},
        "networks": {name: net.to_dict() for name, net in networks.items()},
        "optimizers": {name: opt.to_dict() for name, opt in (optimizers or {}).items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    os.replace(tmp, path)
    return path


def load_snapshot(path):
    """Returns ``(networks, optimizers, meta)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"{path} is not a {SNAPSHOT_FORMAT} snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')}")
    nets = {k: DenseNet.from_dict(v) for k, v in doc["networks"].items()}
    opts = {k: Adam.from_dict(v) for k, v in doc.get("optimizers", {}).items()}
    return nets, opts, doc.get("meta", {})
