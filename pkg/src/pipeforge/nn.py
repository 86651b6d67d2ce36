"""Dense networks with hand-written backprop, Adam, and a small checkpoint format.

Every network in the package (embedding, key, query, attribute identifiers,
classifier operators) is a :class:`DenseNet`.  Inputs may be a single vector
or a batch of row vectors; gradients for a batch are summed over rows.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_HEADER = "PIPEFORGE-NET-v1"
PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


class EmptyCandidateError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class DenseNet:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"bad layer sizes {self.layer_sizes}")
        if self.hidden_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("linear", "softmax"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[k + 1], self.layer_sizes[k]):
                raise ShapeError(f"layer {k}: weight shape {w.shape}")
            if b.shape != (self.layer_sizes[k + 1],):
                raise ShapeError(f"layer {k}: bias shape {b.shape}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_sizes, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        self.hidden_activation, self.output_activation)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class GradientBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # gradient w.r.t. the network input, same shape as the input
    input_grad: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle([a + b for a, b in zip(self.weights, other.weights)],
                              [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, c: float) -> "GradientBundle":
        return GradientBundle([c * w for w in self.weights], [c * b for b in self.biases])

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "GradientBundle":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float = 3e-4, **kw) -> "AdamState":
        params = net.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   learning_rate=learning_rate, **kw)


def init_net(layer_sizes, rng: np.random.Generator, hidden_activation="tanh",
             output_activation="linear") -> DenseNet:
    """Weights ~ N(0, 1/sqrt(fan_in)) (the std), biases zero."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(layer_sizes), weights, biases, hidden_activation, output_activation)


def zero_net(layer_sizes, hidden_activation="tanh", output_activation="linear") -> DenseNet:
    return DenseNet(tuple(layer_sizes),
                    [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
                    [np.zeros(o) for o in layer_sizes[1:]],
                    hidden_activation, output_activation)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(z.dtype)


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax over the last axis; ``-inf`` entries map to exactly 0."""
    s = np.asarray(scores, dtype=float)
    if np.isnan(s).any() or np.isposinf(s).any():
        raise ValueError("scores must be finite or -inf")
    top = s.max(axis=-1, keepdims=True)
    if np.isneginf(top).any():
        raise EmptyCandidateError("every score is -inf; nothing to choose from")
    e = np.exp(s - top)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x, n_in):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != n_in:
        raise ShapeError(f"expected input width {n_in}, got shape {x.shape}")
    return xb, single


def forward(net: DenseNet, x, cache: list | None = None) -> np.ndarray:
    """Evaluate ``net`` on a vector or a batch of row vectors.

    If ``cache`` is a list, the per-layer (pre-activation, activation) pairs are
    appended to it for a later :func:`backward` call.
    """
    a, single = _as_batch(x, net.n_in)
    if cache is not None:
        cache.append((None, a))
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        if k < last:
            a = _act(net.hidden_activation, z)
        elif net.output_activation == "softmax":
            a = softmax(z)
        else:
            a = z
        if cache is not None:
            cache.append((z, a))
    return a[0] if single else a


def backward(net: DenseNet, x, loss_grad, cache: list | None = None) -> GradientBundle:
    """Backpropagate ``loss_grad`` (dLoss/dOutput) to parameters and input.

    For a batch, parameter gradients are summed over rows and ``input_grad``
    keeps one row per input.
    """
    xb, single = _as_batch(x, net.n_in)
    g = np.asarray(loss_grad, dtype=float)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (xb.shape[0], net.n_out):
        raise ShapeError(f"loss_grad shape {np.shape(loss_grad)} does not match output")
    if cache is None:
        cache = []
        forward(net, xb, cache)
    n_layers = len(net.weights)
    dW = [None] * n_layers
    db = [None] * n_layers
    z, a = cache[-1]
    if net.output_activation == "softmax":
        # Jacobian-vector product of softmax
        g = a * (g - np.sum(g * a, axis=1, keepdims=True))
    for k in range(n_layers - 1, -1, -1):
        a_prev = cache[k][1]
        dW[k] = g.T @ a_prev
        db[k] = g.sum(axis=0)
        g = g @ net.weights[k]
        if k > 0:
            z_prev, _ = cache[k]
            g = g * _act_grad(net.hidden_activation, z_prev, a_prev)
    return GradientBundle(dW, db, g[0] if single else g)


def adam_step(net: DenseNet, grads: GradientBundle, state: AdamState) -> tuple[DenseNet, AdamState]:
    """One bias-corrected Adam descent step; returns new net and state."""
    garrs = grads.arrays()
    params = net.parameters()
    if len(garrs) != len(params) or any(g.shape != p.shape for g, p in zip(garrs, params)):
        raise ShapeError("gradient bundle does not match network")
    if not all(np.isfinite(g).all() for g in garrs):
        raise NonFiniteGradientError("non-finite gradient; halting update")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, p_new = [], [], []
    for p, g, m, v in zip(params, garrs, state.first_moment, state.second_moment):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p_new.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        m_new.append(m)
        v_new.append(v)
    new_net = DenseNet(net.layer_sizes, p_new[0::2], p_new[1::2],
                       net.hidden_activation, net.output_activation)
    new_state = AdamState(m_new, v_new, t, state.learning_rate, b1, b2, state.epsilon)
    return new_net, new_state


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=float)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-math.log(max(probs[label], PROB_CLAMP)))


def categorical_sample(probs, rng: np.random.Generator) -> int:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("not a probability vector")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    # searchsorted may land on a zero-probability trailing entry through rounding
    while p[idx] == 0.0:
        idx -= 1
    return idx


def numerical_gradient(f, arrays: list[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f()
            flat[i] = old - step
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def param_checksum(*nets: DenseNet) -> str:
    h = hashlib.sha256()
    for net in nets:
        h.update(repr(net.layer_sizes).encode())
        for p in net.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()


def _net_to_dict(net: DenseNet) -> dict:
    return {
        "layer_sizes": list(net.layer_sizes),
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
        "weights": [w.reshape(-1).tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def _net_from_dict(d: dict) -> DenseNet:
    sizes = d["layer_sizes"]
    weights = [np.array(w, dtype=float).reshape(o, i)
               for w, i, o in zip(d["weights"], sizes[:-1], sizes[1:])]
    biases = [np.array(b, dtype=float) for b in d["biases"]]
    return DenseNet(tuple(sizes), weights, biases, d["hidden_activation"], d["output_activation"])


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, nets: dict[str, DenseNet], meta: dict | None = None) -> None:
    """Write named networks as a header line followed by one JSON document.

    JSON floats round-trip exactly, so reloaded parameters are bit-identical.
    """
    body = {"meta": meta or {}, "nets": {k: _net_to_dict(v) for k, v in nets.items()}}
    atomic_write_text(path, CHECKPOINT_HEADER + "\n" + json.dumps(body, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_HEADER:
            raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint (header {header!r})")
        body = json.loads(fh.read())
    return {k: _net_from_dict(v) for k, v in body["nets"].items()}, body["meta"]


def fit_supervised(net: DenseNet, x_train, y_train, x_val, y_val, rng: np.random.Generator,
                   epochs: int = 60, batch_size: int = 64, learning_rate: float = 1e-3,
                   patience: int = 10) -> tuple[DenseNet, float, list[float]]:
    """Minibatch Adam on mean cross-entropy for a softmax-output net.

    Stops after ``patience`` epochs without validation improvement; returns the
    best-validation network, its validation accuracy and the per-epoch history.
    """
    if net.output_activation != "softmax":
        raise ValueError("fit_supervised needs a softmax-output network")
    x_train, y_train = np.asarray(x_train, float), np.asarray(y_train, int)
    x_val, y_val = np.asarray(x_val, float), np.asarray(y_val, int)
    state = AdamState.for_net(net, learning_rate)
    best, best_acc, stale, history = net.copy(), -1.0, 0, []
    n = len(x_train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache: list = []
            probs = forward(net, x_train[idx], cache)
            # dL/dp for mean cross-entropy; softmax backward turns it into p - onehot
            g = np.zeros_like(probs)
            rows = np.arange(len(idx))
            g[rows, y_train[idx]] = -1.0 / np.maximum(probs[rows, y_train[idx]], PROB_CLAMP)
            grads = backward(net, x_train[idx], g / len(idx), cache)
            net, state = adam_step(net, grads, state)
        acc = float(np.mean(np.argmax(forward(net, x_val), axis=1) == y_val))
        history.append(acc)
        if acc > best_acc:
            best, best_acc, stale = net.copy(), acc, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best, best_acc, history
