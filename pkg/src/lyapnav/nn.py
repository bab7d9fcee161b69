"""Small fully-connected networks with hand-written backprop.

Everything here is plain numpy. Networks are value objects: forward and
gradients never mutate state, so they can be shared read-only. Training code
owns a single mutable copy per network.
"""

import hashlib
import json

import numpy as np

CHECKPOINT_VERSION = 1

OUTPUT_ACTIVATIONS = ("identity", "tanh", "softplus")


class ShapeError(ValueError):
    """Input or parameter shapes do not match the network architecture."""


class CheckpointError(RuntimeError):
    """A parameter file is malformed or does not match the architecture."""


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Mlp:
    """Feed-forward net, tanh hidden layers, configurable output activation."""

    def __init__(self, layer_sizes, output_activation="identity", rng=None):
        if len(layer_sizes) < 2 or any(n <= 0 for n in layer_sizes):
            raise ShapeError(f"bad layer sizes {layer_sizes}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.output_activation = output_activation
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.biases.append(rng.uniform(-bound, bound, size=n_out))

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def params(self):
        """Flat parameter list [W0, b0, W1, b1, ...] (live references)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params):
        expected = self.params()
        if len(params) != len(expected):
            raise ShapeError("parameter count mismatch")
        for i, (p, q) in enumerate(zip(params, expected)):
            p = np.asarray(p, dtype=float)
            if p.shape != q.shape:
                raise ShapeError(f"parameter {i} shape {p.shape} != {q.shape}")
        for i in range(len(self.weights)):
            self.weights[i] = np.array(params[2 * i], dtype=float)
            self.biases[i] = np.array(params[2 * i + 1], dtype=float)

    def copy(self):
        other = Mlp(self.layer_sizes, self.output_activation)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} incompatible with in_dim {self.in_dim}")
        return x, squeeze

    def _forward_cached(self, x):
        """Returns (pre-activations, post-activations) per layer, input included."""
        acts = [x]
        pres = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pres.append(z)
            if i < last:
                h = np.tanh(z)
            elif self.output_activation == "tanh":
                h = np.tanh(z)
            elif self.output_activation == "softplus":
                h = _softplus(z)
            else:
                h = z
            acts.append(h)
        return pres, acts

    def forward(self, x):
        x, squeeze = self._check_input(x)
        _, acts = self._forward_cached(x)
        out = acts[-1]
        return out[0] if squeeze else out

    def gradients(self, x, upstream):
        """Backprop of <upstream, forward(x)> summed over the batch.

        Returns (param_grads, input_grad); param_grads matches params() order,
        input_grad matches the shape of x.
        """
        x, squeeze = self._check_input(x)
        upstream = np.asarray(upstream, dtype=float)
        if squeeze:
            upstream = upstream[None, :]
        if upstream.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"upstream shape {upstream.shape} incompatible")
        pres, acts = self._forward_cached(x)
        last = len(self.weights) - 1
        if self.output_activation == "tanh":
            delta = upstream * (1.0 - acts[-1] ** 2)
        elif self.output_activation == "softplus":
            delta = upstream * _sigmoid(pres[-1])
        else:
            delta = upstream
        grads = [None] * (2 * len(self.weights))
        for i in range(last, -1, -1):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        input_grad = delta
        return grads, (input_grad[0] if squeeze else input_grad)

    def input_gradients(self, x, upstream):
        return self.gradients(x, upstream)[1]


class AdamState:
    """Per-network Adam moments; step counter increments on every update."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state, params, grads):
    """One Adam update, in place on params. Returns params for convenience."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: parameter/gradient count mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: grad {i} shape {g.shape} != {p.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def polyak_update(target, online, tau):
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if target.layer_sizes != online.layer_sizes:
        raise ShapeError("polyak_update: architecture mismatch")
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for i in range(len(target.weights)):
        target.weights[i] = (1 - tau) * target.weights[i] + tau * online.weights[i]
        target.biases[i] = (1 - tau) * target.biases[i] + tau * online.biases[i]


def check_finite(net, context=""):
    for p in net.params():
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"non-finite parameters detected {context}")


def save_params(net, path):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": net.layer_sizes,
        "hidden_activation": "tanh",
        "output_activation": net.output_activation,
        "weights": [np.asarray(w).tolist() for w in net.weights],
        "biases": [np.asarray(b).tolist() for b in net.biases],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_params(path, net=None):
    """Load a checkpoint. If net is given, its architecture must match."""
    try:
        with open(path) as f:
            doc = json.load(f)
        layer_sizes = list(doc["layer_sizes"])
        output_activation = doc["output_activation"]
        weights = [np.asarray(w, dtype=float) for w in doc["weights"]]
        biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    if net is None:
        net = Mlp(layer_sizes, output_activation)
    elif net.layer_sizes != layer_sizes or net.output_activation != output_activation:
        raise CheckpointError(
            f"checkpoint architecture {layer_sizes}/{output_activation} does not "
            f"match network {net.layer_sizes}/{net.output_activation}"
        )
    expected = list(zip(layer_sizes[:-1], layer_sizes[1:]))
    if len(weights) != len(expected):
        raise CheckpointError("wrong number of layers in checkpoint")
    for (n_in, n_out), w, b in zip(expected, weights, biases):
        if w.shape != (n_in, n_out) or b.shape != (n_out,):
            raise CheckpointError("parameter shapes inconsistent with layer_sizes")
    net.weights = weights
    net.biases = biases
    return net


def params_digest(net):
    """Stable digest of the parameter values, used to pin derived artifacts."""
    h = hashlib.sha256()
    h.update(json.dumps(net.layer_sizes).encode())
    h.update(net.output_activation.encode())
    for p in net.params():
        h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()
