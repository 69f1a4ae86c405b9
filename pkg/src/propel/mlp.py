"""Small MLPs with hand-written backprop and Adam.

The function family for residual actors and critics: affine layers with tanh
hidden units. The output head is either linear (critics) or tanh scaled to
[-r, r] (actors, r = the residual action range). Gradients are computed by
explicit reverse-mode passes and are checked against central finite
differences in the test suite, so no autograd dependency is involved.

Actors default to a zero final layer so a freshly initialized residual is
exactly the zero function; hidden layers use the usual fan-in scaled uniform
init. Neural policies read only the newest raw observation of a window.
"""

from __future__ import annotations

import json

import numpy as np

from .policies import ObservationWindow, Policy


class Mlp:
    """weights[i] has shape (fan_in, fan_out); forward is x @ W + b per layer,
    tanh on all but the last layer. output_scale=None means a linear head,
    otherwise out = output_scale * tanh(z)."""

    def __init__(self, layer_sizes, output_scale, weights, biases):
        assert len(layer_sizes) >= 2
        assert len(weights) == len(biases) == len(layer_sizes) - 1
        self.layer_sizes = list(layer_sizes)
        self.output_scale = None if output_scale is None else float(output_scale)
        self.weights = weights
        self.biases = biases

    @staticmethod
    def init(rng, layer_sizes, output_scale=None, final_scale=None):
        """Fan-in scaled uniform init. final_scale=0.0 zeroes the output layer
        (residual actors start as the zero function); None keeps fan-in
        scaling; any other value bounds the final layer uniformly by it."""
        weights, biases = [], []
        n_layers = len(layer_sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
            if i == n_layers - 1 and final_scale is not None:
                bound = float(final_scale)
            else:
                bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out) if bound else np.zeros(fan_out))
        return Mlp(layer_sizes, output_scale, weights, biases)

    # -- evaluation ---------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        acts = [x]
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            if i < n_layers - 1:
                acts.append(np.tanh(z))
            elif self.output_scale is not None:
                acts.append(np.tanh(z))  # scaled on read-out below
            else:
                acts.append(z)
        out = acts[-1] if self.output_scale is None else self.output_scale * acts[-1]
        return out, acts

    def backward(self, acts, dout: np.ndarray):
        """Reverse pass from dL/dout. Returns (grads, dL/dx) where grads is a
        flat list [dW0, db0, dW1, db1, ...]."""
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        if self.output_scale is not None:
            delta = dout * self.output_scale * (1.0 - acts[-1] ** 2)
        else:
            delta = np.asarray(dout, dtype=np.float64)
        for i in range(n_layers - 1, -1, -1):
            a_in = acts[i]
            grads[2 * i] = a_in.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
            else:
                delta = delta @ self.weights[i].T
        return grads, delta

    # -- parameter plumbing ---------------------------------------------------
    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def param_max_abs(self) -> float:
        return max(float(np.max(np.abs(p))) for p in self.params)

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_sizes,
            self.output_scale,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
        )

    def apply_grads(self, grads, lr: float) -> None:
        for p, g in zip(self.params, grads):
            p -= lr * g


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    for tp, op in zip(target.params, online.params):
        tp *= 1.0 - tau
        tp += tau * op


def grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


class Adam:
    def __init__(self, net: Mlp, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.params]
        self.v = [np.zeros_like(p) for p in net.params]

    def step(self, net: Mlp, grads) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(net.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class MlpPolicy(Policy):
    """Policy handle around an actor network fed the newest observation."""

    def __init__(self, net: Mlp):
        self.net = net

    def act(self, window: ObservationWindow) -> np.ndarray:
        return self.net.forward(window.newest[None, :])[0]

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        return self.net.forward(samples[:, -1, :])


# -- serialization ---------------------------------------------------------------


def mlp_to_json(net: Mlp) -> str:
    return json.dumps(
        {
            "format": "mlp",
            "layer_sizes": net.layer_sizes,
            "output_scale": net.output_scale,
            "weights": [W.tolist() for W in net.weights],
            "biases": [b.tolist() for b in net.biases],
        }
    )


def mlp_from_json(text: str) -> Mlp:
    d = json.loads(text)
    assert d.get("format") == "mlp", "not an mlp checkpoint"
    weights = [np.asarray(W, dtype=np.float64) for W in d["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
    net = Mlp(d["layer_sizes"], d["output_scale"], weights, biases)
    for W, b, n_in, n_out in zip(
        weights, biases, d["layer_sizes"][:-1], d["layer_sizes"][1:]
    ):
        assert W.shape == (n_in, n_out) and b.shape == (n_out,), "shape header mismatch"
    return net
