"""Small tanh MLPs with hand-written backprop, Adam and Polyak averaging.

Inputs may be a single vector or an array with any number of leading batch
dimensions; gradients are summed over all batch entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Mlp:
    layer_sizes: list
    weights: list  # weights[l] has shape (in, out)
    biases: list

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator) -> "Mlp":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_sizes), weights, biases)

    @classmethod
    def zeros(cls, layer_sizes) -> "Mlp":
        pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        return cls(list(layer_sizes), [np.zeros(p) for p in pairs], [np.zeros(p[1]) for p in pairs])

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        sizes = [int(s) for s in doc["layer_sizes"]]
        weights = [np.array(w, dtype=float).reshape(i, o)
                   for w, i, o in zip(doc["weights"], sizes[:-1], sizes[1:])]
        return cls(sizes, weights, [np.array(b, dtype=float) for b in doc["biases"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class GradientSet:
    weights: list
    biases: list

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scale(self, factor: float) -> "GradientSet":
        return GradientSet([w * factor for w in self.weights], [b * factor for b in self.biases])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.params())))


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.layer_sizes[0]}")
    return x.reshape(-1, x.shape[-1]), x.shape[:-1]


def _activations(net: Mlp, x: np.ndarray) -> list:
    acts = [x]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w + b
        acts.append(z if i == last else np.tanh(z))
    return acts


def mlp_forward(net: Mlp, x) -> np.ndarray:
    x, lead = _as_batch(net, x)
    return _activations(net, x)[-1].reshape(lead + (net.layer_sizes[-1],))


def mlp_activations(net: Mlp, x) -> list:
    """Every layer's output for a 2-D batch; reusable by :func:`mlp_backward`."""
    return _activations(net, _as_batch(net, x)[0])


def mlp_backward(net: Mlp, x, output_grad, acts: list | None = None) -> GradientSet:
    """Gradient of sum(output * output_grad) w.r.t. every parameter.

    ``acts`` may carry the activations from :func:`mlp_activations` on the
    same 2-D input to skip the forward pass.
    """
    x, lead = _as_batch(net, x)
    g = np.asarray(output_grad, dtype=float)
    if g.shape != lead + (net.layer_sizes[-1],):
        raise ValueError(f"output_grad shape {g.shape} does not match network output")
    g = g.reshape(x.shape[0], -1)
    if acts is None:
        acts = _activations(net, x)
    n_layers = len(net.weights)
    dw = [None] * n_layers
    db = [None] * n_layers
    delta = g
    for i in range(n_layers - 1, -1, -1):
        dw[i] = acts[i].T @ delta
        db[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (1.0 - acts[i] ** 2)
    return GradientSet(dw, db)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])

    def to_dict(self) -> dict:
        return {"m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
                "step": self.step}

    @classmethod
    def from_dict(cls, doc: dict, like) -> "AdamState":
        shape = [np.shape(p) for p in like]
        return cls([np.array(a, dtype=float).reshape(s) for a, s in zip(doc["m"], shape)],
                   [np.array(a, dtype=float).reshape(s) for a, s in zip(doc["v"], shape)],
                   int(doc["step"]))


def adam_update(params: list, grads: list, state: AdamState, lr: float,
                clip_norm: float | None = None) -> None:
    """In-place Adam step on a flat list of arrays."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    if clip_norm is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total > clip_norm:
            grads = [g * (clip_norm / total) for g in grads]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(net: Mlp, grads: GradientSet, state: AdamState, lr: float,
              clip_norm: float | None = None) -> tuple[Mlp, AdamState]:
    adam_update(net.params(), grads.params(), state, lr, clip_norm)
    return net, state


def polyak_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """target <- (1 - tau) * target + tau * online, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    if list(target.layer_sizes) != list(online.layer_sizes):
        raise ValueError("architecture mismatch between target and online networks")
    for t, o in zip(target.params(), online.params()):
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
    return target
