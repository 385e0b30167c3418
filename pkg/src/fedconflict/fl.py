"""Federated training mechanics on a synthetic Gaussian-blob task."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .nn import Mlp, NonFiniteError, mlp_activations, mlp_backward, mlp_forward


@dataclass
class TrainConfig:
    batch_size: int = 16
    local_epochs: int = 5
    learning_rate: float = 0.005

    def __post_init__(self):
        if self.batch_size < 1 or self.local_epochs < 1 or self.learning_rate < 0:
            raise ValueError("batch size and epochs must be positive, learning rate non-negative")


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class BlobTask:
    num_classes: int = 4
    dim: int = 8
    train_samples: int = 2000
    test_samples: int = 1000
    center_scale: float = 1.5
    spread: float = 1.0


def make_blobs(task: BlobTask, seed: int):
    """Balanced train/test splits drawn around shared random class centres."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, task.center_scale, size=(task.num_classes, task.dim))

    def draw(n):
        y = np.arange(n) % task.num_classes
        y = y[rng.permutation(n)]
        x = centers[y] + task.spread * rng.normal(size=(n, task.dim))
        return x, y

    x_tr, y_tr = draw(task.train_samples)
    x_te, y_te = draw(task.test_samples)
    return (x_tr, y_tr), (x_te, y_te)


def partition_data(features, labels, num_clients: int, scheme: str = "iid", eta: float = 0.1,
                   rng: np.random.Generator | None = None) -> list:
    """Split a dataset over clients, IID or with Dirichlet(eta) label skew.

    Every client ends up with at least one sample.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < num_clients:
        raise ValueError(f"dataset of {n} samples cannot cover {num_clients} clients")
    rng = rng or np.random.default_rng(0)
    if scheme == "iid":
        parts = np.array_split(rng.permutation(n), num_clients)
    elif scheme == "dirichlet":
        if eta <= 0:
            raise ValueError("eta must be positive")
        buckets = [[] for _ in range(num_clients)]
        for cls in np.unique(labels):
            idx = rng.permutation(np.flatnonzero(labels == cls))
            share = rng.dirichlet(np.full(num_clients, eta))
            cuts = (np.cumsum(share)[:-1] * idx.size).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                buckets[k].extend(chunk.tolist())
        # small eta leaves clients empty; hand each one a sample from the largest client
        for k in range(num_clients):
            if not buckets[k]:
                donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
                buckets[k].append(buckets[donor].pop())
        parts = [np.sort(np.array(b, dtype=int)) for b in buckets]
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    features = np.asarray(features)
    return [ClientDataset(k, features[p], labels[p]) for k, p in enumerate(parts)]


def export_partitions(datasets, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = datasets[0].features.shape[1] if datasets else 0
        writer.writerow(["client_id", "label", *[f"x{i}" for i in range(dim)]])
        for d in datasets:
            for x, y in zip(d.features, d.labels):
                writer.writerow([d.client_id, int(y), *[repr(float(v)) for v in x]])


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss and gradient of the mean loss w.r.t. the logits."""
    n = labels.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    norm = e.sum(axis=1)
    rows = np.arange(n)
    loss = float((np.log(norm).sum() - z[rows, labels].sum()) / n)
    probs = e / norm[:, None]
    probs[rows, labels] -= 1.0
    probs /= n
    return loss, probs


def new_model(task: BlobTask, rng: np.random.Generator, hidden=()) -> Mlp:
    return Mlp.init([task.dim, *hidden, task.num_classes], rng)


def local_train(model: Mlp, data: ClientDataset, cfg: TrainConfig, rng: np.random.Generator,
                history: list | None = None) -> Mlp:
    """Shuffled minibatch SGD on cross-entropy; returns a new model."""
    net = model.copy()
    if cfg.learning_rate == 0:
        return net
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = data.features[idx], data.labels[idx]
            acts = mlp_activations(net, x)
            loss, grad = softmax_cross_entropy(acts[-1], y)
            if not math.isfinite(loss):
                raise NonFiniteError("non-finite training loss")
            grads = mlp_backward(net, x, grad, acts)
            for p, g in zip(net.params(), grads.params()):
                p -= cfg.learning_rate * g
            total += loss * idx.size
        if history is not None:
            history.append(total / n)
    return net


def aggregate(models, sample_counts) -> Mlp:
    """Sample-weighted parameter average."""
    if not models:
        raise ValueError("nothing to aggregate")
    if len(models) != len(sample_counts):
        raise ValueError("one sample count per model is required")
    sizes = list(models[0].layer_sizes)
    if any(list(m.layer_sizes) != sizes for m in models):
        raise ValueError("shape mismatch between models")
    weights = np.asarray(sample_counts, dtype=float)
    weights = weights / weights.sum()
    out = models[0].copy()
    for i, p in enumerate(out.params()):
        p[...] = sum(w * m.params()[i] for w, m in zip(weights, models))
    return out


def evaluate(model: Mlp, features, labels) -> tuple[float, float]:
    """Top-1 accuracy (ties go to the lowest class index) and mean cross-entropy."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty test set")
    logits = mlp_forward(model, features)
    loss, _ = softmax_cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, loss


def server_objective(model: Mlp, datasets) -> tuple[float, int]:
    """F_m = sum_k (n_k / N_m) f_k(w_m) and N_m over the server's clients."""
    total = sum(len(d) for d in datasets)
    value = sum(len(d) / total * evaluate(model, d.features, d.labels)[1] for d in datasets)
    return value, total


def global_objective(server_models, server_datasets) -> float:
    """sum_m (N_m / N) F_m(w_m) with N = sum_m N_m."""
    parts = [server_objective(m, ds) for m, ds in zip(server_models, server_datasets)]
    grand = sum(n for _, n in parts)
    return sum(n / grand * f for f, n in parts)
