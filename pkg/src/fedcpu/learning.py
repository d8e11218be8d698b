"""Local training, datasets, partitioning, and the error-free aggregation baseline.

Models are desk-scale stand-ins for large networks: a multinomial softmax
classifier (default) and a one-hidden-layer tanh MLP.  Both expose their
parameters as a single flat vector, which is what travels over the air.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .encoding import LocalUpdate
from .errors import ConfigurationError


@dataclass
class TrainingConfig:
    """Local-update schedule: tau SGD steps of size batch_size at rate mu_t.

    The effective rate at round t is learning_rate * lr_decay**t.
    """

    tau: int = 3
    learning_rate: float = 0.01
    lr_decay: float = 1.0
    batch_size: int = 100

    def __post_init__(self) -> None:
        if self.tau < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("tau, batch_size must be >= 1 and learning_rate > 0")

    def rate_at(self, t: int) -> float:
        return self.learning_rate * self.lr_decay**t


@dataclass
class ShardedDataset:
    """Disjoint per-device training shards."""

    shards: list[tuple[np.ndarray, np.ndarray]]
    num_classes: int
    feature_dim: int


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


class SoftmaxModel:
    """Multinomial logistic regression on a flat parameter vector."""

    kind = "softmax_linear"

    def __init__(self, feature_dim: int, num_classes: int):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.num_params = num_classes * (feature_dim + 1)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        # The objective is convex; the zero model is the conventional start.
        return np.zeros(self.num_params)

    def _unpack(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c, d = self.num_classes, self.feature_dim
        return w[: c * d].reshape(c, d), w[c * d :]

    def logits(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        weights, bias = self._unpack(w)
        return x @ weights.T + bias

    def loss(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        logp = _log_softmax(self.logits(w, x))
        return float(-np.mean(logp[np.arange(len(y)), y]))

    def grad(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        probs = np.exp(_log_softmax(self.logits(w, x)))
        probs[np.arange(len(y)), y] -= 1.0
        probs /= len(y)
        return np.concatenate([(probs.T @ x).ravel(), probs.sum(axis=0)])

    def predict(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(w, x), axis=1)


class MLPModel:
    """One-hidden-layer tanh network; smooth enough for gradient checks."""

    kind = "mlp_1hidden"

    def __init__(self, feature_dim: int, num_classes: int, hidden_dim: int = 16):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.num_params = hidden_dim * (feature_dim + 1) + num_classes * (hidden_dim + 1)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng(0)
        d, h, c = self.feature_dim, self.hidden_dim, self.num_classes
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), (h, d))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(h), (c, h))
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])

    def _unpack(self, w: np.ndarray):
        d, h, c = self.feature_dim, self.hidden_dim, self.num_classes
        i = 0
        w1 = w[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = w[i : i + h]
        i += h
        w2 = w[i : i + c * h].reshape(c, h)
        i += c * h
        return w1, b1, w2, w[i:]

    def _forward(self, w: np.ndarray, x: np.ndarray):
        w1, b1, w2, b2 = self._unpack(w)
        hidden = np.tanh(x @ w1.T + b1)
        return hidden, hidden @ w2.T + b2

    def logits(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self._forward(w, x)[1]

    def loss(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
        logp = _log_softmax(self.logits(w, x))
        return float(-np.mean(logp[np.arange(len(y)), y]))

    def grad(self, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        w1, b1, w2, b2 = self._unpack(w)
        hidden, logits = self._forward(w, x)
        dz = np.exp(_log_softmax(logits))
        dz[np.arange(len(y)), y] -= 1.0
        dz /= len(y)
        dw2 = dz.T @ hidden
        db2 = dz.sum(axis=0)
        dpre = (dz @ w2) * (1.0 - hidden**2)
        dw1 = dpre.T @ x
        db1 = dpre.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2.ravel(), db2])

    def predict(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(w, x), axis=1)


def build_model(kind: str, feature_dim: int, num_classes: int, hidden_dim: int = 16):
    if kind == "softmax_linear":
        return SoftmaxModel(feature_dim, num_classes)
    if kind == "mlp_1hidden":
        return MLPModel(feature_dim, num_classes, hidden_dim)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def local_sgd_steps(
    model,
    w0: np.ndarray,
    shard: tuple[np.ndarray, np.ndarray],
    cfg: TrainingConfig,
    rng: np.random.Generator,
    device_id: int = 0,
    lr: float | None = None,
) -> LocalUpdate:
    """Run tau mini-batch SGD steps from w0 and return the update w_tau - w0.

    Batches are sampled uniformly with replacement, which keeps the stochastic
    gradients unbiased; a batch size at or above the shard size uses the whole
    shard deterministically (full-batch gradient descent).
    """
    x, y = shard
    if len(x) == 0:
        raise ConfigurationError(f"device {device_id} has an empty shard")
    step = cfg.learning_rate if lr is None else lr
    w = np.array(w0, dtype=float)
    n = len(x)
    for _ in range(cfg.tau):
        if cfg.batch_size >= n:
            bx, by = x, y
        else:
            idx = rng.integers(0, n, size=cfg.batch_size)
            bx, by = x[idx], y[idx]
        w = w - step * model.grad(w, bx, by)
    return LocalUpdate(w - w0, device_id)


def ideal_aggregate(updates: list[LocalUpdate]) -> np.ndarray:
    """Error-free baseline: plain average of the device updates."""
    if not updates:
        raise ConfigurationError("no updates to aggregate")
    stacked = np.stack([np.asarray(u.delta_w, dtype=float) for u in updates])
    if stacked.ndim != 2:
        raise ConfigurationError("updates must all have the same length")
    return stacked.mean(axis=0)


def evaluate(model, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Cross-entropy loss and top-1 accuracy on a held-out set."""
    if len(x) == 0:
        raise ConfigurationError("empty evaluation set")
    loss = model.loss(w, x, y)
    accuracy = float(np.mean(model.predict(w, x) == y))
    return loss, accuracy


def weighted_loss(model, w: np.ndarray, shards: ShardedDataset) -> float:
    """Size-weighted average of per-shard losses (the global training objective)."""
    total = sum(len(x) for x, _ in shards.shards)
    return sum(len(x) / total * model.loss(w, x, y) for x, y in shards.shards)


def make_blobs(
    num_samples: int,
    feature_dim: int,
    num_classes: int,
    cluster_std: float,
    rng: np.random.Generator,
    centers: np.ndarray | None = None,
    center_spread: float = 2.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Balanced Gaussian-blob classification data; returns (X, y, centers).

    Fresh centers are drawn isotropically and rescaled so the minimum pairwise
    center distance equals ``center_spread``: the class geometry varies with
    the rng but the overlap (and thus the task difficulty) stays pinned.
    """
    if centers is None:
        centers = rng.normal(0.0, 1.0, (num_classes, feature_dim))
        if num_classes > 1:
            diffs = centers[:, None, :] - centers[None, :, :]
            dist = np.sqrt((diffs**2).sum(axis=-1))
            closest = dist[np.triu_indices(num_classes, k=1)].min()
            centers = centers * (center_spread / max(closest, 1e-9))
    counts = np.full(num_classes, num_samples // num_classes)
    counts[: num_samples % num_classes] += 1
    y = np.repeat(np.arange(num_classes), counts)
    y = y[rng.permutation(num_samples)]
    x = centers[y] + rng.normal(0.0, cluster_std, (num_samples, feature_dim))
    return x, y, centers


_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def load_idx(path: str) -> np.ndarray:
    """Read an IDX-format array (big-endian magic, dims, raw payload)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise ConfigurationError(f"{path}: not an IDX file")
    dtype = _IDX_DTYPES.get(data[2])
    if dtype is None:
        raise ConfigurationError(f"{path}: unsupported IDX type code 0x{data[2]:02x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(data) < expected:
        raise ConfigurationError(f"{path}: truncated IDX payload")
    return np.frombuffer(data, dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx_dataset(
    images_path: str, labels_path: str, limit: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Load an image/label IDX pair as (flattened floats in [0,1], int labels)."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConfigurationError("image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return x, labels.astype(int)


def partition_dataset(
    x: np.ndarray,
    y: np.ndarray,
    num_devices: int,
    mode: str,
    rng: np.random.Generator,
    alpha: float = 2.0,
) -> ShardedDataset:
    """Split a dataset into disjoint per-device shards.

    ``iid`` permutes and splits into near-equal parts.  ``noniid`` assigns each
    device exactly two labels and divides each label's samples among its
    holders with Dirichlet(alpha)-perturbed proportions, so shards have at most
    two distinct labels and unequal sizes.
    """
    if len(x) < num_devices:
        raise ConfigurationError("fewer samples than devices")
    num_classes = int(y.max()) + 1
    if mode == "iid":
        order = rng.permutation(len(x))
        parts = np.array_split(order, num_devices)
    elif mode == "noniid":
        parts = _noniid_indices(y, num_devices, rng, alpha)
    else:
        raise ConfigurationError(f"unknown partition mode {mode!r}")
    shards = [(x[idx], y[idx]) for idx in parts]
    return ShardedDataset(shards, num_classes, x.shape[1])


def _noniid_indices(
    y: np.ndarray, num_devices: int, rng: np.random.Generator, alpha: float
) -> list[np.ndarray]:
    classes = np.unique(y)
    if 2 * num_devices < len(classes):
        raise ConfigurationError(
            f"{num_devices} devices with two labels each cannot cover {len(classes)} classes"
        )
    slots = np.resize(rng.permutation(classes), 2 * num_devices)
    holders: dict[int, list[int]] = {int(c): [] for c in classes}
    for k in range(num_devices):
        holders[int(slots[2 * k])].append(k)
        holders[int(slots[2 * k + 1])].append(k)
    assigned: list[list[int]] = [[] for _ in range(num_devices)]
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        devices = holders[int(c)]
        props = rng.dirichlet(alpha * np.ones(len(devices)))
        cuts = np.floor(np.cumsum(props)[:-1] * len(idx)).astype(int)
        for device, part in zip(devices, np.split(idx, cuts)):
            assigned[device].extend(int(i) for i in part)
    for k in range(num_devices):
        if not assigned[k]:
            # Steal one same-label sample from the best-stocked device sharing
            # a label, so the two-label invariant survives.
            for c in (int(slots[2 * k]), int(slots[2 * k + 1])):
                donors = [j for j in holders[c] if j != k and len(assigned[j]) > 1]
                if not donors:
                    continue
                donor = max(donors, key=lambda j: len(assigned[j]))
                candidates = [i for i in assigned[donor] if y[i] == c]
                if candidates:
                    assigned[donor].remove(candidates[0])
                    assigned[k].append(candidates[0])
                    break
    return [np.array(sorted(part), dtype=int) for part in assigned]
