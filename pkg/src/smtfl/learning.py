"""Small supervised-learning substrate used by the simulator.

Datasets are plain (features, labels) pairs, models are a flat parameter
vector plus shape metadata, and a client's "gradient" is the parameter delta
accumulated over its whole local training phase.  Everything is float64 and
seed-deterministic so whole scenarios replay bit-for-bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

LOGISTIC = "logistic-regression"
MLP = "mlp-1-hidden"
ARCHITECTURES = (LOGISTIC, MLP)


class TrainingError(RuntimeError):
    """Raised when local training produces a non-finite loss."""


def as_gradient(values, dim: int | None = None) -> np.ndarray:
    """Validate and return a flat float64 gradient vector."""
    g = np.asarray(values, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"gradient must be a non-empty flat vector, got shape {g.shape}")
    if dim is not None and g.size != dim:
        raise ValueError(f"gradient has dim {g.size}, expected {dim}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient contains non-finite entries")
    return g


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("labels must be a vector with one entry per feature row")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.n_classes < 1 or y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    rate_iid: float
    seed: int

    def __post_init__(self):
        if self.n_clients < 3:
            raise ValueError("need at least 3 clients")
        if not 0.0 <= self.rate_iid <= 1.0:
            raise ValueError("rate_iid must lie in [0, 1]")


def param_count(arch: str, n_features: int, n_classes: int, n_hidden: int = 0) -> int:
    if arch == LOGISTIC:
        return n_features * n_classes + n_classes
    if arch == MLP:
        return n_features * n_hidden + n_hidden + n_hidden * n_classes + n_classes
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass(frozen=True)
class Model:
    arch: str
    n_features: int
    n_classes: int
    params: np.ndarray = field(repr=False)
    n_hidden: int = 0

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        expected = param_count(self.arch, self.n_features, self.n_classes, self.n_hidden)
        if p.ndim != 1 or p.size != expected:
            raise ValueError(f"{self.arch} expects {expected} parameters, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise ValueError("model parameters must be finite")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def dim(self) -> int:
        return self.params.size

    def with_params(self, params) -> "Model":
        return Model(self.arch, self.n_features, self.n_classes, params, self.n_hidden)

    def unpack(self, params: np.ndarray | None = None) -> tuple[np.ndarray, ...]:
        p = self.params if params is None else params
        f, c, h = self.n_features, self.n_classes, self.n_hidden
        if self.arch == LOGISTIC:
            return p[: f * c].reshape(f, c), p[f * c :]
        i = 0
        w1 = p[i : i + f * h].reshape(f, h); i += f * h
        b1 = p[i : i + h]; i += h
        w2 = p[i : i + h * c].reshape(h, c); i += h * c
        b2 = p[i : i + c]
        return w1, b1, w2, b2

    def logits(self, features: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got shape {x.shape}")
        if self.arch == LOGISTIC:
            w, b = self.unpack(params)
            return x @ w + b
        w1, b1, w2, b2 = self.unpack(params)
        return np.tanh(x @ w1 + b1) @ w2 + b2


def init_model(
    arch: str,
    n_features: int,
    n_classes: int,
    n_hidden: int = 32,
    seed: int = 0,
    scale: float = 0.01,
) -> Model:
    """Small random initialisation (zeros are fine for logistic regression but not the MLP)."""
    if arch == LOGISTIC:
        n_hidden = 0
    rng = np.random.default_rng(seed)
    n = param_count(arch, n_features, n_classes, n_hidden)
    return Model(arch, n_features, n_classes, rng.normal(0.0, scale, n), n_hidden)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(model: Model, params: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. params."""
    n = x.shape[0]
    onehot = np.zeros((n, model.n_classes))
    onehot[np.arange(n), y] = 1.0
    if model.arch == LOGISTIC:
        w, b = model.unpack(params)
        z = x @ w + b
        p = _softmax(z)
        loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
        dz = (p - onehot) / n
        return loss, np.concatenate([(x.T @ dz).ravel(), dz.sum(axis=0)])
    w1, b1, w2, b2 = model.unpack(params)
    a = np.tanh(x @ w1 + b1)
    z = a @ w2 + b2
    p = _softmax(z)
    loss = -np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None)))
    dz = (p - onehot) / n
    da = (dz @ w2.T) * (1.0 - a**2)
    return loss, np.concatenate(
        [(x.T @ da).ravel(), da.sum(axis=0), (a.T @ dz).ravel(), dz.sum(axis=0)]
    )


def local_train(
    model: Model,
    shard: Dataset,
    epochs_local: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> np.ndarray:
    """Run plain minibatch SGD and return params_after - params_before.

    The input model is left untouched.  Batch order is drawn from ``seed``.
    """
    if len(shard) == 0:
        raise ValueError("empty shard")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if epochs_local < 1 or batch_size < 1:
        raise ValueError("epochs_local and batch_size must be >= 1")
    if shard.n_features != model.n_features:
        raise ValueError("shard feature count does not match the model")
    rng = np.random.default_rng(seed)
    params = model.params.copy()
    n = len(shard)
    for epoch in range(epochs_local):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            loss, grad = loss_and_grad(model, params, shard.features[idx], shard.labels[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(
                    f"non-finite loss at local epoch {epoch}, batch {b} (samples {idx[:5].tolist()}...)"
                )
            params -= lr * grad
    return params - model.params


def apply_update(model: Model, g) -> Model:
    g = as_gradient(g, model.dim)
    return model.with_params(model.params + g)


def predict(model: Model, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(model.logits(features), axis=1)


def evaluate(model: Model, test: Dataset) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, test.features) == test.labels))


# -- datasets -----------------------------------------------------------------


def blob_centers(n_features: int, n_classes: int, seed: int, spread: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, spread, size=(n_classes, n_features))


def make_blobs(
    n_samples: int,
    n_features: int,
    n_classes: int,
    noise: float = 1.0,
    center_seed: int = 0,
    sample_seed: int = 1,
    spread: float = 1.0,
) -> Dataset:
    """Gaussian blobs around fixed class centres.

    ``center_seed`` fixes the task; ``sample_seed`` only draws the points, so
    training and validation sets for the same task use the same centres.
    """
    if n_samples < n_classes:
        raise ValueError("need at least one sample per class")
    centers = blob_centers(n_features, n_classes, center_seed, spread)
    rng = np.random.default_rng(sample_seed)
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    features = centers[labels] + rng.normal(0.0, noise, size=(n_samples, n_features))
    return Dataset(features, labels, n_classes)


def load_image_file(path) -> Dataset:
    """Read the small-image text format.

    First line ``n_samples n_features n_classes``; then one sample per line,
    ``n_features`` reals followed by an integer label.
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    try:
        n, f, k = (int(tok) for tok in lines[0].split())
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header {lines[0]!r}") from exc
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} samples, found {len(rows)}")
    x = np.empty((n, f))
    y = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        toks = row.split()
        if len(toks) != f + 1:
            raise ValueError(f"{path}: line {i + 2} has {len(toks)} fields, expected {f + 1}")
        x[i] = [float(t) for t in toks[:f]]
        y[i] = int(toks[f])
    return Dataset(x, y, k)


def save_image_file(dataset: Dataset, path) -> None:
    out = [f"{len(dataset)} {dataset.n_features} {dataset.n_classes}"]
    for row, label in zip(dataset.features, dataset.labels):
        out.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def partition_dataset(dataset: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split ``dataset`` into ``spec.n_clients`` disjoint shards.

    Each shard takes ``round(rate_iid * size)`` samples from a shared uniform
    pool and the rest from its own dominant class (shard index modulo the class
    count, after a seeded class shuffle).  When a dominant-class pool runs dry
    the deficit is filled from the uniform pool, so every sample lands in
    exactly one shard.
    """
    n, m = len(dataset), spec.n_clients
    if m > n:
        raise ValueError(f"cannot split {n} samples across {m} clients")
    rng = np.random.default_rng(spec.seed)
    sizes = np.full(m, n // m)
    sizes[: n % m] += 1

    class_order = rng.permutation(dataset.n_classes)
    dominant = class_order[np.arange(m) % dataset.n_classes]
    pools = {c: list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(dataset.n_classes)}

    shards: list[list[int]] = [[] for _ in range(m)]
    for i in range(m):
        want = int(sizes[i] - round(spec.rate_iid * sizes[i]))
        pool = pools[int(dominant[i])]
        take, pools[int(dominant[i])] = pool[:want], pool[want:]
        shards[i].extend(take)

    rest = np.array([j for c in range(dataset.n_classes) for j in pools[c]], dtype=np.int64)
    rest = rest[rng.permutation(rest.size)]
    pos = 0
    for i in range(m):
        need = int(sizes[i]) - len(shards[i])
        shards[i].extend(rest[pos : pos + need].tolist())
        pos += need
    return [dataset.subset(np.sort(np.array(s, dtype=np.int64))) for s in shards]
