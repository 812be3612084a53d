"""Scripted malicious-client behaviours and the linear gradient-inversion oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .learning import LOGISTIC, Dataset, Model, as_gradient

HONEST = "honest"
LABEL_FLIP = "label_flip"
RANDOM_UPDATE = "random_update"
GRAD_ASCENT = "grad_ascent"
KINDS = (HONEST, LABEL_FLIP, RANDOM_UPDATE, GRAD_ASCENT)


@dataclass(frozen=True)
class AdversaryKind:
    """Attack variant plus its parameters.

    ``sigma`` is the random-update noise scale, ``multiplier`` the gradient
    ascent factor, and ``permute`` switches label flipping from the cyclic
    shift to a seeded random derangement.
    """

    variant: str = HONEST
    sigma: float = 1.0
    multiplier: float = -1.0
    permute: bool = False

    def __post_init__(self):
        if self.variant not in KINDS:
            raise ValueError(f"unknown adversary kind {self.variant!r}; choose from {KINDS}")
        if self.variant == RANDOM_UPDATE and not self.sigma > 0:
            raise ValueError("random_update needs sigma > 0")
        if self.variant == GRAD_ASCENT and not self.multiplier < 0:
            raise ValueError("grad_ascent needs a negative multiplier")

    def poison_data(self, shard: Dataset, seed: int) -> Dataset:
        if self.variant != LABEL_FLIP:
            return shard
        if self.permute:
            return corrupt_labels_permuted(shard, seed)
        return corrupt_labels(shard, seed)

    def poison_gradient(self, g: np.ndarray, seed: int) -> np.ndarray:
        if self.variant == RANDOM_UPDATE:
            return corrupt_gradient_random(g, self.sigma, seed)
        if self.variant == GRAD_ASCENT:
            return corrupt_gradient_ascent(g, self.multiplier)
        return g


def corrupt_labels(shard: Dataset, seed: int = 0) -> Dataset:
    """Cyclic shift y -> (y + 1) mod n_classes.  ``seed`` is unused (kept for a uniform call shape)."""
    if shard.n_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    return Dataset(shard.features, (shard.labels + 1) % shard.n_classes, shard.n_classes)


def corrupt_labels_permuted(shard: Dataset, seed: int) -> Dataset:
    """Relabel through a seeded derangement (no class maps to itself)."""
    k = shard.n_classes
    if k < 2:
        raise ValueError("label flipping needs at least two classes")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            break
    return Dataset(shard.features, perm[shard.labels], k)


def corrupt_gradient_random(g, sigma: float, seed: int) -> np.ndarray:
    """Replace the update with i.i.d. N(0, sigma^2) noise of the same length."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    dim = np.asarray(g).size
    if dim < 1:
        raise ValueError("gradient must have dim >= 1")
    return np.random.default_rng(seed).normal(0.0, sigma, dim)


def corrupt_gradient_ascent(g, multiplier: float) -> np.ndarray:
    if not multiplier < 0:
        raise ValueError("gradient ascent multiplier must be negative")
    return multiplier * np.asarray(g, dtype=np.float64)


@dataclass(frozen=True)
class InversionResult:
    reconstructed: np.ndarray | None
    residual: float | None = None

    @property
    def ok(self) -> bool:
        return self.reconstructed is not None


def invert_linear_gradient(g_w, g_b: float, truth=None, eps: float = 1e-9) -> InversionResult:
    """Closed-form inversion of a single-sample logistic gradient.

    For a batch of one, g_w = (sigmoid(z) - y) * x and g_b = sigmoid(z) - y,
    so x = g_w / g_b whenever g_b is not ~0.  Any common positive or negative
    scale (learning rate, softmax column) cancels.
    """
    g_w = np.asarray(g_w, dtype=np.float64)
    if abs(g_b) <= eps:
        return InversionResult(None, None)
    x = g_w / g_b
    residual = None
    if truth is not None:
        residual = float(np.linalg.norm(x - np.asarray(truth, dtype=np.float64)))
    return InversionResult(x, residual)


def binary_logistic_gradient(w, b: float, x, y: int) -> tuple[np.ndarray, float]:
    """Forward oracle: cross-entropy gradient of a binary logistic unit at one sample."""
    x = np.asarray(x, dtype=np.float64)
    z = float(np.dot(w, x) + b)
    r = 1.0 / (1.0 + np.exp(-z)) - y
    return r * x, r


def invert_model_update(model: Model, g, truth=None) -> InversionResult:
    """Apply the oracle to a flat softmax-regression update vector.

    Every class column of a single-sample update is proportional to x, so the
    column with the largest bias entry is inverted.
    """
    if model.arch != LOGISTIC:
        raise ValueError("inversion oracle only covers logistic regression")
    g = as_gradient(g, model.dim)
    w, b = model.unpack(g)
    k = int(np.argmax(np.abs(b)))
    return invert_linear_gradient(w[:, k], float(b[k]), truth)
