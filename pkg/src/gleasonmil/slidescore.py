"""Biopsy-level scoring from patch-level evidence.

Two slide descriptors are supported: the mean of the student's patch
features, and the fraction of patches assigned to each grade (GG%). Either
feeds a kNN or a small MLP classifier; the classifiers are label-space
agnostic, so Grade Groups and score classes both work as targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gleasonmil.model import softmax
from gleasonmil.optim import Adam

__all__ = [
    "slide_embedding",
    "grade_percentages",
    "KNNClassifier",
    "MLPConfig",
    "MLPClassifier",
]


def slide_embedding(features: np.ndarray) -> np.ndarray:
    """Arithmetic mean of instance features (permutation invariant)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise ValueError("empty feature list")
    return features.mean(axis=0)


def grade_percentages(hard_preds, soft_probs: np.ndarray | None = None) -> np.ndarray:
    """Fraction of patches per grade class (NC, GG3, GG4, GG5).

    The default counts hard argmax predictions; passing ``soft_probs``
    averages the probability vectors instead.
    """
    if soft_probs is not None:
        probs = np.atleast_2d(np.asarray(soft_probs, dtype=np.float64))
        if probs.shape[0] == 0:
            raise ValueError("empty prediction list")
        return probs.mean(axis=0)
    hard_preds = np.asarray([int(p) for p in hard_preds], dtype=np.int64)
    if hard_preds.size == 0:
        raise ValueError("empty prediction list")
    if hard_preds.min() < 0 or hard_preds.max() > 3:
        raise ValueError("hard predictions must be grade indices 0..3")
    return np.bincount(hard_preds, minlength=4) / hard_preds.size


class KNNClassifier:
    """Majority vote among the k Euclidean-nearest training points.

    Distance ties keep insertion order (stable sort); vote ties go to the
    lowest label value.
    """

    def __init__(self, k: int = 20):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self._x: np.ndarray | None = None
        self._y: np.ndarray | None = None

    def fit(self, x: np.ndarray, y) -> "KNNClassifier":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray([int(v) for v in y], dtype=np.int64)
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValueError("x and y must be equal-length and nonempty")
        self._x, self._y = x, y
        return self

    def predict(self, query: np.ndarray) -> int:
        if self._x is None:
            raise RuntimeError("classifier is not fitted")
        if self._x.shape[0] < self.k:
            raise ValueError(f"training set smaller than k={self.k}")
        query = np.asarray(query, dtype=np.float64)
        distances = np.linalg.norm(self._x - query[None, :], axis=1)
        nearest = np.argsort(distances, kind="stable")[: self.k]
        votes = np.bincount(self._y[nearest])
        return int(np.argmax(votes))  # argmax takes the lowest label on ties

    def predict_many(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return np.asarray([self.predict(q) for q in queries], dtype=np.int64)


@dataclass(frozen=True)
class MLPConfig:
    hidden: int = 64
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 32
    seed: int = 0


class MLPClassifier:
    """One hidden ReLU layer + softmax output, trained with Adam on the
    cross entropy of one-hot targets. Deterministic given the seed."""

    def __init__(self, config: MLPConfig = MLPConfig()):
        self.config = config
        self.classes_: np.ndarray | None = None
        self._params: dict[str, np.ndarray] | None = None

    def fit(self, x: np.ndarray, y) -> "MLPClassifier":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray([int(v) for v in y], dtype=np.int64)
        if x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValueError("x and y must be equal-length and nonempty")
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("training data must contain at least 2 classes")
        targets = np.searchsorted(self.classes_, y)

        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d_in, d_out = x.shape[1], self.classes_.size
        params = {
            "w1": rng.uniform(-1, 1, size=(d_in, cfg.hidden)) * np.sqrt(6.0 / d_in),
            "b1": np.zeros(cfg.hidden),
            "w2": rng.uniform(-1, 1, size=(cfg.hidden, d_out)) * np.sqrt(6.0 / cfg.hidden),
            "b2": np.zeros(d_out),
        }
        optimizer = Adam()
        n = x.shape[0]
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                xb, yb = x[batch], targets[batch]
                hidden_pre = xb @ params["w1"] + params["b1"]
                hidden = np.maximum(hidden_pre, 0.0)
                probs = softmax(hidden @ params["w2"] + params["b2"])
                dlogits = probs.copy()
                dlogits[np.arange(len(yb)), yb] -= 1.0
                dlogits /= len(yb)
                dhidden = (dlogits @ params["w2"].T) * (hidden_pre > 0)
                grads = {
                    "w2": hidden.T @ dlogits, "b2": dlogits.sum(axis=0),
                    "w1": xb.T @ dhidden, "b1": dhidden.sum(axis=0),
                }
                optimizer.step(params, grads, cfg.lr)
        self._params = params
        return self

    def predict_proba(self, query: np.ndarray) -> np.ndarray:
        if self._params is None:
            raise RuntimeError("classifier is not fitted")
        query = np.atleast_2d(np.asarray(query, dtype=np.float64))
        hidden = np.maximum(query @ self._params["w1"] + self._params["b1"], 0.0)
        return softmax(hidden @ self._params["w2"] + self._params["b2"])

    def predict(self, query: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(query)
        return self.classes_[np.argmax(probs, axis=1)]
