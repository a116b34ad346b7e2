"""Scoring interface shared by every detector kind."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, EvaluationError, TrainingError
from ..seeding import text_digest


@dataclass(frozen=True)
class Prediction:
    raw_score: float
    probability: float
    label: int


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def encode_floats(arr):
    """Decimal strings that parse back to the identical doubles."""
    return [repr(float(v)) for v in np.asarray(arr, dtype=np.float64).ravel()]


def decode_floats(strings, shape=None):
    arr = np.array([float(s) for s in strings], dtype=np.float64)
    return arr.reshape(shape) if shape is not None else arr


class Detector:
    """A fitted binary classifier over boolean rows.

    Subclasses implement ``_fit``, ``_raw`` and parameter (de)serialisation.
    Probabilities are a monotone map of the raw score, and probability 0.5
    exactly counts as malicious.
    """

    kind = None
    defaults: dict = {}

    def __init__(self, **hyperparams):
        unknown = set(hyperparams) - set(self.defaults)
        if unknown:
            raise TrainingError(f"unknown {self.kind} hyperparameters: {sorted(unknown)}")
        self.hyperparams = {**self.defaults, **hyperparams}
        self.n_features = None
        self.train_info = {}

    # -- fitting
    def fit(self, X, y, seed=0):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise TrainingError("training set is empty")
        if len(np.unique(y)) < 2:
            raise TrainingError("training set must contain both classes")
        self.n_features = X.shape[1]
        self._fit(X, y, int(seed))
        return self

    def _fit(self, X, y, seed):
        raise NotImplementedError

    # -- scoring
    def _check(self, X):
        if self.n_features is None:
            raise TrainingError("detector is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def raw_score(self, X):
        return self._raw(self._check(X))

    def proba_from_raw(self, raw):
        return sigmoid(raw)

    def predict_proba(self, X):
        return self.proba_from_raw(self.raw_score(X))

    def predict_labels(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def predict(self, row) -> Prediction:
        row = np.asarray(row)
        if row.ndim != 1:
            raise DimensionError("predict takes a single row")
        raw = float(self.raw_score(row)[0])
        p = float(self.proba_from_raw(np.array([raw]))[0])
        return Prediction(raw, p, int(p >= 0.5))

    def accuracy(self, X, y):
        return float(np.mean(self.predict_labels(X) == np.asarray(y)))

    # -- serialisation
    def params_to_dict(self):
        raise NotImplementedError

    def params_from_dict(self, d):
        raise NotImplementedError

    def digest(self):
        from .io import model_to_json

        return text_digest(model_to_json(self))


def detection_rate(model, rows) -> float:
    rows = np.asarray(rows)
    if rows.ndim != 2 or len(rows) == 0:
        raise EvaluationError("detection rate needs at least one row")
    return float(np.mean(model.predict_labels(rows)))


class Tree:
    """Binary tree over boolean features: ``x[f] == 0`` goes left, ``1`` goes right."""

    def __init__(self, feature, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    def apply(self, X):
        n = len(X)
        node = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            bit = X[rows, np.where(internal, f, 0)] > 0.5
            nxt = np.where(bit, self.right[node], self.left[node])
            node = np.where(internal, nxt, node)

    def predict(self, X):
        return self.value[self.apply(X)]

    def leaves(self):
        """Yield ``(path_features, path_bits, leaf_value)`` for every leaf."""
        stack = [(0, [], [])]
        while stack:
            node, feats, bits = stack.pop()
            f = self.feature[node]
            if f < 0:
                yield np.array(feats, dtype=np.int64), np.array(bits, dtype=np.uint8), float(self.value[node])
                continue
            stack.append((int(self.right[node]), feats + [int(f)], bits + [1]))
            stack.append((int(self.left[node]), feats + [int(f)], bits + [0]))

    def used_features(self):
        return set(int(f) for f in self.feature if f >= 0)

    def to_dict(self):
        return {
            "feature": [int(v) for v in self.feature],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": encode_floats(self.value),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["feature"], d["left"], d["right"], decode_floats(d["value"]))


class TreeBuilder:
    """Accumulates nodes in pre-order into flat arrays."""

    def __init__(self):
        self.feature, self.left, self.right, self.value = [], [], [], []

    def add(self):
        self.feature.append(-1)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def build(self):
        return Tree(self.feature, self.left, self.right, self.value)
