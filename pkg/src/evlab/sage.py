"""SAGE global importance and detectors retrained without top-ranked features.

The restricted model keeps the features in S from the sample and imputes
the rest from background rows (marginal imputation). Predictive power is
the loss of the mean prediction minus the loss of the restricted model, and
SAGE values are its Shapley allocation, estimated by permutation sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvaluationError
from .seeding import array_digest

LOSSES = ("cross_entropy", "zero_one")
_EPS = 1e-12


def _output(model, output):
    if output == "raw":
        return model.raw_score
    if output == "probability":
        return model.predict_proba
    raise ConfigError(f"unknown output {output!r}")


def restricted_score(model, x, S, background, n_marginal_draws=None, seed=0, output="raw"):
    """Mean model output with features in ``S`` taken from ``x`` and the rest from background rows.

    ``n_marginal_draws=None`` averages over every background row; an integer
    draws that many rows with replacement.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    Z = np.asarray(background, dtype=np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise EvaluationError("restricted model needs a non-empty background")
    f = _output(model, output)
    mask = np.zeros(len(x), dtype=bool)
    mask[list(S)] = True
    if mask.all():
        return float(f(x[None, :])[0])
    if n_marginal_draws is not None:
        Z = Z[np.random.default_rng(int(seed)).integers(0, len(Z), size=int(n_marginal_draws))]
    H = np.where(mask[None, :], x[None, :], Z)
    return float(np.mean(f(H)))


def pointwise_loss(p, y, loss):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss == "cross_entropy":
        p = np.clip(p, _EPS, 1 - _EPS)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p))
    if loss == "zero_one":
        return ((p >= 0.5).astype(np.float64) != y).astype(np.float64)
    raise ConfigError(f"unknown loss {loss!r}; choose from {LOSSES}")


def _restricted_proba(model, X, S, Z):
    """Restricted-model probabilities for every row of X (averaged over all of Z)."""
    mask = np.zeros(X.shape[1], dtype=bool)
    mask[list(S)] = True
    H = np.where(mask[None, None, :], X[:, None, :], Z[None, :, :])
    return model.predict_proba(H.reshape(-1, X.shape[1])).reshape(len(X), len(Z)).mean(axis=1)


def predictive_power(model, X, y, S, background, loss="cross_entropy", return_se=False):
    """``E[loss(mean prediction)] - E[loss(restricted model on S)]`` over the rows of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(background, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; choose from {LOSSES}")
    base = np.full(len(X), model.predict_proba(Z).mean())
    if len(S) == 0:
        value, diffs = 0.0, np.zeros(len(X))
    else:
        diffs = pointwise_loss(base, y, loss) - pointwise_loss(_restricted_proba(model, X, S, Z), y, loss)
        value = float(diffs.mean())
    if return_se:
        se = float(diffs.std(ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else float("nan")
        return value, se
    return value


@dataclass
class SageReport:
    values: np.ndarray
    std_errors: np.ndarray
    v_full: float
    v_empty: float
    loss_name: str
    n_permutations: int
    seed: int
    config: dict = field(default_factory=dict)

    def ranking(self):
        """Feature ids by descending value, ties to the lower id."""
        return np.lexsort((np.arange(len(self.values)), -self.values))

    def to_dict(self):
        return {
            "format": "evlab-sage/1",
            "values": [float(v) for v in self.values],
            "std_errors": [float(v) for v in self.std_errors],
            "v_full": self.v_full,
            "v_empty": self.v_empty,
            "loss": self.loss_name,
            "n_permutations": self.n_permutations,
            "seed": self.seed,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def sage_values(
    model,
    X,
    y,
    loss="cross_entropy",
    n_permutations=8,
    seed=0,
    background=None,
    background_size=16,
    eval_size=256,
) -> SageReport:
    """Permutation-sampling SAGE values.

    The value function is evaluated on a fixed subset of rows (``eval_size``)
    with a fixed background (``background_size`` rows, drawn from ``X`` when
    not given), so every permutation's increments sum exactly to
    ``v_full - v_empty``. Standard errors come from the spread across
    permutations.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; choose from {LOSSES}")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(int(seed))
    if eval_size is not None and len(X) > eval_size:
        keep = np.sort(rng.choice(len(X), size=eval_size, replace=False))
        X, y = X[keep], y[keep]
    if background is None:
        Z = X[np.sort(rng.choice(len(X), size=min(background_size, len(X)), replace=False))]
    else:
        Z = np.asarray(background, dtype=np.float64)
    n, d = X.shape
    m = len(Z)

    p_empty = float(model.predict_proba(Z).mean())
    loss_empty = float(pointwise_loss(np.full(n, p_empty), y, loss).mean())
    loss_full = float(pointwise_loss(model.predict_proba(X), y, loss).mean())

    draws = np.zeros((n_permutations, d))
    base_P = np.tile(model.predict_proba(Z), (n, 1))
    for k in range(n_permutations):
        order = rng.permutation(d)
        H = np.broadcast_to(Z[None, :, :], (n, m, d)).copy()
        P = base_P.copy()
        prev = loss_empty
        for j in order:
            changed = H[:, :, j] != X[:, j][:, None]
            if changed.any():
                H[:, :, j] = X[:, j][:, None]
                ii, kk = np.nonzero(changed)
                P[ii, kk] = model.predict_proba(H[ii, kk])
                cur = float(pointwise_loss(P.mean(axis=1), y, loss).mean())
            else:
                cur = prev
            draws[k, j] = prev - cur
            prev = cur
        # final state equals the full model; pin it so increments telescope exactly
        draws[k, order[-1]] += prev - loss_full
    values = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(n_permutations) if n_permutations > 1 else np.full(d, np.nan)
    return SageReport(
        values,
        se,
        loss_empty - loss_full,
        0.0,
        loss,
        n_permutations,
        int(seed),
        {"eval_rows": n, "background_rows": m, "background_digest": array_digest(Z), "imputation": "marginal"},
    )


def sage_exact(model, X, y, background, loss="cross_entropy"):
    """Shapley allocation of predictive power by enumerating every subset (small d only)."""
    from itertools import combinations
    from math import comb

    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if d > 12:
        raise ConfigError("exact SAGE enumeration is limited to d <= 12")
    v = {}
    for size in range(d + 1):
        for S in combinations(range(d), size):
            v[S] = predictive_power(model, X, y, S, background, loss)
    phi = np.zeros(d)
    for i in range(d):
        rest = [j for j in range(d) if j != i]
        for size in range(d):
            for S in combinations(rest, size):
                with_i = tuple(sorted(S + (i,)))
                phi[i] += (v[with_i] - v[S]) / comb(d - 1, size)
        phi[i] /= d
    return phi


class ImprovedDetector:
    """A detector retrained with some feature columns removed.

    Accepts full-width rows and ignores the excluded columns, so predictions
    cannot depend on them.
    """

    def __init__(self, base_kind, hyperparams, excluded, inner, n_features):
        self.base_kind = base_kind
        self.kind = f"improved_{base_kind}"
        self.hyperparams = dict(hyperparams or {})
        self.excluded_features = sorted(int(f) for f in excluded)
        self.keep = np.setdiff1d(np.arange(n_features), self.excluded_features)
        self.inner = inner
        self.n_features = n_features

    def _cols(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            from .errors import DimensionError

            raise DimensionError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X[:, self.keep]

    def raw_score(self, X):
        return self.inner.raw_score(self._cols(X))

    def proba_from_raw(self, raw):
        return self.inner.proba_from_raw(raw)

    def predict_proba(self, X):
        return self.inner.predict_proba(self._cols(X))

    def predict_labels(self, X):
        return self.inner.predict_labels(self._cols(X))

    def predict(self, row):
        return self.inner.predict(self._cols(row)[0])

    def accuracy(self, X, y):
        return float(np.mean(self.predict_labels(X) == np.asarray(y)))


def exclude_and_retrain(dataset, ranked_features, k, kind="gbdt", hyperparams=None, seed=0) -> ImprovedDetector:
    """Drop the top ``k`` ranked features from every split and retrain on the train split."""
    from . import detectors

    d = dataset.matrix.n_features
    if not 0 < k < d:
        raise ConfigError(f"k must satisfy 0 < k < {d}, got {k}")
    excluded = [int(f) for f in list(ranked_features)[:k]]
    keep = np.setdiff1d(np.arange(d), excluded)
    Xtr, ytr = dataset.part("train")
    inner = detectors.make(kind, hyperparams).fit(Xtr[:, keep], ytr, seed)
    Xv, yv = dataset.part("val")
    if len(Xv):
        inner.train_info["val_accuracy"] = inner.accuracy(Xv[:, keep], yv)
    return ImprovedDetector(kind, hyperparams, excluded, inner, d)


IMPROVED_FORMAT = "evlab-improved/1"


def improved_to_json(det: ImprovedDetector, extra=None):
    from .detectors.io import model_to_json

    doc = {
        "format": IMPROVED_FORMAT,
        "base_kind": det.base_kind,
        "hyperparams": det.hyperparams,
        "excluded_features": det.excluded_features,
        "n_features": det.n_features,
        "model": json.loads(model_to_json(det.inner)),
    }
    doc.update(extra or {})
    return json.dumps(doc, sort_keys=True, indent=2)


def improved_from_json(text) -> ImprovedDetector:
    from .detectors.io import model_from_json
    from .errors import ModelFormatError

    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ModelFormatError(f"unreadable improved-detector file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != IMPROVED_FORMAT:
        raise ModelFormatError("not an improved-detector file")
    inner = model_from_json(json.dumps(doc["model"]), doc["base_kind"])
    return ImprovedDetector(doc["base_kind"], doc["hyperparams"], doc["excluded_features"], inner, int(doc["n_features"]))
