"""Feature/value selection: Accrued Malicious Magnitude (AMM) and the statistics baseline."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SelectionError

log = logging.getLogger(__name__)

FEATURE_SPACE_ONLY = "feature_space_only"
PROBLEM_SPACE = "problem_space"
MODES = (FEATURE_SPACE_ONLY, PROBLEM_SPACE)


class PartialPatchWarning(UserWarning):
    """Selection stopped before reaching the requested number of pairs."""


@dataclass
class AmmVectors:
    D: np.ndarray
    C: np.ndarray
    AMM: np.ndarray


@dataclass
class FeaturePatch:
    pairs: list
    source_model_digest: str = ""
    n_requested: int = 0
    strategy: str = "amm"
    iterations_log: list = field(default_factory=list)

    def __post_init__(self):
        self.pairs = [(int(f), int(v)) for f, v in self.pairs]
        ids = [f for f, _ in self.pairs]
        if len(set(ids)) != len(ids):
            raise SelectionError("feature patch holds duplicate feature ids")

    def __len__(self):
        return len(self.pairs)

    def prefix(self, n):
        return FeaturePatch(self.pairs[:n], self.source_model_digest, n, self.strategy, [])

    @property
    def features(self):
        return [f for f, _ in self.pairs]

    def to_json(self):
        doc = {
            "format": "evlab-patch/1",
            "strategy": self.strategy,
            "source_model_digest": self.source_model_digest,
            "n_requested": self.n_requested,
            "pairs": [[f, v] for f, v in self.pairs],
            "iterations_log": self.iterations_log,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
            if doc.get("format") != "evlab-patch/1":
                raise ParseError(f"unsupported patch format {doc.get('format')!r}")
            return cls(
                [tuple(p) for p in doc["pairs"]],
                doc.get("source_model_digest", ""),
                doc.get("n_requested", len(doc["pairs"])),
                doc.get("strategy", "amm"),
                doc.get("iterations_log", []),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"bad patch file: {exc}") from exc

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def reachable(spec, value, mode=PROBLEM_SPACE):
    """Whether ``spec``'s feature can be driven to ``value``.

    Additions are always realisable for manipulable features. Removals only
    exist in feature space, and never for additive-only features.
    """
    if mode not in MODES:
        raise SelectionError(f"unknown mode {mode!r}")
    if not spec.manipulable:
        return False
    if value == 1:
        return True
    return mode == FEATURE_SPACE_ONLY and not spec.additive_only


def amm_vectors(values, active_rows=None) -> AmmVectors:
    """Per-feature SHAP range ``D``, count above the column mean ``C`` and ``AMM = D * C``."""
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    if active_rows is not None:
        values = values[np.asarray(active_rows)]
    if len(values) == 0:
        raise SelectionError("AMM needs at least one active row")
    D = values.max(axis=0) - values.min(axis=0)
    C = (values > values.mean(axis=0)).sum(axis=0)
    return AmmVectors(D, C, D * C)


def amm_ranking(values):
    """Feature ids by descending AMM over all rows, ties to the lower id."""
    amm = amm_vectors(values).AMM
    return np.lexsort((np.arange(len(amm)), -amm))


def amm_select(
    X,
    shap,
    specs,
    N,
    mode=PROBLEM_SPACE,
    source_model_digest=None,
) -> FeaturePatch:
    """Greedy AMM selection over a vectorised dataset and its SHAP matrix.

    Each iteration takes the feature with the largest AMM among those not yet
    visited, reads the feature value of the row whose SHAP value on it is
    lowest, records the pair if that value is reachable, and keeps only the
    rows that already carry that value. The SHAP matrix is sliced with the
    rows, never recomputed.
    """
    if N < 1:
        raise SelectionError(f"N must be >= 1, got {N}")
    X = np.asarray(X)
    values = np.asarray(getattr(shap, "values", shap), dtype=np.float64)
    if values.shape != X.shape:
        raise SelectionError(f"SHAP matrix {values.shape} does not match data {X.shape}")
    d = X.shape[1]
    if len(specs) != d:
        raise SelectionError("feature specs do not match the data width")
    if source_model_digest is None:
        source_model_digest = getattr(shap, "model_digest", "")

    rows = np.arange(len(X))
    excluded = np.zeros(d, dtype=bool)
    pairs, logbook = [], []
    reason = None
    while len(pairs) < N:
        if len(rows) < 2:
            reason = f"fewer than 2 rows remain ({len(rows)})"
            break
        if excluded.all():
            reason = "every feature has been visited"
            break
        amm = amm_vectors(values[rows]).AMM
        amm = np.where(excluded, -np.inf, amm)
        f = int(np.argmax(amm))
        r = rows[int(np.argmin(values[rows, f]))]
        v = int(X[r, f])
        ok = reachable(specs[f], v, mode)
        if ok:
            pairs.append((f, v))
        excluded[f] = True
        logbook.append(
            {
                "iteration": len(logbook),
                "feature": f,
                "value": v,
                "amm": float(amm[f]),
                "rows_remaining": int(len(rows)),
                "manipulable": bool(specs[f].manipulable),
                "appended": ok,
            }
        )
        rows = rows[X[rows, f] == v]
    if reason is not None:
        msg = f"AMM selection stopped with {len(pairs)} of {N} pairs: {reason}"
        log.info(msg)
        warnings.warn(msg, PartialPatchWarning, stacklevel=2)
    return FeaturePatch(pairs, source_model_digest, N, "amm", logbook)


@dataclass
class StatsSelection:
    benign_features: list
    malicious_features: list
    thresholds: dict


def stats_select(X, y, N) -> StatsSelection:
    """Frequency-contrast selection of benign- and malicious-oriented features.

    Thresholds are the values at the 10% and 90% positions of each class's
    positive column sums sorted in descending order. Features are visited in
    id order and the first ``N`` passing each test are kept.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if N < 0:
        raise SelectionError("N must be non-negative")
    if not ((y == 0).any() and (y == 1).any()):
        raise SelectionError("statistics selection needs both classes")
    m_sum = X[y == 1].sum(axis=0).astype(np.int64)
    b_sum = X[y == 0].sum(axis=0).astype(np.int64)

    def cuts(sums, name):
        pos = np.sort(sums[sums > 0])[::-1]
        if len(pos) == 0:
            raise SelectionError(f"no feature is present in any {name} sample")
        top = pos[min(int(len(pos) * 0.1), len(pos) - 1)]
        bottom = pos[min(int(len(pos) * 0.9), len(pos) - 1)]
        return int(top), int(bottom)

    m_top, m_bottom = cuts(m_sum, "malicious")
    b_top, b_bottom = cuts(b_sum, "benign")
    B, M = [], []
    for i in range(X.shape[1]):
        if b_sum[i] >= b_top and m_sum[i] <= m_bottom and len(B) < N:
            B.append(i)
        if m_sum[i] >= m_top and b_sum[i] <= b_bottom and len(M) < N:
            M.append(i)
    return StatsSelection(B, M, {"m_top": m_top, "m_bottom": m_bottom, "b_top": b_top, "b_bottom": b_bottom})


def stats_patch(selection: StatsSelection, specs, mode=PROBLEM_SPACE, n_requested=None) -> FeaturePatch:
    """Benign features set to 1, then malicious ones set to 0, dropping unreachable pairs."""
    pairs = [(b, 1) for b in selection.benign_features] + [(m, 0) for m in selection.malicious_features]
    kept = [(f, v) for f, v in pairs if reachable(specs[f], v, mode)]
    n_req = n_requested if n_requested is not None else len(pairs)
    return FeaturePatch(kept, "", n_req, "stats", [])


def amm_feature_ranking(X, shap, specs, mode=PROBLEM_SPACE):
    """Feature ids an attacker following AMM would reach for first.

    Each feature's AMM-chosen value is its value on the row with the lowest
    SHAP entry. Features whose chosen value is reachable come first; within
    each group the order is descending AMM, ties to the lower id.
    """
    X = np.asarray(X)
    values = np.asarray(getattr(shap, "values", shap), dtype=np.float64)
    if values.shape != X.shape:
        raise SelectionError(f"SHAP matrix {values.shape} does not match data {X.shape}")
    amm = amm_vectors(values).AMM
    chosen = X[np.argmin(values, axis=0), np.arange(X.shape[1])]
    ok = np.array([reachable(specs[f], int(chosen[f]), mode) for f in range(X.shape[1])])
    return np.lexsort((np.arange(len(amm)), -amm, ~ok))


def select_for_model(model, X, specs, N, background=None, method="auto", seed=0, mode=PROBLEM_SPACE):
    """Compute SHAP values for ``X`` under ``model`` and run :func:`amm_select`."""
    from .attribution import sample_background, shap_matrix

    if background is None:
        background = sample_background(X, 100, seed)
    sm = shap_matrix(model, X, background, method=method, seed=seed)
    return amm_select(X, sm, specs, N, mode)
