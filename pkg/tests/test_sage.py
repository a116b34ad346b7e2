import itertools
import json
import math

import numpy as np
import pytest

from evlab import sage as G
from evlab.dataset import planted_features
from evlab.errors import ConfigError, DimensionError, EvaluationError, ModelFormatError
from conftest import FuncModel


def _toy(seed=0, n=80, d=5):
    r = np.random.default_rng(seed)
    X = r.integers(0, 2, size=(n, d)).astype(float)
    y = ((X[:, 0] + X[:, 1] + 0.5 * X[:, 2] + r.normal(0, 0.4, n)) > 1.2).astype(float)
    w = np.array([2.0, 1.5, 0.8, 0.0, 0.0][:d])
    model = FuncModel(lambda A: A @ w - 2.0, d)
    return model, X, y


def oracle_power(model, X, y, S, Z):
    """Predictive power with explicit loops over rows and background rows."""
    p_mean = float(np.mean([model.predict_proba(z[None])[0] for z in Z]))
    total = 0.0
    for x, t in zip(X, y):
        ps = []
        for z in Z:
            h = np.array([x[j] if j in S else z[j] for j in range(len(x))])
            ps.append(model.predict_proba(h[None])[0])
        p = float(np.mean(ps))
        ce = lambda q: -(t * math.log(q) + (1 - t) * math.log(1 - q))
        total += ce(p_mean) - ce(p)
    return total / len(X)


def oracle_sage(model, X, y, Z):
    d = X.shape[1]
    cache = {}

    def v(S):
        key = frozenset(S)
        if key not in cache:
            cache[key] = 0.0 if not S else oracle_power(model, X, y, S, Z)
        return cache[key]

    phi = np.zeros(d)
    orders = list(itertools.permutations(range(d)))
    for order in orders:
        S = []
        for j in order:
            before = v(S)
            S.append(j)
            phi[j] += v(S) - before
    return phi / len(orders)


# -- restricted model


def test_restricted_score_full_and_empty():
    model, X, _ = _toy()
    Z = X[:10]
    x = X[20]
    assert G.restricted_score(model, x, range(5), Z) == model.raw_score(x)[0]
    assert G.restricted_score(model, x, [], Z) == pytest.approx(model.raw_score(Z).mean())
    with pytest.raises(EvaluationError):
        G.restricted_score(model, x, [0], np.zeros((0, 5)))


def test_restricted_score_matches_brute_force():
    r = np.random.default_rng(1)
    W = r.normal(size=6)
    model = FuncModel(lambda A: np.sin(A @ W), 6)
    Z = r.integers(0, 2, size=(7, 6)).astype(float)
    x = r.integers(0, 2, size=6).astype(float)
    S = {0, 2, 5}
    brute = np.mean([np.sin(sum((x[j] if j in S else z[j]) * W[j] for j in range(6))) for z in Z])
    assert G.restricted_score(model, x, S, Z) == pytest.approx(brute, abs=1e-12)
    drawn = G.restricted_score(model, x, S, Z, n_marginal_draws=5000, seed=2)
    assert drawn == pytest.approx(brute, abs=0.05)


# -- predictive power


def test_predictive_power_basics():
    model, X, y = _toy()
    Z = X[:16]
    assert G.predictive_power(model, X, y, [], Z) == 0.0
    assert G.predictive_power(model, X, y, range(5), Z) > 0
    assert G.predictive_power(model, X, y, [0, 2], Z) == pytest.approx(oracle_power(model, X, y, [0, 2], Z), abs=1e-12)
    with pytest.raises(ConfigError):
        G.predictive_power(model, X, y, [0], Z, loss="hinge")


def test_independent_feature_has_no_power():
    r = np.random.default_rng(3)
    n = 400
    X = r.integers(0, 2, size=(n, 2)).astype(float)
    y = X[:, 0].copy()
    model = FuncModel(lambda A: 3 * A[:, 0] - 1.5 + 0.3 * A[:, 1], 2)
    value, se = G.predictive_power(model, X, y, [1], X[:32], return_se=True)
    assert abs(value) <= 2 * se


# -- SAGE values


def test_sage_matches_exact_and_oracle():
    model, X, y = _toy(d=5)
    Z = X[:6]
    exact = G.sage_exact(model, X, y, Z)
    assert np.allclose(exact, oracle_sage(model, X, y, Z), atol=1e-10)
    rep = G.sage_values(model, X, y, n_permutations=120, seed=4, background=Z, eval_size=None)
    assert np.all(np.abs(rep.values - exact) <= 3 * rep.std_errors + 1e-9)


def test_sage_efficiency_and_determinism():
    model, X, y = _toy()
    rep = G.sage_values(model, X, y, n_permutations=6, seed=1)
    assert rep.values.sum() == pytest.approx(rep.v_full - rep.v_empty, rel=0.05)
    again = G.sage_values(model, X, y, n_permutations=6, seed=1)
    assert np.array_equal(rep.values, again.values)
    assert rep.ranking()[:2].tolist() == [0, 1]
    with pytest.raises(ConfigError):
        G.sage_values(model, X, y, n_permutations=0)


def test_sage_planted_beats_noise(small_config, small_models, small_corpus):
    ds, _ = small_corpus
    mal, ben = planted_features(small_config)
    X, y = ds.part("val")
    rep = G.sage_values(small_models["gbdt"], X, y, n_permutations=3, seed=0, background_size=8, eval_size=96)
    noise = [j for j in range(ds.X.shape[1]) if j not in set(mal) | set(ben)]
    assert rep.values[mal].max() > rep.values[noise].max()
    assert rep.values.sum() == pytest.approx(rep.v_full, rel=0.05)


def test_sage_exact_limit():
    model = FuncModel(lambda A: A.sum(axis=1), 13)
    with pytest.raises(ConfigError):
        G.sage_exact(model, np.zeros((2, 13)), np.zeros(2), np.zeros((1, 13)))


# -- retraining without features


def test_exclude_and_retrain_bounds(small_corpus):
    ds, _ = small_corpus
    d = ds.X.shape[1]
    for k in (0, d):
        with pytest.raises(ConfigError):
            G.exclude_and_retrain(ds, range(d), k, "linear_svm")


def test_improved_detector_ignores_excluded(small_corpus):
    ds, _ = small_corpus
    det = G.exclude_and_retrain(ds, [3, 1, 4], 3, "linear_svm", seed=0)
    assert det.excluded_features == [1, 3, 4]
    X = ds.X[:50].copy()
    base = det.raw_score(X)
    X[:, [1, 3, 4]] = 1 - X[:, [1, 3, 4]]
    assert np.array_equal(det.raw_score(X), base)
    with pytest.raises(DimensionError):
        det.raw_score(X[:, :-1])


def test_removing_all_signal_hurts(small_config, small_models, small_corpus):
    ds, _ = small_corpus
    mal, ben = planted_features(small_config)
    det = G.exclude_and_retrain(ds, list(mal) + list(ben), len(mal) + len(ben), "gbdt", {"n_trees": 30}, seed=0)
    X, y = ds.part("test")
    assert det.accuracy(X, y) < small_models["gbdt"].accuracy(X, y) - 0.1


def test_improved_json_round_trip(small_corpus):
    ds, _ = small_corpus
    det = G.exclude_and_retrain(ds, [0, 5], 2, "linear_svm", seed=1)
    back = G.improved_from_json(G.improved_to_json(det, {"k": 2}))
    assert back.excluded_features == det.excluded_features
    assert np.array_equal(back.raw_score(ds.X), det.raw_score(ds.X))
    with pytest.raises(ModelFormatError):
        G.improved_from_json('{"format": "x"}')


def test_report_json():
    rep = G.SageReport(np.array([0.2, 0.1]), np.array([0.01, 0.02]), 0.3, 0.0, "cross_entropy", 4, 1)
    doc = json.loads(rep.to_json())
    assert doc["format"] == "evlab-sage/1" and doc["values"] == [0.2, 0.1]
