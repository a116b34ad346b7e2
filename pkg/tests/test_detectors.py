import numpy as np
import pytest

from evlab import detectors
from evlab.detectors import LinearSVM, detection_rate, linear_weights, load_model, model_from_json, model_to_json, save_model
from evlab.detectors.base import Tree
from evlab.detectors.mlp import loss_and_grads
from evlab.errors import DimensionError, EvaluationError, ModelFormatError, TrainingError

FAST = {
    "gbdt": {"n_trees": 30},
    "linear_svm": {},
    "random_forest": {"n_trees": 15},
    "mlp": {"hidden": (16, 8, 4), "epochs": 60, "learning_rate": 1e-2},
}


def _toy():
    # label is feature 0; the rest is noise
    r = np.random.default_rng(0)
    X = r.integers(0, 2, size=(200, 6)).astype(np.uint8)
    return X, X[:, 0].astype(np.int64)


@pytest.mark.parametrize("kind", sorted(detectors.KINDS))
def test_separable_toy_is_learned(kind):
    X, y = _toy()
    m = detectors.fit(kind, FAST[kind], X, y, seed=1)
    assert m.accuracy(X, y) == 1.0


@pytest.mark.parametrize("kind", sorted(detectors.KINDS))
def test_training_is_deterministic(kind):
    X, y = _toy()
    a = detectors.fit(kind, FAST[kind], X, y, seed=4)
    b = detectors.fit(kind, FAST[kind], X, y, seed=4)
    assert model_to_json(a) == model_to_json(b)


@pytest.mark.parametrize("kind", sorted(detectors.KINDS))
def test_save_load_is_exact(kind, tmp_path, small_models, small_corpus):
    m = small_models[kind]
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json", expected_kind=kind)
    X = small_corpus[0].X
    assert np.array_equal(back.raw_score(X), m.raw_score(X))
    assert model_to_json(back) == model_to_json(m)


def test_truncated_model_file(tmp_path, small_models):
    text = model_to_json(small_models["gbdt"])
    with pytest.raises(ModelFormatError):
        model_from_json(text[: len(text) // 2])


def test_kind_mismatch(small_models):
    with pytest.raises(ModelFormatError, match="kind mismatch"):
        model_from_json(model_to_json(small_models["gbdt"]), expected_kind="mlp")


def test_unknown_kind_and_hyperparams():
    with pytest.raises(TrainingError):
        detectors.make("boosted_svm")
    with pytest.raises(TrainingError):
        detectors.make("gbdt", {"depth": 3})


def test_single_class_training_fails():
    with pytest.raises(TrainingError):
        detectors.fit("gbdt", None, np.ones((4, 2)), np.ones(4))


def test_width_mismatch(small_models):
    with pytest.raises(DimensionError):
        small_models["gbdt"].raw_score(np.zeros((2, 3)))


def test_half_probability_is_malicious():
    m = LinearSVM.from_weights([1.0, -1.0], 0.0)
    pred = m.predict(np.array([1, 1]))
    assert pred.probability == 0.5 and pred.label == 1


def test_negative_bias_only_model_is_benign():
    m = LinearSVM.from_weights([0.0, 0.0], -1.0)
    assert m.predict(np.zeros(2)).label == 0


def test_detection_rate():
    m = LinearSVM.from_weights([1.0], -0.5)
    rows = np.array([[1], [1], [1], [0]])
    assert detection_rate(m, rows) == 0.75
    with pytest.raises(EvaluationError):
        detection_rate(m, np.zeros((0, 1)))


def test_linear_weights_reconstruct_score(small_models, small_corpus):
    m = LinearSVM.from_weights([1.0, -2.0], 0.0)
    assert m.raw_score(np.array([1, 1]))[0] == -1.0
    svm = small_models["linear_svm"]
    lw = linear_weights(svm)
    X = small_corpus[0].X
    assert np.allclose(lw.decision_function(X), svm.raw_score(X), atol=1e-9)
    with pytest.raises(EvaluationError):
        linear_weights(small_models["gbdt"])


def test_gbdt_staged_scores(small_models, small_corpus):
    g = small_models["gbdt"]
    X = small_corpus[0].X[:20]
    staged = g.staged_raw_scores(X)
    assert staged.shape == (len(g.trees) + 1, 20)
    assert np.all(staged[0] == g.base_score)
    assert np.allclose(staged[-1], g.raw_score(X))


def test_forest_is_invariant_to_tree_order(small_models, small_corpus):
    rf = small_models["random_forest"]
    X = small_corpus[0].X
    flipped = model_from_json(model_to_json(rf))
    flipped.trees = flipped.trees[::-1]
    assert np.array_equal(flipped.raw_score(X), rf.raw_score(X))
    # vote fraction semantics
    assert np.allclose(rf.predict_proba(X), rf.votes(X) / len(rf.trees))


def test_tree_routing():
    # root splits on feature 1: 0 -> leaf -1, 1 -> leaf +2
    t = Tree([1, -1, -1], [1, -1, -1], [2, -1, -1], [0.0, -1.0, 2.0])
    X = np.array([[0, 0], [1, 1], [1, 0]])
    assert t.predict(X).tolist() == [-1.0, 2.0, -1.0]
    assert sorted(v for _, _, v in t.leaves()) == [-1.0, 2.0]


def test_mlp_gradients_match_finite_differences():
    r = np.random.default_rng(2)
    params = [
        (r.normal(size=(4, 5)), r.normal(size=5) * 0.1),
        (r.normal(size=(5, 3)), r.normal(size=3) * 0.1),
        (r.normal(size=(3, 1)), r.normal(size=1) * 0.1),
    ]
    X = r.integers(0, 2, size=(5, 4)).astype(float)
    y = np.array([0, 1, 1, 0, 1], dtype=float)
    _, grads = loss_and_grads(params, X, y)
    eps = 1e-4
    for layer in range(len(params)):
        for which in (0, 1):
            arr = params[layer][which]
            g = grads[layer][which]
            for idx in list(np.ndindex(arr.shape))[:6]:
                old = arr[idx]
                arr[idx] = old + eps
                up = loss_and_grads(params, X, y)[0]
                arr[idx] = old - eps
                down = loss_and_grads(params, X, y)[0]
                arr[idx] = old
                num = (up - down) / (2 * eps)
                assert abs(num - g[idx]) <= 1e-3 * max(1.0, abs(num), abs(g[idx]))


@pytest.mark.parametrize("kind", sorted(detectors.KINDS))
def test_reference_models_are_accurate(kind, small_models, small_corpus):
    ds, _ = small_corpus
    X, y = ds.part("test")
    assert small_models[kind].accuracy(X, y) >= 0.9
