import numpy as np
import pytest

from evlab import detectors
from evlab.dataset import SynthConfig, generate_synthetic
from evlab.detectors.base import sigmoid


class FuncModel:
    """Wrap a plain function of a batch of rows as a scoring model."""

    kind = "func"

    def __init__(self, fn, d):
        self.fn = fn
        self.n_features = d

    def raw_score(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        return np.asarray(self.fn(X), dtype=np.float64)

    def proba_from_raw(self, raw):
        return sigmoid(raw)

    def predict_proba(self, X):
        return sigmoid(self.raw_score(X))

    def predict_labels(self, X):
        return (self.predict_proba(X) >= 0.5).astype(np.int64)


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(n_samples=600, n_features=60, n_planted_malicious=6, n_planted_benign=6, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_config):
    return generate_synthetic(small_config)


@pytest.fixture(scope="session")
def small_models(small_corpus):
    ds, _ = small_corpus
    X, y = ds.part("train")
    return {kind: detectors.fit(kind, None, X, y, seed=5) for kind in detectors.KINDS}


@pytest.fixture
def func_model():
    return FuncModel


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
