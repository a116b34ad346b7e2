"""Linear SVM trained by stochastic subgradient descent on the hinge loss."""

from dataclasses import dataclass

import numpy as np

from ..errors import EvaluationError
from .base import Detector, decode_floats, encode_floats


@dataclass(frozen=True)
class LinearWeights:
    weights: np.ndarray
    bias: float

    def decision_function(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.bias + X @ self.weights


class LinearSVM(Detector):
    """Minimises ``l2/2 |w|^2 + mean(max(0, 1 - y (w.x + b)))`` with y in {-1, +1}.

    Mini-batch subgradient steps with a ``1/sqrt(t)`` schedule; the returned
    weights are the average of the iterates over the second half of
    training. The raw score is the margin, mapped to a probability by the
    logistic function so that margin 0 sits on the 0.5 boundary.
    """

    kind = "linear_svm"
    defaults = {"l2": 1e-3, "epochs": 40, "batch_size": 32, "learning_rate": 0.5}

    def _fit(self, X, y, seed):
        hp = self.hyperparams
        rng = np.random.default_rng(seed)
        n, d = X.shape
        ys = 2.0 * y - 1.0
        w, b = np.zeros(d), 0.0
        w_avg, b_avg, n_avg = np.zeros(d), 0.0, 0
        t = 0
        bs = hp["batch_size"]
        for epoch in range(hp["epochs"]):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                t += 1
                sel = order[start : start + bs]
                Xb, yb = X[sel], ys[sel]
                viol = yb * (Xb @ w + b) < 1.0
                gw = hp["l2"] * w - (yb[viol] @ Xb[viol]) / len(sel)
                gb = -yb[viol].sum() / len(sel)
                eta = hp["learning_rate"] / np.sqrt(t)
                w = w - eta * gw
                b = b - eta * gb
                if epoch >= hp["epochs"] // 2:
                    w_avg += w
                    b_avg += b
                    n_avg += 1
        self.weights = w_avg / n_avg if n_avg else w
        self.bias = float(b_avg / n_avg) if n_avg else float(b)
        margins = ys * (X @ self.weights + self.bias)
        loss = 0.5 * hp["l2"] * self.weights @ self.weights + np.maximum(0, 1 - margins).mean()
        self.train_info = {"final_loss": float(loss)}

    def _raw(self, X):
        return self.bias + X @ self.weights

    def linear_weights(self):
        return LinearWeights(self.weights.copy(), float(self.bias))

    def params_to_dict(self):
        return {"weights": encode_floats(self.weights), "bias": repr(float(self.bias))}

    def params_from_dict(self, d):
        self.weights = decode_floats(d["weights"])
        self.bias = float(d["bias"])

    @classmethod
    def from_weights(cls, weights, bias):
        m = cls()
        m.weights = np.asarray(weights, dtype=np.float64)
        m.bias = float(bias)
        m.n_features = len(m.weights)
        return m


def linear_weights(model) -> LinearWeights:
    if getattr(model, "kind", None) != "linear_svm":
        raise EvaluationError(f"linear weights are only defined for linear_svm, not {getattr(model, 'kind', model)!r}")
    return model.linear_weights()
