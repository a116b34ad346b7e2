"""Feed-forward network with three rectifier hidden layers and a sigmoid output."""

import numpy as np

from .base import Detector, decode_floats, encode_floats, sigmoid


def forward(params, X):
    """Return the output logits and the per-layer activations needed by backprop."""
    acts = [X]
    h = X
    for W, b in params[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = params[-1]
    return (h @ W + b)[:, 0], acts


def loss_and_grads(params, X, y):
    """Mean binary cross-entropy on the logits and its gradient for every (W, b)."""
    z, acts = forward(params, X)
    n = len(y)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    delta = ((sigmoid(z) - y) / n)[:, None]
    grads = [None] * len(params)
    for layer in range(len(params) - 1, -1, -1):
        W, _ = params[layer]
        a = acts[layer]
        grads[layer] = (a.T @ delta, delta.sum(axis=0))
        if layer:
            delta = (delta @ W.T) * (a > 0)
    return loss, grads


class MLP(Detector):
    kind = "mlp"
    defaults = {
        "hidden": (64, 32, 16),
        "epochs": 30,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "weight_decay": 0.0,
    }

    def _fit(self, X, y, seed):
        hp = self.hyperparams
        rng = np.random.default_rng(seed)
        sizes = [X.shape[1], *hp["hidden"], 1]
        self.params = [
            (rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)), np.zeros(fan_out))
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:])
        ]
        # Adam
        m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.params]
        v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in self.params]
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, hp["learning_rate"]
        t = 0
        n = len(y)
        for _ in range(hp["epochs"]):
            order = rng.permutation(n)
            for start in range(0, n, hp["batch_size"]):
                sel = order[start : start + hp["batch_size"]]
                _, grads = loss_and_grads(self.params, X[sel], y[sel])
                t += 1
                new = []
                for i, ((W, b), (gW, gb)) in enumerate(zip(self.params, grads)):
                    gW = gW + hp["weight_decay"] * W
                    mW, mb = b1 * m[i][0] + (1 - b1) * gW, b1 * m[i][1] + (1 - b1) * gb
                    vW, vb = b2 * v[i][0] + (1 - b2) * gW**2, b2 * v[i][1] + (1 - b2) * gb**2
                    m[i], v[i] = (mW, mb), (vW, vb)
                    c1, c2 = 1 - b1**t, 1 - b2**t
                    W = W - lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
                    b = b - lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
                    new.append((W, b))
                self.params = new
        self.train_info = {"final_loss": loss_and_grads(self.params, X, y)[0]}

    def _raw(self, X):
        return forward(self.params, X)[0]

    def params_to_dict(self):
        return {
            "layers": [
                {"shape": list(W.shape), "W": encode_floats(W), "b": encode_floats(b)} for W, b in self.params
            ]
        }

    def params_from_dict(self, d):
        self.params = [
            (decode_floats(L["W"], tuple(L["shape"])), decode_floats(L["b"])) for L in d["layers"]
        ]
