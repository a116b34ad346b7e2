"""Gradient boosted trees on the logistic loss (second-order leaf values)."""

import numpy as np

from .base import Detector, Tree, TreeBuilder, sigmoid


class GradientBoostedTrees(Detector):
    """Additive depth-limited trees fitted to the logistic loss.

    The raw score is the logit: ``base_score + sum(tree(x))``. Each tree is
    grown depth-first with the usual gradient/hessian gain and
    ``-G / (H + l2)`` leaf values, shrunk by ``learning_rate``.
    """

    kind = "gbdt"
    defaults = {
        "n_trees": 100,
        "max_depth": 2,
        "learning_rate": 0.1,
        "l2": 1.0,
        "min_child_weight": 1e-3,
        "min_samples_leaf": 1,
        "subsample": 1.0,
    }

    def _fit(self, X, y, seed):
        hp = self.hyperparams
        rng = np.random.default_rng(seed)
        n = len(y)
        p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.base_score = float(np.log(p0 / (1 - p0)))
        self.trees = []
        F = np.full(n, self.base_score)
        for _ in range(hp["n_trees"]):
            p = sigmoid(F)
            g, h = p - y, p * (1 - p)
            if hp["subsample"] < 1.0:
                idx = np.flatnonzero(rng.random(n) < hp["subsample"])
            else:
                idx = np.arange(n)
            tree = self._grow(X, g, h, idx)
            self.trees.append(tree)
            F = F + tree.predict(X)
        p = np.clip(sigmoid(F), 1e-12, 1 - 1e-12)
        self.train_info = {"final_loss": float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))}

    def _grow(self, X, g, h, idx):
        hp = self.hyperparams
        b = TreeBuilder()
        lam = hp["l2"]

        def grow(node_idx, depth):
            node = b.add()
            G, H = g[node_idx].sum(), h[node_idx].sum()
            b.value[node] = float(-hp["learning_rate"] * G / (H + lam))
            if depth >= hp["max_depth"] or len(node_idx) < 2 * hp["min_samples_leaf"]:
                return node
            Xn = X[node_idx]
            N1 = Xn.sum(axis=0)
            G1, H1 = Xn.T @ g[node_idx], Xn.T @ h[node_idx]
            G0, H0 = G - G1, H - H1
            gain = G1**2 / (H1 + lam) + G0**2 / (H0 + lam) - G**2 / (H + lam)
            m = hp["min_samples_leaf"]
            ok = (N1 >= m) & (len(node_idx) - N1 >= m)
            ok &= (H1 >= hp["min_child_weight"]) & (H0 >= hp["min_child_weight"])
            if not ok.any():
                return node
            gain = np.where(ok, gain, -np.inf)
            f = int(np.argmax(gain))
            if not gain[f] > 1e-12:
                return node
            bit = Xn[:, f] > 0.5
            b.feature[node] = f
            b.left[node] = grow(node_idx[~bit], depth + 1)
            b.right[node] = grow(node_idx[bit], depth + 1)
            return node

        grow(idx, 0)
        return b.build()

    def _raw(self, X):
        F = np.full(len(X), self.base_score)
        for t in self.trees:
            F += t.predict(X)
        return F

    def staged_raw_scores(self, X):
        """Raw scores after 0, 1, ..., n_trees trees; shape ``(n_trees + 1, n)``."""
        X = self._check(X)
        out = [np.full(len(X), self.base_score)]
        for t in self.trees:
            out.append(out[-1] + t.predict(X))
        return np.array(out)

    def tree_ensemble(self):
        return list(self.trees), self.base_score

    def params_to_dict(self):
        return {"base_score": repr(self.base_score), "trees": [t.to_dict() for t in self.trees]}

    def params_from_dict(self, d):
        self.base_score = float(d["base_score"])
        self.trees = [Tree.from_dict(t) for t in d["trees"]]

