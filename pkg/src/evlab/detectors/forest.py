"""Random forest of bagged CART trees split on Gini impurity."""

import math

import numpy as np

from .base import Detector, Tree, TreeBuilder


class RandomForest(Detector):
    """Bagged CART trees with per-node feature subsampling.

    Every tree casts one hard vote. The probability is the fraction of
    malicious votes and the raw score is that fraction minus 0.5, so a tie
    in the vote is labelled malicious.
    """

    kind = "random_forest"
    defaults = {
        "n_trees": 50,
        "max_depth": 10,
        "max_features": "sqrt",
        "min_samples_leaf": 1,
        "bootstrap": True,
    }

    def _n_candidates(self, d):
        mf = self.hyperparams["max_features"]
        if mf == "sqrt":
            return max(1, int(math.sqrt(d)))
        if mf is None or mf == "all":
            return d
        return max(1, min(d, int(mf)))

    def _fit(self, X, y, seed):
        hp = self.hyperparams
        rng = np.random.default_rng(seed)
        n, d = X.shape
        k = self._n_candidates(d)
        self.trees = []
        for _ in range(hp["n_trees"]):
            if hp["bootstrap"]:
                idx = rng.integers(0, n, size=n)
            else:
                idx = np.arange(n)
            self.trees.append(self._grow(X, y, idx, k, rng))
        self.train_info = {"final_loss": 1.0 - self.accuracy(X, y)}

    def _grow(self, X, y, idx, k, rng):
        hp = self.hyperparams
        b = TreeBuilder()
        m = hp["min_samples_leaf"]

        def grow(node_idx, depth):
            node = b.add()
            n = len(node_idx)
            pos = y[node_idx].sum()
            b.value[node] = 1.0 if pos >= n - pos else 0.0
            if depth >= hp["max_depth"] or pos == 0 or pos == n or n < 2 * m:
                return node
            Xn = X[node_idx]
            n1 = Xn.sum(axis=0)
            usable = np.flatnonzero((n1 >= m) & (n - n1 >= m))
            if len(usable) == 0:
                return node
            # same as drawing features without replacement until k non-constant ones are found
            order = rng.permutation(X.shape[1])
            cand = order[np.isin(order, usable)][:k]
            c1 = n1[cand]
            p1 = Xn[:, cand].T @ y[node_idx]
            c0, p0 = n - c1, pos - p1
            gini1 = 1 - (p1 / c1) ** 2 - (1 - p1 / c1) ** 2
            gini0 = 1 - (p0 / c0) ** 2 - (1 - p0 / c0) ** 2
            weighted = (c1 * gini1 + c0 * gini0) / n
            parent = 1 - (pos / n) ** 2 - (1 - pos / n) ** 2
            best = int(np.argmin(weighted))
            if not parent - weighted[best] > 1e-12:
                return node
            f = int(cand[best])
            bit = Xn[:, f] > 0.5
            b.feature[node] = f
            b.left[node] = grow(node_idx[~bit], depth + 1)
            b.right[node] = grow(node_idx[bit], depth + 1)
            return node

        grow(idx, 0)
        return b.build()

    def votes(self, X):
        X = self._check(X)
        v = np.zeros(len(X), dtype=np.int64)
        for t in self.trees:
            v += t.predict(X).astype(np.int64)
        return v

    def _raw(self, X):
        return self.votes(X) / len(self.trees) - 0.5

    def proba_from_raw(self, raw):
        return np.asarray(raw, dtype=np.float64) + 0.5

    def tree_ensemble(self):
        """Trees rescaled so their sum plus the offset equals the raw score."""
        T = len(self.trees)
        scaled = [Tree(t.feature, t.left, t.right, t.value / T) for t in self.trees]
        return scaled, -0.5

    def params_to_dict(self):
        return {"trees": [t.to_dict() for t in self.trees]}

    def params_from_dict(self, d):
        self.trees = [Tree.from_dict(t) for t in d["trees"]]
