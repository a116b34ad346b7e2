"""Per-sample Shapley attributions against a background set.

Every method estimates the same interventional value function::

    v(S) = mean over background rows z of score(x on S, z elsewhere)

so ``v(empty)`` is the background mean prediction (``phi0``) and
``v(all) = score(x)``. ``exact`` enumerates all coalitions, ``permutation``
and ``kernel`` are sampling estimators, ``linear`` is the closed form for
linear scores and ``tree`` computes exact values for tree ensembles from
their leaf paths.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AttributionError, ConfigError, ParseError
from .seeding import array_digest, derive_seed

EXACT_MAX_FEATURES = 15
METHODS = ("exact", "permutation", "kernel", "linear", "tree")


@dataclass
class Attribution:
    phi: np.ndarray
    phi0: float
    method: str
    n_draws: int = 0
    std_errors: np.ndarray | None = None
    fx: float | None = None


@dataclass(frozen=True)
class KernelShapConfig:
    n_coalitions: int = 2048
    regularization: float = 0.0
    seed: int = 0

    def validate(self, d):
        if self.n_coalitions < d + 2:
            raise ConfigError(f"n_coalitions must be >= d + 2 = {d + 2}, got {self.n_coalitions}")
        if self.regularization < 0:
            raise ConfigError("regularization must be >= 0")


def _scorer(model, score):
    if score == "raw":
        return model.raw_score
    if score == "probability":
        return model.predict_proba
    raise AttributionError(f"unknown score {score!r}")


def _prep(x, background):
    x = np.asarray(x, dtype=np.float64).ravel()
    Z = np.asarray(background, dtype=np.float64)
    if Z.ndim != 2 or len(Z) == 0:
        raise AttributionError("background set must be a non-empty 2-D array")
    if Z.shape[1] != len(x):
        raise AttributionError(f"background has {Z.shape[1]} columns, sample has {len(x)}")
    return x, Z


def sample_background(X, size=100, seed=0):
    """``size`` distinct rows of ``X`` (all rows if fewer), chosen by ``seed``."""
    X = np.asarray(X)
    if len(X) <= size:
        return X.copy()
    idx = np.sort(np.random.default_rng(int(seed)).choice(len(X), size=size, replace=False))
    return X[idx]


def coalition_values(f, x, Z, masks, chunk_rows=200_000):
    """``v(S)`` for every boolean mask row (True = feature takes x's value)."""
    masks = np.asarray(masks, dtype=bool)
    m = len(Z)
    per = max(1, chunk_rows // m)
    out = np.empty(len(masks))
    for start in range(0, len(masks), per):
        mk = masks[start : start + per]
        H = np.where(mk[:, None, :], x[None, None, :], Z[None, :, :])
        out[start : start + per] = f(H.reshape(-1, len(x))).reshape(len(mk), m).mean(axis=1)
    return out


def _all_masks(d):
    codes = np.arange(1 << d)
    return ((codes[:, None] >> np.arange(d)) & 1).astype(bool)


def shap_exact(model, x, background, score="raw") -> Attribution:
    x, Z = _prep(x, background)
    d = len(x)
    if d > EXACT_MAX_FEATURES:
        raise AttributionError(
            f"exact enumeration is limited to d <= {EXACT_MAX_FEATURES} (got {d}); "
            "use shap_permutation or shap_kernel"
        )
    v = coalition_values(_scorer(model, score), x, Z, _all_masks(d))
    codes = np.arange(1 << d)
    sizes = np.array([bin(c).count("1") for c in codes])
    fact = [math.factorial(i) for i in range(d + 1)]
    weight = np.array([fact[s] * fact[d - s - 1] / fact[d] if s < d else 0.0 for s in range(d + 1)])
    phi = np.empty(d)
    for j in range(d):
        without = codes[(codes >> j) & 1 == 0]
        phi[j] = np.sum(weight[sizes[without]] * (v[without | (1 << j)] - v[without]))
    return Attribution(phi, float(v[0]), "exact", 0, np.zeros(d), float(v[-1]))


def _orderings(d, n, rng, antithetic):
    """``n`` feature orderings; with ``antithetic`` every other one is the reverse of its predecessor."""
    out = []
    while len(out) < n:
        p = rng.permutation(d)
        out.append(p)
        if antithetic and len(out) < n:
            out.append(p[::-1])
    return out


def shap_permutation(
    model, x, background, n_permutations=100, seed=0, score="raw", antithetic=True, background_samples=None
) -> Attribution:
    """Permutation-sampling estimate of the interventional Shapley values.

    For each ordering, features are switched from the background row to
    ``x`` one at a time and each switch is credited with the change in score.
    Only switches that actually change a row are evaluated. With
    ``background_samples`` each ordering uses that many randomly drawn
    background rows instead of all of them.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    x, Z = _prep(x, background)
    f = _scorer(model, score)
    d = len(x)
    rng = np.random.default_rng(int(seed))
    per_draw = []
    orders = _orderings(d, n_permutations, rng, antithetic)
    for order in orders:
        Zs = Z if background_samples is None else Z[rng.integers(0, len(Z), size=background_samples)]
        per_draw.append(_chain_contributions(f, x, Zs, order))
    draws = np.array(per_draw)
    phi = draws.mean(axis=0)
    if antithetic and len(draws) >= 2:
        k = len(draws) // 2
        units = (draws[0 : 2 * k : 2] + draws[1 : 2 * k : 2]) / 2
    else:
        units = draws
    se = units.std(axis=0, ddof=1) / np.sqrt(len(units)) if len(units) > 1 else np.full(d, np.nan)
    phi0 = float(np.mean(f(Z)))
    return Attribution(phi, phi0, "permutation", len(orders), se, float(f(x[None, :])[0]))


def _chain_contributions(f, x, Z, order):
    m, d = Z.shape
    diff = Z[:, order] != x[order]  # m x d, in ordering position
    zi, pos = np.nonzero(diff)
    if len(zi) == 0:
        return np.zeros(d)
    # state after switching positions [0..pos] for background row zi
    prefix = np.zeros((len(zi), d), dtype=bool)
    reach = np.arange(d)[None, :] <= pos[:, None]
    prefix[:, order] = reach
    states = np.where(prefix, x[None, :], Z[zi])
    vals = f(np.vstack([Z, states]))
    base, after = vals[:m], vals[m:]
    # previous value in each background row's chain
    prev = np.empty_like(after)
    first = np.ones(len(zi), dtype=bool)
    first[1:] = zi[1:] != zi[:-1]
    prev[first] = base[zi[first]]
    prev[~first] = after[:-1][~first[1:]]
    phi = np.zeros(d)
    np.add.at(phi, order[pos], (after - prev) / m)
    return phi


# ------------------------------------------------------------------ kernel


def kernel_weight(d, s):
    """Shapley kernel weight of a coalition of size ``s`` (0 < s < d)."""
    return (d - 1) / (math.comb(d, s) * s * (d - s))


def solve_kernel_wls(Z, v, weights, fx, phi0, regularization=0.0):
    """Weighted least squares for the additive surrogate with efficiency imposed.

    Minimises ``sum w (v - phi0 - Z.phi)^2 + reg |phi|^2`` subject to
    ``sum(phi) = fx - phi0`` by eliminating the last coefficient.
    """
    Z = np.asarray(Z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    d = Z.shape[1]
    delta = fx - phi0
    if d == 1:
        return np.array([delta])
    A = Z[:, :-1] - Z[:, -1:]
    b = v - phi0 - Z[:, -1] * delta
    M = A.T @ (w[:, None] * A)
    rhs = A.T @ (w * b)
    if regularization > 0:
        M = M + regularization * (np.eye(d - 1) + np.ones((d - 1, d - 1)))
        rhs = rhs + regularization * delta
    if np.linalg.matrix_rank(M) < d - 1:
        raise AttributionError("singular kernel normal equations; increase n_coalitions")
    head = np.linalg.solve(M, rhs)
    return np.append(head, delta - head.sum())


def kernel_coalitions(d, config: KernelShapConfig):
    """Coalition masks and their weights: exhaustive when affordable, else kernel-sampled with counts."""
    total = (1 << d) - 2
    if config.n_coalitions >= total:
        masks = _all_masks(d)[1:-1]
        sizes = masks.sum(axis=1)
        return masks, np.array([kernel_weight(d, s) for s in sizes])
    rng = np.random.default_rng(int(config.seed))
    sizes = np.arange(1, d)
    p = np.array([(d - 1) / (s * (d - s)) for s in sizes])
    p /= p.sum()
    drawn = rng.choice(sizes, size=config.n_coalitions, p=p)
    masks = np.zeros((config.n_coalitions, d), dtype=bool)
    for i, s in enumerate(drawn):
        masks[i, rng.choice(d, size=s, replace=False)] = True
    uniq, counts = np.unique(masks, axis=0, return_counts=True)
    return uniq, counts.astype(np.float64)


def shap_kernel(model, x, background, config: KernelShapConfig | None = None, score="raw") -> Attribution:
    x, Z = _prep(x, background)
    d = len(x)
    config = config or KernelShapConfig()
    config.validate(d)
    f = _scorer(model, score)
    phi0 = float(np.mean(f(Z)))
    fx = float(f(x[None, :])[0])
    masks, weights = kernel_coalitions(d, config)
    v = coalition_values(f, x, Z, masks)
    phi = solve_kernel_wls(masks, v, weights, fx, phi0, config.regularization)
    return Attribution(phi, phi0, "kernel", int(len(masks)), None, fx)


# ------------------------------------------------------------------ closed forms


def shap_linear(weights, x, background) -> Attribution:
    """``phi_j = w_j (x_j - mu_j)`` and ``phi0 = bias + w.mu`` with ``mu`` the background mean."""
    x = np.asarray(x, dtype=np.float64).ravel()
    mu = np.asarray(background, dtype=np.float64).mean(axis=0)
    w = np.asarray(weights.weights, dtype=np.float64)
    phi = w * (x - mu)
    phi0 = float(weights.bias + w @ mu)
    return Attribution(phi, phi0, "linear", 0, np.zeros(len(w)), float(weights.bias + w @ x))


_FACT = np.array([math.factorial(i) for i in range(64)], dtype=np.float64)


def _unpack(codes, k):
    return ((codes[:, None] >> np.arange(k)) & 1).astype(bool)


def shap_tree_batch(trees, offset, X, Z):
    """Exact interventional Shapley values for a sum of trees, one row per sample.

    A leaf with path conditions P contributes its value to ``score(h)`` iff the
    hybrid row ``h`` meets every condition. For a pair (x, z) let A be the
    conditions met only by x and B those met only by z; the leaf is reached
    from coalition S iff A is inside S and B is outside it, whose Shapley
    values are ``+val (|A|-1)! |B|! / (|A|+|B|)!`` on A and
    ``-val |A|! (|B|-1)! / (|A|+|B|)!`` on B. Rows and background rows are
    grouped by their pattern on P so each leaf costs one small table.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n, d = X.shape
    m = len(Z)
    phi = np.zeros((n, d))
    for tree in trees:
        for feats, bits, val in tree.leaves():
            k = len(feats)
            if k == 0 or val == 0.0:
                continue
            pw = 1 << np.arange(k)
            cx = ((X[:, feats] > 0.5) == bits) @ pw
            cz = ((Z[:, feats] > 0.5) == bits) @ pw
            ux, inv = np.unique(cx, return_inverse=True)
            uz, cnt = np.unique(cz, return_counts=True)
            SX, SZ = _unpack(ux, k), _unpack(uz, k)
            reach = (SX[:, None, :] | SZ[None, :, :]).all(axis=-1)
            A = SX[:, None, :] & ~SZ[None, :, :]
            a = A.sum(axis=-1)
            b = np.broadcast_to((~SX).sum(axis=-1)[:, None], a.shape)
            scale = val * reach * (cnt / m)[None, :]
            tot = _FACT[a + b]
            wplus = np.where(a > 0, _FACT[np.maximum(a - 1, 0)] * _FACT[b] / tot, 0.0) * scale
            wminus = np.where(b > 0, _FACT[a] * _FACT[np.maximum(b - 1, 0)] / tot, 0.0) * scale
            C = np.einsum("uvk,uv->uk", A, wplus) - (~SX) * wminus.sum(axis=1)[:, None]
            phi[:, feats] += C[inv.ravel()]
    return phi


def shap_tree(model, x, background) -> Attribution:
    x, Z = _prep(x, background)
    trees, offset = model.tree_ensemble()
    phi = shap_tree_batch(trees, offset, x[None, :], Z)[0]
    phi0 = float(np.mean(model.raw_score(Z)))
    return Attribution(phi, phi0, "tree", 0, np.zeros(len(x)), float(model.raw_score(x[None, :])[0]))


# ------------------------------------------------------------------ matrices


@dataclass
class ShapMatrix:
    values: np.ndarray
    phi0: float
    method: str
    sample_ids: list
    background_digest: str = ""
    model_digest: str = ""
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sample_ids):
            raise AttributionError("SHAP matrix rows must align with sample ids")

    def rows(self, idx):
        return ShapMatrix(
            self.values[idx],
            self.phi0,
            self.method,
            [self.sample_ids[i] for i in np.asarray(idx)],
            self.background_digest,
            self.model_digest,
            dict(self.config),
        )

    def __eq__(self, other):
        return (
            isinstance(other, ShapMatrix)
            and np.array_equal(self.values, other.values)
            and self.phi0 == other.phi0
            and self.method == other.method
            and list(self.sample_ids) == list(other.sample_ids)
            and self.background_digest == other.background_digest
            and self.model_digest == other.model_digest
            and self.config == other.config
        )


def default_method(model):
    if getattr(model, "kind", None) == "linear_svm":
        return "linear"
    if hasattr(model, "tree_ensemble"):
        return "tree"
    return "permutation"


def _threads():
    try:
        return max(0, int(os.environ.get("EVLAB_THREADS", "0")))
    except ValueError:
        return 0


def shap_matrix(
    model,
    X,
    background,
    method="auto",
    sample_ids=None,
    seed=0,
    n_permutations=16,
    kernel_config=None,
    background_samples=None,
) -> ShapMatrix:
    """Attribution of every row of ``X`` (raw-score target).

    Rows are independent and row ``i`` of a sampling method uses the seed
    ``derive_seed(seed, "row", i)``, so threaded (``EVLAB_THREADS``) and
    serial runs agree bit for bit.
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(background, dtype=np.float64)
    n, d = X.shape
    if method == "auto":
        method = default_method(model)
    if method not in METHODS:
        raise AttributionError(f"unknown attribution method {method!r}")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(n)]
    config = {"method": method, "seed": int(seed)}
    phi0 = float(np.mean(model.raw_score(Z)))

    if method == "tree":
        if not hasattr(model, "tree_ensemble"):
            raise AttributionError(f"tree attribution needs a tree ensemble, not {model.kind}")
        trees, offset = model.tree_ensemble()
        values = shap_tree_batch(trees, offset, X, Z)
    elif method == "linear":
        from .detectors import linear_weights

        lw = linear_weights(model)
        mu = Z.mean(axis=0)
        values = (X - mu) * lw.weights
    else:
        if method == "exact" and d > EXACT_MAX_FEATURES:
            raise AttributionError(f"exact method needs d <= {EXACT_MAX_FEATURES}, got {d}")
        if method == "permutation":
            config.update(n_permutations=n_permutations, background_samples=background_samples)
        if method == "kernel":
            kc = kernel_config or KernelShapConfig()
            config.update(n_coalitions=kc.n_coalitions, regularization=kc.regularization)

        def one(i):
            s = derive_seed(seed, "row", i)
            try:
                if method == "exact":
                    return shap_exact(model, X[i], Z).phi
                if method == "permutation":
                    return shap_permutation(
                        model, X[i], Z, n_permutations, s, background_samples=background_samples
                    ).phi
                kc = kernel_config or KernelShapConfig()
                return shap_kernel(model, X[i], Z, KernelShapConfig(kc.n_coalitions, kc.regularization, s)).phi
            except AttributionError as exc:
                raise AttributionError(f"row {i}: {exc}") from exc

        threads = _threads()
        if threads > 0:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                values = np.array(list(pool.map(one, range(n))))
        else:
            values = np.array([one(i) for i in range(n)])
        values = values.reshape(n, d)

    from .detectors.io import model_to_json
    from .seeding import text_digest

    return ShapMatrix(
        values,
        phi0,
        method,
        list(sample_ids),
        array_digest(Z),
        text_digest(model_to_json(model)),
        config,
    )


def save_shap_matrix(sm: ShapMatrix, path, feature_names=None, extra_meta=None):
    """CSV of values (``sample_id`` first) plus a ``.json`` sidecar with phi0, method, seeds and digests."""
    path = Path(path)
    d = sm.values.shape[1]
    names = list(feature_names) if feature_names is not None else [f"f{j}" for j in range(d)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", *names])
        for sid, row in zip(sm.sample_ids, sm.values):
            w.writerow([sid, *(repr(float(v)) for v in row)])
    meta = {
        "phi0": repr(sm.phi0),
        "method": sm.method,
        "config": sm.config,
        "background_digest": sm.background_digest,
        "model_digest": sm.model_digest,
        "n_rows": len(sm.sample_ids),
        "n_features": d,
        "score": "raw",
    }
    meta.update(extra_meta or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_shap_matrix(path) -> ShapMatrix:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    ids, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(rec)}", line=lineno, path=str(path))
            ids.append(rec[0])
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=str(path)) from exc
    values = np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return ShapMatrix(
        values,
        float(meta["phi0"]),
        meta["method"],
        ids,
        meta["background_digest"],
        meta["model_digest"],
        meta["config"],
    )
