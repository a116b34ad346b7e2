"""Attack experiments and the measurements reported on them."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import manipulation, selection
from .attribution import sample_background, shap_matrix
from .dataset import vectorize
from .errors import EvaluationError
from .seeding import derive_seed

REPORT_SCHEMA = "evlab-report/1"
STRATEGIES = ("amm", "stats")


def _rate(model, rows):
    rows = np.asarray(rows)
    if len(rows) == 0:
        return float("nan")
    return float(np.mean(model.predict_labels(rows) == 1))


def held_out_malware(dataset, samples):
    """Held-out malicious rows and their problem-space samples."""
    idx = dataset.indices("test")
    idx = idx[dataset.labels[idx] == 1]
    if len(idx) == 0:
        raise EvaluationError("the test split holds no malicious samples")
    if samples is None:
        return idx, None
    if len(samples) != len(dataset.labels):
        raise EvaluationError("problem-space samples do not line up with the dataset rows")
    return idx, [samples[i] for i in idx]


def _attack_rows(dataset, samples, idx, patch):
    """Adversarial rows, via build when problem-space samples are available."""
    X = dataset.X[idx]
    if samples is None:
        return manipulation.apply_patch_rows(X, patch), 0, len(idx)
    pairs, rows = manipulation.build_many(samples, patch, dataset.specs)
    ok = np.array([manipulation.verify_functionality(p) for p in pairs])
    skipped = sum(len(p.skipped_pairs) for p in pairs)
    return rows[ok], skipped, int(ok.sum())


def make_patch(strategy, model, dataset, N, seed=0, background_size=100):
    Xtr, ytr = dataset.part("train")
    if strategy == "amm":
        bg = sample_background(Xtr, background_size, derive_seed(seed, "background"))
        sm = shap_matrix(model, Xtr, bg, seed=seed)
        return selection.amm_select(Xtr, sm, dataset.specs, N, source_model_digest=model.digest())
    if strategy == "stats":
        sel = selection.stats_select(Xtr, ytr, N)
        return selection.stats_patch(sel, dataset.specs, n_requested=N)
    raise EvaluationError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


@dataclass
class TransferMatrix:
    generators: list
    targets: list
    rates: np.ndarray
    cosine: np.ndarray
    names: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)
    skipped_pairs: list = field(default_factory=list)

    def to_dict(self):
        return {
            "names": list(self.names),
            "generators": list(self.generators),
            "targets": list(self.targets),
            "rates": np.asarray(self.rates).tolist(),
            "cosine": np.asarray(self.cosine).tolist(),
            "n_samples": list(self.n_samples),
            "skipped_pairs": list(self.skipped_pairs),
        }


@dataclass
class DropHistogram:
    bin_width: float
    bins: dict
    excluded: list

    def to_dict(self):
        return {
            "bin_width": self.bin_width,
            "bins": [[b, c] for b, c in sorted(self.bins.items())],
            "excluded": list(self.excluded),
        }


@dataclass
class EvalReport:
    config_digest: str = ""
    seed_rates: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    transfer: TransferMatrix | None = None
    drop_histogram: DropHistogram | None = None
    case_traces: list = field(default_factory=list)
    hardening: list = field(default_factory=list)
    digests: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "config_digest": self.config_digest,
            "seed_rates": self.seed_rates,
            "attacks": self.attacks,
            "curve": self.curve,
            "transfer": self.transfer.to_dict() if self.transfer is not None else None,
            "drop_histogram": self.drop_histogram.to_dict() if self.drop_histogram is not None else None,
            "case_traces": self.case_traces,
            "hardening": self.hardening,
            "digests": self.digests,
        }

    def to_json(self):
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def merge(self, other):
        for name in ("seed_rates", "digests"):
            getattr(self, name).update(getattr(other, name))
        for name in ("attacks", "curve", "case_traces", "hardening"):
            getattr(self, name).extend(getattr(other, name))
        if other.transfer is not None:
            self.transfer = other.transfer
        if other.drop_histogram is not None:
            self.drop_histogram = other.drop_histogram
        return self


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, NaN turned into null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    return obj


def run_attack_eval(models, dataset, samples=None, strategies=STRATEGIES, N=30, seed=0) -> EvalReport:
    """White-box attack per (strategy, model) on the held-out malware.

    ``models`` maps a name to a fitted detector. The patch for each pair is
    generated on that model's training data and realised through ``build``
    when problem-space samples are given.
    """
    idx, mal_samples = held_out_malware(dataset, samples)
    report = EvalReport()
    seed_rows = dataset.X[idx]
    patches = {}
    for name, model in models.items():
        report.seed_rates[name] = {"rate": _rate(model, seed_rows), "n": int(len(idx))}
        report.digests[name] = model.digest()
    for strategy in strategies:
        for name, model in models.items():
            key = (strategy, "*") if strategy == "stats" else (strategy, name)
            if key not in patches:
                patches[key] = make_patch(strategy, model, dataset, N, seed)
            patch = patches[key]
            rows, skipped, n_ok = _attack_rows(dataset, mal_samples, idx, patch)
            report.attacks.append(
                {
                    "strategy": strategy,
                    "model": name,
                    "N": int(N),
                    "patch_len": len(patch),
                    "patch": [list(p) for p in patch.pairs],
                    "seed_rate": report.seed_rates[name]["rate"],
                    "adversarial_rate": _rate(model, rows),
                    "n": n_ok,
                    "skipped_pairs": int(skipped),
                }
            )
    return report


def _check_n_list(N_list):
    N_list = [int(n) for n in N_list]
    if any(n < 0 for n in N_list):
        raise EvaluationError("N values must be non-negative")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise EvaluationError(f"N_list must be strictly ascending without duplicates, got {N_list}")
    return N_list


def rate_vs_N(model, dataset, N_list, samples=None, patch=None, n_sets=5, set_size=None, seed=0):
    """Detection rate after applying the first ``N`` pairs of one AMM patch.

    The rate at each ``N`` is averaged over ``n_sets`` fixed random subsets
    of ``set_size`` held-out malicious samples (all of them when
    ``set_size`` is None).
    """
    N_list = _check_n_list(N_list)
    if n_sets < 1:
        raise EvaluationError("n_sets must be >= 1")
    if not N_list:
        return []
    idx, mal_samples = held_out_malware(dataset, samples)
    if patch is None:
        patch = make_patch("amm", model, dataset, max(N_list), seed)
    rng = np.random.default_rng(derive_seed(seed, "sets"))
    size = len(idx) if set_size is None else min(int(set_size), len(idx))
    sets = [np.sort(rng.choice(len(idx), size=size, replace=False)) for _ in range(n_sets)]
    points = []
    for n in N_list:
        rows, _, _ = _attack_rows(dataset, mal_samples, idx, patch.prefix(n))
        hits = model.predict_labels(rows) == 1
        per_set = np.array([hits[s].mean() for s in sets])
        points.append(
            {
                "N": n,
                "pairs_applied": min(n, len(patch)),
                "rate": float(per_set.mean()),
                "std": float(per_set.std(ddof=1)) if n_sets > 1 else 0.0,
                "n_sets": n_sets,
                "set_size": size,
            }
        )
    return points


def count_inversions(rates, tol_pp=2.0):
    """Return ``(n_increases, n_increases_above_tol)`` along a curve of rates in [0, 1]."""
    ups = [b - a for a, b in zip(rates, rates[1:]) if b > a + 1e-12]
    return len(ups), sum(1 for u in ups if u * 100 > tol_pp + 1e-9)


def topk_cosine(a, b, top_k):
    """Cosine of two AMM vectors on the union of their top-k features.

    Each vector's top-k values are min-max scaled to [0, 1] (a constant
    top-k set maps to 1) and every feature outside a vector's own top-k is
    zero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("AMM vectors come from different feature spaces")
    if top_k < 1:
        raise EvaluationError("top_k must be >= 1")
    k = min(int(top_k), len(a))
    ta = np.lexsort((np.arange(len(a)), -a))[:k]
    tb = np.lexsort((np.arange(len(b)), -b))[:k]
    union = np.union1d(ta, tb)

    def scaled(v, top):
        lo, hi = v[top].min(), v[top].max()
        s = (v[union] - lo) / (hi - lo) if hi > lo else np.ones(len(union))
        return np.where(np.isin(union, top), s, 0.0)

    va, vb = scaled(a, ta), scaled(b, tb)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def transfer_eval(models, dataset, samples=None, N=30, top_k=64, seed=0) -> TransferMatrix:
    """Adversarial samples generated on each model, scored on every model."""
    if len(models) < 2:
        raise EvaluationError("transfer evaluation needs at least two models")
    widths = {m.n_features for m in models.values()}
    if len(widths) != 1 or widths != {dataset.X.shape[1]}:
        raise EvaluationError(f"models were trained on different feature spaces: {sorted(widths)}")
    idx, mal_samples = held_out_malware(dataset, samples)
    Xtr = dataset.part("train")[0]
    bg = sample_background(Xtr, 100, derive_seed(seed, "background"))
    names = list(models)
    amm, adv, n_samples, skipped = {}, {}, [], []
    for name in names:
        model = models[name]
        sm = shap_matrix(model, Xtr, bg, seed=seed)
        amm[name] = selection.amm_vectors(sm.values).AMM
        patch = selection.amm_select(Xtr, sm, dataset.specs, N, source_model_digest=model.digest())
        rows, sk, n_ok = _attack_rows(dataset, mal_samples, idx, patch)
        adv[name] = rows
        n_samples.append(n_ok)
        skipped.append(int(sk))
    G = len(names)
    rates = np.zeros((G, G))
    cosine = np.zeros((G, G))
    for i, g in enumerate(names):
        for j, t in enumerate(names):
            rates[i, j] = _rate(models[t], adv[g])
            cosine[i, j] = topk_cosine(amm[g], amm[t], top_k)
    digests = [models[n].digest() for n in names]
    return TransferMatrix(digests, digests, rates, cosine, names, n_samples, skipped)


def transfer_spearman(tm: TransferMatrix):
    """Spearman correlation of cosine against evasion success over off-diagonal cells."""
    from scipy.stats import spearmanr

    G = len(tm.rates)
    off = ~np.eye(G, dtype=bool)
    cos = np.asarray(tm.cosine)[off]
    success = 1.0 - np.asarray(tm.rates)[off]
    if np.ptp(cos) == 0 or np.ptp(success) == 0:
        return float("nan")
    return float(spearmanr(cos, success).statistic)


def drop_bin(drop_pp, bin_width):
    """Bin label for a drop in percentage points: the next multiple of the width at or above it."""
    b = math.ceil(round(drop_pp / bin_width, 9)) * bin_width
    return b + 0


def drop_histogram(seed_rates, adv_rates, bin_width=10) -> DropHistogram:
    """Count detectors per drop bin, leaving out those with seed rate below 0.5."""
    if not bin_width > 0:
        raise EvaluationError(f"bin_width must be positive, got {bin_width}")
    if len(seed_rates) != len(adv_rates):
        raise EvaluationError("seed and adversarial rate lists differ in length")
    bins, excluded = {}, []
    for i, (s, a) in enumerate(zip(seed_rates, adv_rates)):
        if s < 0.5:
            excluded.append(i)
            continue
        b = drop_bin((s - a) * 100.0, bin_width)
        bins[b] = bins.get(b, 0) + 1
    return DropHistogram(bin_width, bins, excluded)


def case_trace(model, sample, specs, patch, N_max, background=None, seed=0):
    """Score a malicious sample as the patch prefix grows from 0 to ``N_max`` pairs."""
    from .attribution import shap_matrix as _shap

    x0 = vectorize(sample, specs)
    if model.predict(x0).label != 1:
        raise EvaluationError(f"sample {sample.sample_id} is not detected as malicious to begin with")
    if N_max < 0:
        raise EvaluationError("N_max must be non-negative")
    points, first = [], None
    last = x0
    for n in range(N_max + 1):
        pair = manipulation.build(sample, patch.prefix(n), specs)
        row = vectorize(pair.adversarial, specs)
        p = model.predict(row)
        points.append({"N": n, "raw_score": p.raw_score, "probability": p.probability, "label": p.label})
        if first is None and p.label == 0:
            first = n
        last = row
    trace = {"sample_id": sample.sample_id, "model": model.kind, "points": points, "first_evasion_N": first}
    if background is not None:
        sm = _shap(model, np.vstack([x0, last]), background, seed=seed)
        trace["phi_before"] = sm.values[0].tolist()
        trace["phi_after"] = sm.values[1].tolist()
        trace["phi0"] = sm.phi0
    if model.kind == "linear_svm":
        trace["decision_values"] = [pt["raw_score"] for pt in points]
    return trace


def hardening_eval(
    model,
    dataset,
    samples=None,
    ks=(5, 10, 20, 40),
    N=30,
    kind="gbdt",
    hyperparams=None,
    seed=0,
    sage_config=None,
    sage_ranking=None,
):
    """Compare retraining without the top-k AMM features against the top-k SAGE features.

    Both hardened detectors are scored on the seed malware and on the AMM
    adversarial samples that evaded ``model``.
    """
    from . import sage

    idx, mal_samples = held_out_malware(dataset, samples)
    Xtr = dataset.part("train")[0]
    bg = sample_background(Xtr, 100, derive_seed(seed, "background"))
    sm = shap_matrix(model, Xtr, bg, seed=seed)
    patch = selection.amm_select(Xtr, sm, dataset.specs, N, source_model_digest=model.digest())
    adv, _, _ = _attack_rows(dataset, mal_samples, idx, patch)
    evaded = adv[model.predict_labels(adv) == 0] if len(adv) else adv
    seed_rows = dataset.X[idx]
    Xte, yte = dataset.part("test")
    Xv, yv = dataset.part("val")
    if sage_ranking is None:
        sc = dict(sage_config or {})
        sage_ranking = sage.sage_values(model, Xv, yv, seed=derive_seed(seed, "sage"), **sc).ranking()
    rankings = {
        "amm": selection.amm_feature_ranking(Xtr, sm, dataset.specs),
        "sage": list(sage_ranking),
    }
    rows = [
        {
            "k": 0,
            "ranking": "base",
            "seed_rate": _rate(model, seed_rows),
            "adversarial_rate": _rate(model, evaded),
            "accuracy": model.accuracy(Xte, yte),
            "n_evaded": int(len(evaded)),
            "excluded": [],
        }
    ]
    for k in ks:
        for rname, ranking in rankings.items():
            hd = sage.exclude_and_retrain(dataset, ranking, int(k), kind, hyperparams, seed)
            rows.append(
                {
                    "k": int(k),
                    "ranking": rname,
                    "seed_rate": _rate(hd, seed_rows),
                    "adversarial_rate": _rate(hd, evaded),
                    "accuracy": hd.accuracy(Xte, yte),
                    "n_evaded": int(len(evaded)),
                    "excluded": hd.excluded_features,
                }
            )
    return rows


# -- emission

CSV_TABLES = {
    "seed_rates": ["model", "rate", "n"],
    "attacks": ["strategy", "model", "N", "patch_len", "seed_rate", "adversarial_rate", "n", "skipped_pairs"],
    "rate_vs_n": ["N", "pairs_applied", "rate", "std", "n_sets", "set_size"],
    "transfer": ["generator", "target", "rate", "cosine"],
    "drop_histogram": ["bin", "count"],
    "case_traces": ["sample_id", "model", "N", "raw_score", "probability", "label"],
    "hardening": ["k", "ranking", "seed_rate", "adversarial_rate", "accuracy", "n_evaded"],
}


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def csv_tables(report: EvalReport):
    t = {name: [] for name in CSV_TABLES}
    for name in sorted(report.seed_rates):
        t["seed_rates"].append({"model": name, **report.seed_rates[name]})
    t["attacks"] = list(report.attacks)
    t["rate_vs_n"] = list(report.curve)
    if report.transfer is not None:
        tm = report.transfer
        for i, g in enumerate(tm.names):
            for j, h in enumerate(tm.names):
                t["transfer"].append({"generator": g, "target": h, "rate": tm.rates[i][j], "cosine": tm.cosine[i][j]})
    if report.drop_histogram is not None:
        for b, c in sorted(report.drop_histogram.bins.items()):
            t["drop_histogram"].append({"bin": b, "count": c})
    for tr in report.case_traces:
        for p in tr["points"]:
            t["case_traces"].append({"sample_id": tr["sample_id"], "model": tr["model"], **p})
    t["hardening"] = list(report.hardening)
    return t


def render_csv(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def emit(report: EvalReport, out_dir, formats=("json", "csv", "svg")):
    """Write the report as canonical JSON, one CSV per metric and SVG figures; return the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create output directory {out}: {exc}") from exc
    unknown = set(formats) - {"json", "csv", "svg"}
    if unknown:
        raise EvaluationError(f"unknown output formats {sorted(unknown)}")
    written = []

    def put(name, text):
        p = out / name
        try:
            p.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise EvaluationError(f"cannot write {p}: {exc}") from exc
        written.append(p)

    if "json" in formats:
        put("report.json", report.to_json())
    if "csv" in formats:
        for name, rows in csv_tables(report).items():
            put(f"{name}.csv", render_csv(CSV_TABLES[name], rows))
    if "svg" in formats:
        from . import plotting

        for name, svg in plotting.render_all(report).items():
            put(name, svg)
    return written
