"""``evlab`` command line: every command reads a JSON config and works inside one run directory."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, EvlabError

log = logging.getLogger("evlab")

MANIFEST = "manifest.json"
FORMATS = ("json", "csv", "svg")


class RunDirError(EvlabError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


def _versions():
    import matplotlib
    import scipy

    return {
        "evlab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }


class Workspace:
    """A run directory tied to one config hash."""

    def __init__(self, root, cfg, force=False):
        from .config import config_hash, seeds

        self.root = Path(root)
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.seeds = seeds(cfg)
        self._claim(force)

    def _claim(self, force):
        m = self.root / MANIFEST
        if m.is_file():
            try:
                old = json.loads(m.read_text(encoding="utf-8"))
            except ValueError:
                old = {}
            if old.get("config_hash") == self.hash:
                return
            if not force:
                raise RunDirError(
                    f"{self.root} holds artifacts of config {old.get('config_hash')!r}, not {self.hash!r}; pass --force to replace them",
                    path=str(self.root),
                )
            self._clear(old.get("files", {}))
        elif self.root.is_dir() and any(self.root.iterdir()) and not force:
            raise RunDirError(f"{self.root} is not empty and has no run manifest; pass --force to use it", path=str(self.root))

    def _clear(self, files):
        for rel in files:
            p = self.root / rel
            if p.is_file():
                p.unlink()
        for d in sorted((p for p in self.root.rglob("*") if p.is_dir()), key=lambda p: -len(p.parts)):
            if not any(d.iterdir()):
                d.rmdir()

    def path(self, rel):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel, hint):
        p = self.root / rel
        if not p.exists():
            raise RunDirError(f"missing {p}; {hint}", path=str(p))
        return p

    def write_json(self, rel, doc):
        doc = dict(doc)
        doc["config_hash"] = self.hash
        self.path(rel).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    def finish(self):
        from .config import canonical
        from .seeding import text_digest

        files = {
            p.relative_to(self.root).as_posix(): text_digest(p.read_bytes())
            for p in sorted(self.root.rglob("*"))
            if p.is_file() and p.name != MANIFEST
        }
        doc = {
            "format": "evlab-run/1",
            "config_hash": self.hash,
            "config": json.loads(canonical(self.cfg)),
            "seeds": self.seeds,
            "versions": _versions(),
            "files": files,
        }
        self.path(MANIFEST).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# -- pipeline steps


def step_gen(ws):
    from . import dataset as D

    src = ws.cfg["dataset"]
    if "synthetic" in src:
        from .config import synth_config

        ds, samples = D.generate_synthetic(synth_config(ws.cfg))
    else:
        ds, samples = D.load_csv(src["csv"]), None
    D.save_csv(ds, ws.path("dataset/dataset.csv"))
    if samples is not None:
        for s in samples:
            D.write_samp(s, ws.path(f"dataset/samples/{s.sample_id}.samp"))
    ws.write_json(
        "dataset/summary.json",
        {
            "n_samples": int(len(ds.labels)),
            "n_features": int(ds.X.shape[1]),
            "splits": {t: int(len(ds.indices(t))) for t in D.SPLITS},
            "malicious": int(ds.labels.sum()),
            "problem_space": samples is not None,
        },
    )
    return ds, samples


def load_data(ws):
    from . import dataset as D

    ds = D.load_csv(ws.need("dataset/dataset.csv", "run `evlab gen` first"))
    sdir = ws.root / "dataset" / "samples"
    samples = None
    if sdir.is_dir():
        samples = [D.read_samp(sdir / f"{sid}.samp") for sid in ds.matrix.sample_ids]
    return ds, samples


def step_train(ws, ds, kinds=None):
    from . import detectors
    from .evaluation import render_csv

    models, rows = {}, []
    for m in ws.cfg["models"]:
        kind = m["kind"]
        if kinds and kind not in kinds:
            continue
        Xtr, ytr = ds.part("train")
        Xv, yv = ds.part("val")
        model = detectors.fit(kind, m.get("hyperparams"), Xtr, ytr, ws.seeds[f"model/{kind}"], Xv, yv)
        doc = json.loads(detectors.model_to_json(model))
        doc["config_hash"] = ws.hash
        ws.path(f"models/{kind}.json").write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
        for split in ("train", "val", "test"):
            X, y = ds.part(split)
            if len(y):
                rows.append({"kind": kind, "split": split, "accuracy": model.accuracy(X, y), "n": int(len(y))})
        models[kind] = model
    ws.path("models/accuracy.csv").write_text(render_csv(["kind", "split", "accuracy", "n"], rows), encoding="utf-8")
    return models


def load_models(ws, kinds):
    from .detectors import load_model

    return {k: load_model(ws.need(f"models/{k}.json", "run `evlab train` first"), k) for k in kinds}


def _background(ws, ds):
    from .attribution import sample_background
    from .seeding import derive_seed

    Xtr = ds.part("train")[0]
    return sample_background(Xtr, ws.cfg["attack"]["background_size"], derive_seed(ws.seeds["explain"], "background"))


def step_explain(ws, ds, kind, model, split="train", method=None):
    from .attribution import save_shap_matrix, shap_matrix

    idx = ds.indices(split)
    sm = shap_matrix(
        model,
        ds.X[idx],
        _background(ws, ds),
        method=method or ws.cfg["attack"]["method"],
        sample_ids=[ds.matrix.sample_ids[i] for i in idx],
        seed=ws.seeds["explain"],
    )
    save_shap_matrix(sm, ws.path(f"shap/{kind}_{split}.csv"), [s.name for s in ds.specs], {"config_hash": ws.hash})
    return sm


def step_select(ws, ds, kind, model, N, strategy):
    from . import selection

    Xtr, ytr = ds.part("train")
    if strategy == "amm":
        sm = step_explain(ws, ds, kind, model, "train")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", selection.PartialPatchWarning)
            patch = selection.amm_select(Xtr, sm, ds.specs, N, source_model_digest=model.digest())
    else:
        patch = selection.stats_patch(selection.stats_select(Xtr, ytr, N), ds.specs, n_requested=N)
    ws.write_json(f"patches/{kind}_{strategy}.json", json.loads(patch.to_json()))
    return patch


def step_attack(ws, ds, samples, patch, name, split="test"):
    from .manipulation import build_many, write_adversarial

    if samples is None:
        raise RunDirError("attack needs problem-space samples; the dataset came from a CSV without them")
    idx = ds.indices(split)
    idx = idx[ds.labels[idx] == 1]
    pairs, _ = build_many([samples[i] for i in idx], patch, ds.specs)
    out = ws.path(f"attack/{name}/manifest.json").parent
    manifest = write_adversarial(pairs, out)
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    ws.write_json(f"attack/{name}/manifest.json", doc)
    return pairs


def step_eval(ws, ds, samples, models, fmt):
    from . import evaluation as E
    from .selection import PartialPatchWarning

    cfg = ws.cfg
    a, c, ct = cfg["attack"], cfg["curve"], cfg["case_trace"]
    attack_models = {k: models[k] for k in a["models"]}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartialPatchWarning)
        report = E.run_attack_eval(attack_models, ds, samples, a["strategies"], a["N"], ws.seeds["attack"])
        target = models[a["target"]]
        if c["N_list"]:
            report.curve = E.rate_vs_N(target, ds, c["N_list"], samples, n_sets=c["n_sets"], set_size=c.get("set_size"), seed=ws.seeds["curve"])
        patch = E.make_patch("amm", target, ds, a["N"], ws.seeds["attack"])
        idx, mal = E.held_out_malware(ds, samples)
        rows, _, _ = E._attack_rows(ds, mal, idx, patch)
        names = sorted(attack_models)
        seed_r = [report.seed_rates[n]["rate"] for n in names]
        adv_r = [E._rate(attack_models[n], rows) for n in names]
        report.drop_histogram = E.drop_histogram(seed_r, adv_r, cfg["histogram"]["bin_width"])
        bg = _background(ws, ds)
        for kind in ct["models"]:
            model = models[kind]
            kp = patch if kind == a["target"] else E.make_patch("amm", model, ds, a["N"], ws.seeds["attack"])
            picked = 0
            for i, s in zip(idx, mal or []):
                if picked >= ct["n_samples"]:
                    break
                if model.predict(ds.X[i]).label != 1:
                    continue
                report.case_traces.append(E.case_trace(model, s, ds.specs, kp, ct["N_max"], bg, ws.seeds["case_trace"]))
                picked += 1
    report.config_digest = ws.hash
    E.emit(report, ws.path("report/eval/report.json").parent, fmt)
    return report


def step_transfer(ws, ds, samples, models, fmt):
    from . import evaluation as E
    from .selection import PartialPatchWarning

    t = ws.cfg["transfer"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartialPatchWarning)
        tm = E.transfer_eval({k: models[k] for k in t["models"]}, ds, samples, ws.cfg["attack"]["N"], t["top_k"], ws.seeds["transfer"])
    report = E.EvalReport(config_digest=ws.hash, transfer=tm)
    report.digests = {"spearman": E.transfer_spearman(tm)}
    E.emit(report, ws.path("report/transfer/report.json").parent, fmt)
    return report


def _sage_kwargs(cfg):
    s = cfg["sage"]
    return {
        "loss": s["loss"],
        "n_permutations": s["n_permutations"],
        "background_size": s.get("background_size", 16),
        "eval_size": s.get("eval_size", 256),
    }


def step_sage(ws, ds, kind, model):
    from .sage import sage_values

    Xv, yv = ds.part("val")
    rep = sage_values(model, Xv, yv, seed=ws.seeds["sage"], **_sage_kwargs(ws.cfg))
    doc = rep.to_dict()
    doc["model"] = kind
    doc["ranking"] = [int(i) for i in rep.ranking()]
    ws.write_json(f"sage/{kind}.json", doc)
    return rep


def _ranking(ws, ds, kind, model, ranking):
    from .selection import amm_feature_ranking

    if ranking == "amm":
        return amm_feature_ranking(ds.part("train")[0], step_explain(ws, ds, kind, model, "train"), ds.specs)
    p = ws.root / f"sage/{kind}.json"
    if p.is_file():
        return json.loads(p.read_text(encoding="utf-8"))["ranking"]
    return step_sage(ws, ds, kind, model).ranking()


def step_harden(ws, ds, kind, model, k, ranking):
    from .sage import exclude_and_retrain, improved_to_json

    order = _ranking(ws, ds, kind, model, ranking)
    m = next(e for e in ws.cfg["models"] if e["kind"] == kind)
    det = exclude_and_retrain(ds, order, k, kind, m.get("hyperparams"), ws.seeds["harden"])
    Xte, yte = ds.part("test")
    extra = {"ranking": ranking, "k": int(k), "test_accuracy": det.accuracy(Xte, yte), "config_hash": ws.hash}
    ws.path(f"harden/{kind}_{ranking}_k{k}.json").write_text(improved_to_json(det, extra) + "\n", encoding="utf-8")
    return det


def step_hardening_sweep(ws, ds, samples, models, sage_ranking=None):
    from .evaluation import hardening_eval
    from .selection import PartialPatchWarning

    s = ws.cfg["sage"]
    kind = s["model"]
    m = next(e for e in ws.cfg["models"] if e["kind"] == kind)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PartialPatchWarning)
        return hardening_eval(
            models[kind], ds, samples, s["k_list"], ws.cfg["attack"]["N"], kind, m.get("hyperparams"), ws.seeds["harden"], _sage_kwargs(ws.cfg), sage_ranking
        )


def step_repro(ws, fmt):
    from . import evaluation as E

    ds, samples = step_gen(ws)
    models = step_train(ws, ds)
    a = ws.cfg["attack"]
    for strategy in a["strategies"]:
        patch = step_select(ws, ds, a["target"], models[a["target"]], a["N"], strategy)
        if samples is not None:
            step_attack(ws, ds, samples, patch, f"{a['target']}_{strategy}")
    report = step_eval(ws, ds, samples, models, fmt)
    tr = step_transfer(ws, ds, samples, models, fmt)
    sr = step_sage(ws, ds, ws.cfg["sage"]["model"], models[ws.cfg["sage"]["model"]])
    report.transfer = tr.transfer
    report.digests["transfer_spearman"] = tr.digests["spearman"]
    report.hardening = step_hardening_sweep(ws, ds, samples, models, sr.ranking())
    E.emit(report, ws.path("report/full/report.json").parent, fmt)
    return report


# -- argument handling


def _formats(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in parts if p not in FORMATS]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"formats must be drawn from {','.join(FORMATS)}")
    return tuple(parts)


def _seed(text):
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (default: packaged config)")
    common.add_argument("--seed", type=_seed, help="override the master seed")
    common.add_argument("--out", default="evlab-run", help="run directory (default: %(default)s)")
    common.add_argument("--format", type=_formats, default=FORMATS, help="report formats, comma separated (default: json,csv,svg)")
    common.add_argument("--force", action="store_true", help="replace artifacts produced by a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="evlab", description="Shapley-guided evasion experiments on toy malware detectors.")
    p.add_argument("--version", action="version", version=f"evlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate or import the dataset")
    t = sub.add_parser("train", parents=[common], help="train the configured detectors")
    t.add_argument("--kinds", nargs="+", help="train only these kinds")
    e = sub.add_parser("explain", parents=[common], help="SHAP matrix for one model and split")
    e.add_argument("--model", required=True)
    e.add_argument("--split", default="train", choices=("train", "val", "test"))
    e.add_argument("--method", choices=("auto", "exact", "permutation", "kernel", "linear", "tree"))
    s = sub.add_parser("select", parents=[common], help="build a feature patch")
    s.add_argument("--model", required=True)
    s.add_argument("--N", type=int)
    s.add_argument("--strategy", default="amm", choices=("amm", "stats"))
    a = sub.add_parser("attack", parents=[common], help="write adversarial SAMP files for a patch")
    a.add_argument("--patch", required=True, help="patch JSON written by `select`")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    sub.add_parser("eval", parents=[common], help="attack evaluation report")
    sub.add_parser("transfer", parents=[common], help="transfer matrix report")
    g = sub.add_parser("sage", parents=[common], help="SAGE values for one model")
    g.add_argument("--model")
    h = sub.add_parser("harden", parents=[common], help="retrain without the top-k ranked features")
    h.add_argument("--model")
    h.add_argument("--k", type=int, required=True)
    h.add_argument("--ranking", default="amm", choices=("amm", "sage"))
    sub.add_parser("repro", parents=[common], help="run the whole pipeline")
    return p


def run(args):
    from .config import load_config
    from .selection import FeaturePatch

    cfg = load_config(args.config, args.seed)
    ws = Workspace(args.out, cfg, args.force)
    cmd = args.command
    summary = {"command": cmd, "out": str(ws.root), "config_hash": ws.hash}
    if cmd == "gen":
        ds, _ = step_gen(ws)
        summary["n_samples"] = int(len(ds.labels))
    elif cmd == "repro":
        step_repro(ws, args.format)
    else:
        ds, samples = load_data(ws)
        if cmd == "train":
            models = step_train(ws, ds, args.kinds)
            summary["models"] = sorted(models)
        elif cmd == "explain":
            m = load_models(ws, [args.model])[args.model]
            step_explain(ws, ds, args.model, m, args.split, args.method)
        elif cmd == "select":
            m = load_models(ws, [args.model])[args.model]
            patch = step_select(ws, ds, args.model, m, args.N or cfg["attack"]["N"], args.strategy)
            summary["patch_len"] = len(patch)
        elif cmd == "attack":
            p = Path(args.patch)
            if not p.is_file():
                raise RunDirError(f"patch file not found: {p}", path=str(p))
            pairs = step_attack(ws, ds, samples, FeaturePatch.load(p), p.stem, args.split)
            summary["samples"] = len(pairs)
        elif cmd in ("eval", "transfer"):
            kinds = sorted(set(cfg["attack"]["models"]) | set(cfg["transfer"]["models"]) | set(cfg["case_trace"]["models"]) | {cfg["attack"]["target"]})
            models = load_models(ws, kinds)
            if cmd == "eval":
                step_eval(ws, ds, samples, models, args.format)
            else:
                rep = step_transfer(ws, ds, samples, models, args.format)
                summary["spearman"] = rep.digests["spearman"]
        elif cmd == "sage":
            kind = args.model or cfg["sage"]["model"]
            step_sage(ws, ds, kind, load_models(ws, [kind])[kind])
        elif cmd == "harden":
            kind = args.model or cfg["sage"]["model"]
            det = step_harden(ws, ds, kind, load_models(ws, [kind])[kind], args.k, args.ranking)
            summary["excluded"] = len(det.excluded_features)
    ws.finish()
    return summary


def error_doc(exc):
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, OSError) and exc.filename is not None:
        doc["path"] = str(exc.filename)
    for attr in ("path", "key", "line"):
        v = getattr(exc, attr, None)
        if v is not None:
            doc[attr] = v
    return doc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (EvlabError, ConfigError, OSError) as exc:
        print(json.dumps(error_doc(exc), sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
