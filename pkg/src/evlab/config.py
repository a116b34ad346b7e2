"""Experiment configuration: JSON only, merged over the packaged default.

Seeds follow one counter scheme. The dataset uses ``dataset.synthetic.seed``
when given and ``master_seed`` otherwise; every other stream is
``derive_seed(master_seed, <name>, ...)`` (see :func:`seeds`).
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .dataset import SynthConfig
from .errors import ConfigError
from .evaluation import STRATEGIES
from .sage import LOSSES
from .seeding import derive_seed, text_digest


class ConfigPathError(ConfigError):
    """A config value is invalid; ``key`` names where it lives."""

    def __init__(self, message, key=None, path=None):
        super().__init__(message)
        self.key = key
        self.path = path


def default_config():
    text = resources.files("evlab").joinpath("data/default_config.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dataset":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, seed=None):
    """Read a JSON config (or the default), apply a seed override and validate."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigPathError(f"config file not found: {p}", path=str(p))
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigPathError(f"config {p} is not valid JSON: {exc}", path=str(p)) from exc
        if not isinstance(user, dict):
            raise ConfigPathError(f"config {p} must hold a JSON object", path=str(p))
        cfg = _merge(cfg, user)
        base_dir = p.parent
    else:
        base_dir = Path.cwd()
    if seed is not None:
        cfg["master_seed"] = int(seed)
        syn = cfg.get("dataset", {}).get("synthetic")
        if isinstance(syn, dict):
            syn.pop("seed", None)
    csv = cfg.get("dataset", {}).get("csv")
    if isinstance(csv, str) and not Path(csv).is_absolute():
        cfg["dataset"]["csv"] = str((base_dir / csv).resolve())
    validate(cfg)
    return cfg


def _need(cond, msg, key):
    if not cond:
        raise ConfigPathError(msg, key=key)


def validate(cfg):
    from .detectors import KINDS

    known = {"master_seed", "dataset", "models", "attack", "curve", "transfer", "histogram", "case_trace", "sage"}
    extra = set(cfg) - known
    _need(not extra, f"unknown config keys {sorted(extra)}", sorted(extra)[0] if extra else None)
    _need(isinstance(cfg.get("master_seed"), int) and cfg["master_seed"] >= 0, "master_seed must be a non-negative integer", "master_seed")

    ds = cfg.get("dataset")
    _need(isinstance(ds, dict) and len(ds) == 1 and set(ds) <= {"synthetic", "csv"}, "dataset needs exactly one of 'synthetic' or 'csv'", "dataset")
    if "synthetic" in ds:
        try:
            synth_config(cfg).validate()
        except ConfigError as exc:
            raise ConfigPathError(str(exc), key="dataset.synthetic") from exc
    else:
        p = Path(ds["csv"])
        if not p.is_file():
            raise ConfigPathError(f"dataset file not found: {p}", key="dataset.csv", path=str(p))

    models = cfg.get("models")
    _need(isinstance(models, list) and models, "models must be a non-empty list", "models")
    kinds = []
    for i, m in enumerate(models):
        _need(isinstance(m, dict) and m.get("kind") in KINDS, f"models[{i}].kind must be one of {sorted(KINDS)}", f"models[{i}].kind")
        _need(isinstance(m.get("hyperparams", {}), dict), f"models[{i}].hyperparams must be an object", f"models[{i}].hyperparams")
        bad = set(m.get("hyperparams", {})) - set(KINDS[m["kind"]].defaults)
        _need(not bad, f"models[{i}] has unknown hyperparameters {sorted(bad)}", f"models[{i}].hyperparams")
        kinds.append(m["kind"])
    _need(len(set(kinds)) == len(kinds), "each detector kind may appear once", "models")

    a = cfg["attack"]
    _need(a.get("target") in kinds, "attack.target must name a configured model", "attack.target")
    _need(set(a.get("models", [])) <= set(kinds), "attack.models must name configured models", "attack.models")
    _need(set(a.get("strategies", [])) <= set(STRATEGIES) and a.get("strategies"), f"attack.strategies must be drawn from {list(STRATEGIES)}", "attack.strategies")
    _need(isinstance(a.get("N"), int) and a["N"] >= 1, "attack.N must be a positive integer", "attack.N")
    _need(isinstance(a.get("background_size"), int) and a["background_size"] >= 1, "attack.background_size must be positive", "attack.background_size")

    c = cfg["curve"]
    N_list = c.get("N_list", [])
    _need(all(isinstance(n, int) and n >= 0 for n in N_list), "curve.N_list must hold non-negative integers", "curve.N_list")
    _need(all(b > a for a, b in zip(N_list, N_list[1:])), "curve.N_list must be strictly ascending", "curve.N_list")
    _need(isinstance(c.get("n_sets"), int) and c["n_sets"] >= 1, "curve.n_sets must be positive", "curve.n_sets")

    t = cfg["transfer"]
    _need(set(t.get("models", [])) <= set(kinds) and len(t.get("models", [])) >= 2, "transfer.models must name at least two configured models", "transfer.models")
    _need(isinstance(t.get("top_k"), int) and t["top_k"] >= 1, "transfer.top_k must be positive", "transfer.top_k")
    _need(cfg["histogram"].get("bin_width", 0) > 0, "histogram.bin_width must be positive", "histogram.bin_width")
    _need(set(cfg["case_trace"].get("models", [])) <= set(kinds), "case_trace.models must name configured models", "case_trace.models")

    s = cfg["sage"]
    _need(s.get("model") in kinds, "sage.model must name a configured model", "sage.model")
    _need(s.get("loss") in LOSSES, f"sage.loss must be one of {list(LOSSES)}", "sage.loss")
    _need(isinstance(s.get("n_permutations"), int) and s["n_permutations"] >= 1, "sage.n_permutations must be >= 1", "sage.n_permutations")
    _need(all(isinstance(k, int) and k > 0 for k in s.get("k_list", [])), "sage.k_list must hold positive integers", "sage.k_list")
    return cfg


def synth_config(cfg) -> SynthConfig:
    d = dict(cfg["dataset"]["synthetic"])
    d.setdefault("seed", cfg["master_seed"])
    return SynthConfig.from_dict(d)


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return text_digest(canonical(cfg))


def model_entry(cfg, kind):
    for m in cfg["models"]:
        if m["kind"] == kind:
            return m
    raise ConfigPathError(f"model {kind!r} is not configured", key="models")


def seeds(cfg):
    """Every seed a run uses, by name."""
    master = cfg["master_seed"]
    out = {"master": master}
    if "synthetic" in cfg["dataset"]:
        out["dataset"] = synth_config(cfg).seed
    for m in cfg["models"]:
        out[f"model/{m['kind']}"] = int(m.get("seed", derive_seed(master, "model", m["kind"])))
    for name in ("explain", "attack", "curve", "transfer", "case_trace", "sage", "harden"):
        out[name] = derive_seed(master, name)
    return out
