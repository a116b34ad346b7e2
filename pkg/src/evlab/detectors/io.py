"""Versioned JSON model files with bit-exact float round trips."""

import json
from pathlib import Path

from ..errors import ModelFormatError

FORMAT = "evlab-model/1"


def _hp_to_json(hp):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in hp.items()}


def model_to_json(model):
    doc = {
        "format": FORMAT,
        "kind": model.kind,
        "n_features": model.n_features,
        "hyperparams": _hp_to_json(model.hyperparams),
        "params": model.params_to_dict(),
        "train_info": {k: repr(float(v)) for k, v in sorted(model.train_info.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def model_from_json(text, expected_kind=None):
    from . import KINDS

    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise ModelFormatError(f"unreadable model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFormatError(f"unsupported model format {doc.get('format') if isinstance(doc, dict) else None!r}")
    kind = doc.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise ModelFormatError(f"kind mismatch: file holds {kind!r}, expected {expected_kind!r}")
    if kind not in KINDS:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    hp = doc["hyperparams"]
    if "hidden" in hp:
        hp["hidden"] = tuple(hp["hidden"])
    try:
        model = KINDS[kind](**hp)
        model.n_features = int(doc["n_features"])
        model.params_from_dict(doc["params"])
        model.train_info = {k: float(v) for k, v in doc.get("train_info", {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt {kind} parameters: {exc}") from exc
    return model


def save_model(model, path):
    Path(path).write_text(model_to_json(model) + "\n", encoding="utf-8")


def load_model(path, expected_kind=None):
    return model_from_json(Path(path).read_text(encoding="utf-8"), expected_kind)
