"""Detector zoo: GBDT, linear SVM, random forest and MLP behind one scoring interface."""

from .base import Detector, Prediction, Tree, detection_rate
from .forest import RandomForest
from .gbdt import GradientBoostedTrees
from .io import load_model, model_from_json, model_to_json, save_model
from .mlp import MLP
from .svm import LinearSVM, LinearWeights, linear_weights

KINDS = {
    cls.kind: cls for cls in (GradientBoostedTrees, LinearSVM, RandomForest, MLP)
}


def make(kind, hyperparams=None):
    from ..errors import TrainingError

    if kind not in KINDS:
        raise TrainingError(f"unknown detector kind {kind!r}; choose from {sorted(KINDS)}")
    return KINDS[kind](**(hyperparams or {}))


def fit(kind, hyperparams, X, y, seed=0, X_val=None, y_val=None):
    """Train a detector of ``kind``; validation accuracy goes into ``train_info``."""
    model = make(kind, hyperparams).fit(X, y, seed)
    if X_val is not None and len(X_val):
        model.train_info["val_accuracy"] = model.accuracy(X_val, y_val)
    return model


__all__ = [
    "Detector",
    "Prediction",
    "Tree",
    "KINDS",
    "GradientBoostedTrees",
    "LinearSVM",
    "LinearWeights",
    "RandomForest",
    "MLP",
    "detection_rate",
    "fit",
    "linear_weights",
    "load_model",
    "make",
    "model_from_json",
    "model_to_json",
    "save_model",
]
