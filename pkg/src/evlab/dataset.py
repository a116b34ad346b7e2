"""Synthetic labelled corpora, the SAMP problem-space format and feature extraction.

A corpus is a boolean matrix with one column per :class:`FeatureSpec`. Each row
has a matching :class:`ProblemSample`: a token file whose tokens are the names
of the features present in the row. Static extraction (:func:`vectorize`)
reads both the live section and the unreachable ``#DEAD`` section.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .seeding import derive_seed

log = logging.getLogger(__name__)

# Mirrors the eight Drebin feature sets (S1..S8); reporting only.
FAMILIES = (
    "hw",
    "perm_req",
    "app_comp",
    "intent",
    "api_restricted",
    "perm_used",
    "api_call",
    "url",
)
SPLITS = ("train", "val", "test")
TOKEN_RE = re.compile(r"^[A-Za-z0-9_:./-]+$")
DEAD_MARKER = "#DEAD"


@dataclass(frozen=True)
class FeatureSpec:
    id: int
    name: str
    family: str
    manipulable: bool = True
    additive_only: bool = True

    def __post_init__(self):
        if self.additive_only and not self.manipulable:
            raise ConfigError(f"feature {self.id}: additive_only requires manipulable")
        if not TOKEN_RE.match(self.name):
            raise ConfigError(f"feature {self.id}: invalid token name {self.name!r}")
        if self.family not in FAMILIES:
            raise ConfigError(f"feature {self.id}: unknown family {self.family!r}")

    def to_dict(self):
        return {
            "id": self.id,
            "name": self.name,
            "family": self.family,
            "manipulable": self.manipulable,
            "additive_only": self.additive_only,
        }


def check_specs(specs: Sequence[FeatureSpec]):
    """Raise unless ids are dense 0..d-1 in order and names are unique."""
    names = set()
    for i, s in enumerate(specs):
        if s.id != i:
            raise ConfigError(f"feature ids must be dense: position {i} holds id {s.id}")
        if s.name in names:
            raise ConfigError(f"duplicate feature name {s.name!r}")
        names.add(s.name)


def specs_to_json(specs):
    return json.dumps([s.to_dict() for s in specs], indent=1, sort_keys=True)


def specs_from_json(text):
    try:
        raw = json.loads(text)
        specs = [FeatureSpec(**item) for item in raw]
    except (ValueError, TypeError) as exc:
        raise ParseError(f"bad feature spec file: {exc}") from exc
    check_specs(specs)
    return specs


@dataclass(frozen=True)
class ProblemSample:
    sample_id: str
    live_tokens: tuple = ()
    dead_tokens: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "live_tokens", tuple(self.live_tokens))
        object.__setattr__(self, "dead_tokens", tuple(self.dead_tokens))
        for section, toks in (("live", self.live_tokens), ("dead", self.dead_tokens)):
            if len(set(toks)) != len(toks):
                raise ParseError(f"duplicate token in {section} section of {self.sample_id}")

    def tokens(self):
        return set(self.live_tokens) | set(self.dead_tokens)


def format_samp(sample: ProblemSample) -> str:
    lines = [f"SAMP 1 {sample.sample_id}", *sample.live_tokens]
    if sample.dead_tokens:
        lines.append(DEAD_MARKER)
        lines.extend(sample.dead_tokens)
    return "\n".join(lines) + "\n"


def parse_samp(text: str, path=None) -> ProblemSample:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty SAMP file", line=1, path=path)
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != "SAMP" or head[1] != "1" or not TOKEN_RE.match(head[2]):
        raise ParseError(f"bad SAMP header {lines[0]!r}", line=1, path=path)
    live, dead = [], []
    current = live
    for lineno, tok in enumerate(lines[1:], start=2):
        if tok == DEAD_MARKER:
            if current is dead:
                raise ParseError("repeated #DEAD marker", line=lineno, path=path)
            current = dead
            continue
        if not TOKEN_RE.match(tok):
            raise ParseError(f"invalid token {tok!r}", line=lineno, path=path)
        if tok in current:
            raise ParseError(f"duplicate token {tok!r}", line=lineno, path=path)
        current.append(tok)
    return ProblemSample(head[2], tuple(live), tuple(dead))


def write_samp(sample: ProblemSample, path):
    Path(path).write_text(format_samp(sample), encoding="utf-8")


def read_samp(path) -> ProblemSample:
    return parse_samp(Path(path).read_text(encoding="utf-8"), path=str(path))


def vectorize(sample: ProblemSample, specs: Sequence[FeatureSpec]) -> np.ndarray:
    """Boolean presence row: bit f is set iff ``specs[f].name`` occurs in either section."""
    index = {s.name: s.id for s in specs}
    row = np.zeros(len(specs), dtype=np.uint8)
    unknown = 0
    for tok in sample.tokens():
        j = index.get(tok)
        if j is None:
            unknown += 1
        else:
            row[j] = 1
    if unknown:
        log.debug("%s: ignored %d unknown tokens", sample.sample_id, unknown)
    return row


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    specs: list
    sample_ids: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.uint8)
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.specs):
            raise ConfigError(f"matrix shape {self.rows.shape} does not match {len(self.specs)} specs")
        if len(self.sample_ids) != self.rows.shape[0]:
            raise ConfigError("sample_ids length does not match row count")

    @property
    def n_features(self):
        return len(self.specs)

    def __eq__(self, other):
        return (
            isinstance(other, FeatureMatrix)
            and list(self.specs) == list(other.specs)
            and list(self.sample_ids) == list(other.sample_ids)
            and np.array_equal(self.rows, other.rows)
        )


@dataclass
class LabeledDataset:
    matrix: FeatureMatrix
    labels: np.ndarray
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.matrix.rows.shape[0]
        if self.labels.shape != (n,):
            raise ConfigError("labels length must equal row count")
        if not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("labels must be 0 or 1")
        if self.split is None:
            self.split = np.full(n, "train", dtype=object)
        self.split = np.asarray(self.split, dtype=object)
        if self.split.shape != (n,) or not np.isin(self.split, SPLITS).all():
            raise ConfigError("split tags must be one of train/val/test, one per row")

    @property
    def X(self):
        return self.matrix.rows

    @property
    def y(self):
        return self.labels

    @property
    def specs(self):
        return self.matrix.specs

    def indices(self, tag):
        return np.flatnonzero(self.split == tag)

    def part(self, tag):
        """Rows and labels of one split."""
        idx = self.indices(tag)
        return self.matrix.rows[idx], self.labels[idx]

    def malicious(self, tag="test"):
        idx = self.indices(tag)
        return idx[self.labels[idx] == 1]

    def __eq__(self, other):
        return (
            isinstance(other, LabeledDataset)
            and self.matrix == other.matrix
            and np.array_equal(self.labels, other.labels)
            and list(self.split) == list(other.split)
        )


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    n_features: int = 300
    n_planted_malicious: int = 20
    n_planted_benign: int = 20
    p_signal: float = 0.9
    p_noise: float = 0.05
    # fraction of malicious samples
    class_balance: float = 0.3
    seed: int = 7
    # Fraction of features that can be altered in the problem space, and of
    # those, the fraction that can only be added (0 -> 1).
    manipulable_fraction: float = 0.9
    additive_only_fraction: float = 0.8
    split_ratios: tuple = (0.5, 0.2, 0.3)
    dead_fraction: float = 0.0
    filler_tokens: int = 3

    def validate(self):
        if self.n_samples < 3:
            raise ConfigError(f"n_samples must be >= 3, got {self.n_samples}")
        if self.n_features < 1:
            raise ConfigError(f"n_features must be >= 1, got {self.n_features}")
        if self.n_planted_malicious < 0 or self.n_planted_benign < 0:
            raise ConfigError("planted feature counts must be non-negative")
        if not self.n_planted_malicious + self.n_planted_benign < self.n_features:
            raise ConfigError(
                "n_planted_malicious + n_planted_benign must be < n_features "
                f"({self.n_planted_malicious}+{self.n_planted_benign} >= {self.n_features})"
            )
        if not 0.0 <= self.p_noise < self.p_signal <= 1.0:
            raise ConfigError(f"need 0 <= p_noise < p_signal <= 1, got p_noise={self.p_noise}, p_signal={self.p_signal}")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError(f"class_balance must lie in (0, 1), got {self.class_balance}")
        for name in ("manipulable_fraction", "additive_only_fraction", "dead_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        _check_ratios(self.split_ratios)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad dataset config: {exc}") from exc

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


def make_specs(n_features, rng, manipulable_fraction=0.9, additive_only_fraction=0.8):
    families = rng.integers(0, len(FAMILIES), size=n_features)
    manip = rng.random(n_features) < manipulable_fraction
    additive = manip & (rng.random(n_features) < additive_only_fraction)
    return [
        FeatureSpec(
            id=j,
            name=f"{FAMILIES[families[j]]}::f{j:05d}",
            family=FAMILIES[families[j]],
            manipulable=bool(manip[j]),
            additive_only=bool(additive[j]),
        )
        for j in range(n_features)
    ]


def planted_features(config: SynthConfig):
    """Ids of the (malicious-oriented, benign-oriented) planted columns."""
    rng = np.random.default_rng(derive_seed(config.seed, "planted"))
    perm = rng.permutation(config.n_features)
    k = config.n_planted_malicious
    return np.sort(perm[:k]), np.sort(perm[k : k + config.n_planted_benign])


def generate_synthetic(config: SynthConfig):
    """Draw a labelled corpus and its problem-space samples.

    Planted malicious features are present with probability ``p_signal`` in
    malware and ``p_noise`` in benign samples; planted benign features the
    other way round. Every other column is present with ``p_noise`` in both
    classes.
    """
    config.validate()
    n, d = config.n_samples, config.n_features
    rng = np.random.default_rng(derive_seed(config.seed, "rows"))
    specs = make_specs(
        d,
        np.random.default_rng(derive_seed(config.seed, "specs")),
        config.manipulable_fraction,
        config.additive_only_fraction,
    )
    mal_ids, ben_ids = planted_features(config)

    n_mal = int(round(n * config.class_balance))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_mal] = 1
    labels = rng.permutation(labels)

    probs = np.full((n, d), config.p_noise)
    is_mal = labels == 1
    probs[np.ix_(is_mal, mal_ids)] = config.p_signal
    probs[np.ix_(~is_mal, ben_ids)] = config.p_signal
    rows = (rng.random((n, d)) < probs).astype(np.uint8)

    sample_ids = [f"s{i:05d}" for i in range(n)]
    samples = []
    tok_rng = np.random.default_rng(derive_seed(config.seed, "tokens"))
    for i in range(n):
        present = np.flatnonzero(rows[i])
        present = present[tok_rng.permutation(len(present))]
        to_dead = tok_rng.random(len(present)) < config.dead_fraction
        live = [specs[j].name for j in present[~to_dead]]
        live += [f"code:blk{i:05d}.{k}" for k in range(config.filler_tokens)]
        dead = [specs[j].name for j in present[to_dead]]
        samples.append(ProblemSample(sample_ids[i], tuple(live), tuple(dead)))

    dataset = LabeledDataset(FeatureMatrix(rows, specs, sample_ids), labels)
    dataset = split(dataset, config.split_ratios, derive_seed(config.seed, "split"))
    return dataset, samples


def split(dataset: LabeledDataset, ratios=(0.5, 0.2, 0.3), seed=0) -> LabeledDataset:
    """Stratified train/val/test tagging; per-class counts are rounded, test takes the rest."""
    _check_ratios(ratios)
    n = len(dataset.labels)
    if n < 3:
        raise ConfigError(f"need at least 3 samples to split, got {n}")
    rng = np.random.default_rng(int(seed))
    tags = np.empty(n, dtype=object)
    for cls in (0, 1):
        idx = np.flatnonzero(dataset.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(ratios[0] * len(idx)))
        n_val = min(int(round(ratios[1] * len(idx))), len(idx) - n_train)
        tags[idx[:n_train]] = "train"
        tags[idx[n_train : n_train + n_val]] = "val"
        tags[idx[n_train + n_val :]] = "test"
    return LabeledDataset(dataset.matrix, dataset.labels, tags)


def with_rows(dataset: LabeledDataset, rows) -> LabeledDataset:
    return LabeledDataset(
        FeatureMatrix(rows, dataset.matrix.specs, dataset.matrix.sample_ids),
        dataset.labels,
        dataset.split,
    )


# ---------------------------------------------------------------- CSV I/O

_FIXED = ["sample_id", "label", "split"]


def specs_path(csv_path):
    return Path(str(csv_path) + ".specs.json")


def save_csv(dataset: LabeledDataset, path):
    """Write ``sample_id,label,split,<feature names>`` plus a ``.specs.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIXED + [s.name for s in dataset.specs])
        for sid, lab, tag, row in zip(dataset.matrix.sample_ids, dataset.labels, dataset.split, dataset.X):
            w.writerow([sid, int(lab), tag] + ["1" if b else "0" for b in row])
    specs_path(path).write_text(specs_to_json(dataset.specs) + "\n", encoding="utf-8")


def load_csv(path, specs=None) -> LabeledDataset:
    path = Path(path)
    if specs is None:
        sp = specs_path(path)
        if not sp.exists():
            raise ParseError(f"missing feature spec sidecar {sp}", path=str(path))
        specs = specs_from_json(sp.read_text(encoding="utf-8"))
    check_specs(specs)
    d = len(specs)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1, path=str(path)) from None
        if header[:3] != _FIXED:
            raise ParseError(f"header must start with {','.join(_FIXED)}", line=1, path=str(path))
        names = header[3:]
        for j in range(max(len(names), d)):
            got = names[j] if j < len(names) else "<missing>"
            want = specs[j].name if j < d else "<none>"
            if got != want:
                raise ParseError(
                    f"header/spec mismatch at feature column {j}: got {got!r}, expected {want!r}",
                    line=1,
                    path=str(path),
                )
        ids, labels, tags, rows = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != d + 3:
                raise ParseError(f"expected {d + 3} cells, got {len(rec)}", line=lineno, path=str(path))
            if rec[1] not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {rec[1]!r}", line=lineno, path=str(path))
            if rec[2] not in SPLITS:
                raise ParseError(f"unknown split tag {rec[2]!r}", line=lineno, path=str(path))
            cells = rec[3:]
            bad = next((c for c in cells if c not in ("0", "1")), None)
            if bad is not None:
                col = cells.index(bad)
                raise ParseError(
                    f"row {rec[0]!r}: cell {specs[col].name!r} must be 0 or 1, got {bad!r}",
                    line=lineno,
                    path=str(path),
                )
            ids.append(rec[0])
            labels.append(int(rec[1]))
            tags.append(rec[2])
            rows.append([c == "1" for c in cells])
    rows = np.asarray(rows, dtype=np.uint8).reshape(len(ids), d)
    return LabeledDataset(FeatureMatrix(rows, list(specs), ids), np.asarray(labels), np.asarray(tags, dtype=object))
