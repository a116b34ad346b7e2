"""Feature-space manipulation and its inversion into SAMP problem-space samples.

Additions are realised by appending the feature's token to the unreachable
``#DEAD`` section, which the static extractor reads but execution never
reaches. The live section is never touched, so functionality is preserved
by construction and checked by :func:`verify_functionality`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ProblemSample, vectorize, write_samp
from .errors import SelectionError
from .selection import FEATURE_SPACE_ONLY, MODES, PROBLEM_SPACE

REMOVAL_SKIP = "removal not realizable"


def apply_patch(row, patch, mode=PROBLEM_SPACE):
    """Return ``(new_row, skipped)`` after applying the patch pairs in order.

    In problem-space mode a pair asking to clear a set bit is skipped, since
    content can only be added.
    """
    if mode not in MODES:
        raise SelectionError(f"unknown mode {mode!r}")
    out = np.array(row, dtype=np.uint8, copy=True)
    skipped = []
    for f, v in getattr(patch, "pairs", patch):
        if not 0 <= f < len(out):
            raise SelectionError(f"patch refers to unknown feature id {f}")
        if mode == PROBLEM_SPACE and v == 0 and out[f] == 1:
            skipped.append((f, REMOVAL_SKIP))
            continue
        out[f] = v
    return out, skipped


def apply_patch_rows(X, patch, mode=PROBLEM_SPACE):
    """Vectorised :func:`apply_patch` over a matrix (skips are not reported)."""
    out = np.array(X, dtype=np.uint8, copy=True)
    for f, v in getattr(patch, "pairs", patch):
        if not 0 <= f < out.shape[1]:
            raise SelectionError(f"patch refers to unknown feature id {f}")
        if v == 1 or mode == FEATURE_SPACE_ONLY:
            out[:, f] = v
    return out


@dataclass
class AdversarialPair:
    original: ProblemSample
    adversarial: ProblemSample
    feature_delta: list = field(default_factory=list)
    skipped_pairs: list = field(default_factory=list)

    def manifest_entry(self):
        return {
            "sample_id": self.original.sample_id,
            "feature_delta": [list(t) for t in self.feature_delta],
            "skipped_pairs": [list(t) for t in self.skipped_pairs],
            "added_tokens": list(self.adversarial.dead_tokens[len(self.original.dead_tokens) :]),
            "functional": verify_functionality(self),
        }


def build(sample: ProblemSample, patch, specs) -> AdversarialPair:
    present = sample.tokens()
    dead = list(sample.dead_tokens)
    delta, skipped = [], []
    for f, v in getattr(patch, "pairs", patch):
        if not 0 <= f < len(specs):
            raise SelectionError(f"patch refers to unknown feature id {f}")
        tok = specs[f].name
        old = int(tok in present)
        if v == 1:
            if not old:
                dead.append(tok)
                present.add(tok)
                delta.append((f, 0, 1))
        elif old:
            skipped.append((f, REMOVAL_SKIP))
    adv = ProblemSample(sample.sample_id, sample.live_tokens, tuple(dead))
    return AdversarialPair(sample, adv, delta, skipped)


def verify_functionality(pair: AdversarialPair) -> bool:
    """Live section byte-identical and the dead section only grown at its end."""
    o, a = pair.original, pair.adversarial
    if list(o.live_tokens) != list(a.live_tokens):
        return False
    return list(a.dead_tokens[: len(o.dead_tokens)]) == list(o.dead_tokens)


def build_many(samples, patch, specs):
    pairs = [build(s, patch, specs) for s in samples]
    rows = np.array([vectorize(p.adversarial, specs) for p in pairs], dtype=np.uint8).reshape(len(pairs), len(specs))
    return pairs, rows


def write_adversarial(pairs, out_dir):
    """Write one ``<sample_id>.samp`` per pair and a ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_samp(p.adversarial, out_dir / f"{p.adversarial.sample_id}.samp")
    manifest = {"format": "evlab-attack/1", "samples": [p.manifest_entry() for p in pairs]}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return out_dir / "manifest.json"
