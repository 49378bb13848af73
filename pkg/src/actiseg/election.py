"""Dominant-modality election: which single scan of a selected sample goes to
the annotator.

Each modality is scored by how well its solo prediction (all other z-scored
channels zeroed) reproduces the full multi-channel pseudo-label, measured by
Dice.  The oracle still returns the full mask for the sample; the election
models annotation effort, not label content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import SegModel, extract_features, logits_from_features, mask_from_logits, zero_fill_features
from .volume import LabelMask, MultiModalSample


def dice(a: LabelMask, b: LabelMask) -> float:
    """Foreground Dice (label != 0): 2|A&B| / (|A| + |B|); both empty -> 1.0."""
    if a.dims != b.dims:
        raise ShapeError(f"mask dims differ: {a.dims} vs {b.dims}")
    fa = a.labels != 0
    fb = b.labels != 0
    sa = int(fa.sum())
    sb = int(fb.sum())
    if sa + sb == 0:
        return 1.0
    inter = int(np.count_nonzero(fa & fb))
    return 2.0 * inter / (sa + sb)


@dataclass(frozen=True)
class ElectionResult:
    sample_id: int
    dice_per_modality: tuple[float, ...]
    winner: int
    degenerate: bool  # empty pseudo-label; winner defaulted to modality 0

    def __post_init__(self):
        if not 0 <= self.winner < len(self.dice_per_modality):
            raise ValueError("winner must index a modality")

    def to_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dice_per_modality": list(self.dice_per_modality),
            "winner": self.winner,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ElectionResult":
        return cls(
            sample_id=d["sample_id"],
            dice_per_modality=tuple(d["dice_per_modality"]),
            winner=d["winner"],
            degenerate=d["degenerate"],
        )


def elect_dominant(model: SegModel, x: MultiModalSample, feats=None) -> ElectionResult:
    """Pick the modality whose solo prediction best matches the pseudo-label.

    Ties resolve to the lowest modality index.  An empty pseudo-label makes
    every comparison vacuous; the result is flagged degenerate and defaults
    to modality 0.  Precomputed features for x may be passed to skip
    re-extraction.
    """
    if x.num_modalities != model.num_modalities:
        raise ShapeError(
            f"sample has {x.num_modalities} modalities, model expects {model.num_modalities}"
        )
    if feats is None:
        feats = extract_features(x)
    pseudo = mask_from_logits(logits_from_features(model, feats), x.dims)
    scores = []
    for l in range(x.num_modalities):
        solo = zero_fill_features(feats, x.num_modalities, l)
        solo_mask = mask_from_logits(logits_from_features(model, solo), x.dims)
        scores.append(dice(solo_mask, pseudo))
    degenerate = not np.any(pseudo.labels)
    winner = 0 if degenerate else int(np.argmax(scores))
    return ElectionResult(x.id, tuple(scores), winner, degenerate)
