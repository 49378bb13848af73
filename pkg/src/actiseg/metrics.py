"""Evaluation primitives and experiment-level aggregation.

Dice and mean IoU are computed over foreground classes (label != 0), matching
radiotherapy-style evaluation where the background is not a region of
interest.  Aggregation groups run records by strategy and reports mean and
population std of the final scores across seeds, bracketed by the lower bound
(no fine-tuning) and upper bound (everything labeled) arms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .election import dice
from .model import SegModel, extract_features, logits_from_features, mask_from_logits
from .phantom import Dataset
from .volume import LabelMask

# canonical report row order; unknown strategies follow alphabetically
STRATEGY_ORDER = ("lower", "upper", "random", "entropy", "oneoff", "ours")


def miou(a: LabelMask, b: LabelMask) -> float:
    """Mean IoU over foreground classes present in either mask.

    No foreground anywhere means there is nothing to miss: 1.0 by convention,
    consistent with Dice on two empty masks.
    """
    if a.dims != b.dims:
        raise ShapeError(f"mask dims differ: {a.dims} vs {b.dims}")
    classes = np.union1d(np.unique(a.labels), np.unique(b.labels))
    classes = classes[classes != 0]
    if classes.size == 0:
        return 1.0
    ious = []
    for c in classes:
        in_a = a.labels == c
        in_b = b.labels == c
        union = int(np.count_nonzero(in_a | in_b))
        inter = int(np.count_nonzero(in_a & in_b))
        ious.append(inter / union)
    return float(np.mean(ious))


@dataclass(frozen=True)
class EvalResult:
    dice_pct: float
    miou_pct: float
    per_sample_dice: tuple[float, ...]

    def __post_init__(self):
        if not (0.0 <= self.dice_pct <= 100.0 and 0.0 <= self.miou_pct <= 100.0):
            raise ValueError("scores must be percentages in [0, 100]")


def evaluate(model: SegModel, eval_set: Dataset, feature_cache: dict | None = None) -> EvalResult:
    """Mean Dice and mean IoU of model predictions over an evaluation set, x100."""
    if len(eval_set) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    dices, ious = [], []
    for sample, truth in zip(eval_set.samples, eval_set.truths):
        if feature_cache is not None:
            feats = feature_cache.get(sample.id)
            if feats is None:
                feats = extract_features(sample)
                feature_cache[sample.id] = feats
        else:
            feats = extract_features(sample)
        pred = mask_from_logits(logits_from_features(model, feats), sample.dims)
        dices.append(dice(pred, truth))
        ious.append(miou(pred, truth))
    return EvalResult(
        dice_pct=float(np.mean(dices)) * 100.0,
        miou_pct=float(np.mean(ious)) * 100.0,
        per_sample_dice=tuple(dices),
    )


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    n_seeds: int
    dice_mean: float
    dice_std: float
    miou_mean: float
    miou_std: float
    labeled_count: int


def _row_key(strategy: str):
    try:
        return (0, STRATEGY_ORDER.index(strategy))
    except ValueError:
        return (1, strategy)


def aggregate(records) -> list[StrategyRow]:
    """Per-strategy mean/std of final scores over seeds, in canonical row order."""
    groups: dict[str, list] = {}
    for rec in records:
        groups.setdefault(rec.strategy, []).append(rec)
    if not groups:
        raise ConfigError("no records to aggregate")
    rows = []
    for strategy in sorted(groups, key=_row_key):
        recs = groups[strategy]
        dices = np.array([r.final_dice_pct for r in recs])
        mious = np.array([r.final_miou_pct for r in recs])
        rows.append(
            StrategyRow(
                strategy=strategy,
                n_seeds=len(recs),
                dice_mean=float(dices.mean()),
                dice_std=float(dices.std()),
                miou_mean=float(mious.mean()),
                miou_std=float(mious.std()),
                labeled_count=max(len(r.labeled_ids) for r in recs),
            )
        )
    return rows


_CSV_HEADER = "strategy,n_seeds,dice_mean,dice_std,miou_mean,miou_std,labeled_count"


def rows_to_csv(rows, delta_vs_oneoff: float | None = None) -> str:
    """Comparison table as CSV; the delta column is filled on the ours row."""
    header = _CSV_HEADER + ",delta_dice_vs_oneoff"
    lines = [header]
    for r in rows:
        delta = ""
        if delta_vs_oneoff is not None and r.strategy == "ours":
            delta = repr(delta_vs_oneoff)
        lines.append(
            f"{r.strategy},{r.n_seeds},{r.dice_mean!r},{r.dice_std!r},"
            f"{r.miou_mean!r},{r.miou_std!r},{r.labeled_count},{delta}"
        )
    return "\n".join(lines) + "\n"


def rows_to_text(rows, delta_vs_oneoff: float | None = None) -> str:
    """Comparison table as aligned text."""
    header = ["strategy", "n", "dice%", "+/-", "miou%", "+/-", "|L|"]
    body = []
    for r in rows:
        body.append(
            [
                r.strategy,
                str(r.n_seeds),
                f"{r.dice_mean:.2f}",
                f"{r.dice_std:.2f}",
                f"{r.miou_mean:.2f}",
                f"{r.miou_std:.2f}",
                str(r.labeled_count),
            ]
        )
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in body:
        out.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    if delta_vs_oneoff is not None:
        out.append(f"sequential (ours) - oneoff final Dice delta: {delta_vs_oneoff:+.2f}")
    return "\n".join(out) + "\n"
