"""Lightweight trainable multi-channel voxel segmentation model.

Hand-crafted per-voxel features (z-scored intensity, 3x3x3 box mean and std,
central-difference gradient magnitude, per modality, plus a bias feature) feed
a linear softmax classifier trained by SGD with poly learning-rate decay.  The
model is deliberately small so whole adaptation experiments run in seconds on
a CPU; anything richer can be swapped in behind the same functions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, FormatError, ShapeError
from .volume import LabelMask, MultiModalSample, ProbabilityMap, zscore

FEATURES_PER_MODALITY = 4

CHECKPOINT_MAGIC = b"ASEG"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sBBHIII")  # magic, version, reserved, reserved, M, C, D


def feature_dim(num_modalities: int) -> int:
    return FEATURES_PER_MODALITY * num_modalities + 1


def modality_feature_slice(l: int) -> slice:
    """Column block of modality l in the feature matrix; the bias is last."""
    return slice(FEATURES_PER_MODALITY * l, FEATURES_PER_MODALITY * (l + 1))


def _grad_magnitude(grid: np.ndarray) -> np.ndarray:
    """Central differences with clamped edges, halved everywhere."""
    padded = np.pad(grid, 1, mode="edge")
    gz = (padded[2:, 1:-1, 1:-1] - padded[:-2, 1:-1, 1:-1]) * 0.5
    gy = (padded[1:-1, 2:, 1:-1] - padded[1:-1, :-2, 1:-1]) * 0.5
    gx = (padded[1:-1, 1:-1, 2:] - padded[1:-1, 1:-1, :-2]) * 0.5
    return np.sqrt(gx * gx + gy * gy + gz * gz)


def extract_features(x: MultiModalSample) -> np.ndarray:
    """Per-voxel feature matrix of shape (K, 4*M + 1).

    Each modality is z-scored, then contributes raw intensity, 3x3x3 box mean,
    3x3x3 box std, and gradient magnitude; boundary voxels use clamped-edge
    neighborhoods.  The final column is a constant bias of 1.
    """
    k = x.modalities[0].size
    out = np.empty((k, feature_dim(x.num_modalities)))
    for l, vol in enumerate(x.modalities):
        z = zscore(vol).as_grid()
        mean = uniform_filter(z, size=3, mode="nearest")
        sq = uniform_filter(z * z, size=3, mode="nearest")
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        grad = _grad_magnitude(z)
        base = FEATURES_PER_MODALITY * l
        out[:, base + 0] = z.ravel()
        out[:, base + 1] = mean.ravel()
        out[:, base + 2] = std.ravel()
        out[:, base + 3] = grad.ravel()
    out[:, -1] = 1.0
    return out


def zero_fill_features(feats: np.ndarray, num_modalities: int, keep: int) -> np.ndarray:
    """Features as if every z-scored channel except `keep` were zero.

    Zero is the per-channel mean under z-scoring, so zeroing a channel's
    feature block is exactly the neutral single-modality input.
    """
    if not 0 <= keep < num_modalities:
        raise ShapeError(f"modality {keep} out of range [0, {num_modalities})")
    out = np.zeros_like(feats)
    sl = modality_feature_slice(keep)
    out[:, sl] = feats[:, sl]
    out[:, -1] = feats[:, -1]
    return out


def single_modality_features(x: MultiModalSample, l: int) -> np.ndarray:
    return zero_fill_features(extract_features(x), x.num_modalities, l)


@dataclass(frozen=True, eq=False)
class SegModel:
    """Linear softmax classifier over hand-crafted voxel features."""

    weights: np.ndarray  # (C, 4*M + 1)
    num_modalities: int
    num_classes: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m, c = int(self.num_modalities), int(self.num_classes)
        if w.shape != (c, feature_dim(m)):
            raise ShapeError(
                f"weights shape {w.shape} does not match C={c}, feature_dim={feature_dim(m)}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("model weights must be finite")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "num_modalities", m)
        object.__setattr__(self, "num_classes", c)

    def __eq__(self, other):
        return (
            isinstance(other, SegModel)
            and self.num_modalities == other.num_modalities
            and self.num_classes == other.num_classes
            and np.array_equal(self.weights, other.weights)
        )


def zero_model(num_modalities: int, num_classes: int) -> SegModel:
    return SegModel(np.zeros((num_classes, feature_dim(num_modalities))), num_modalities, num_classes)


def _check_compat(model: SegModel, x: MultiModalSample):
    if x.num_modalities != model.num_modalities:
        raise ShapeError(
            f"sample has {x.num_modalities} modalities, model expects {model.num_modalities}"
        )


def logits_from_features(model: SegModel, feats: np.ndarray) -> np.ndarray:
    if feats.shape[1] != model.weights.shape[1]:
        raise ShapeError(
            f"feature dim {feats.shape[1]} does not match model ({model.weights.shape[1]})"
        )
    return feats @ model.weights.T


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def mask_from_logits(logits: np.ndarray, dims) -> LabelMask:
    """Per-voxel argmax; equal logits resolve to the lowest class index."""
    return LabelMask(dims, np.argmax(logits, axis=1).astype(np.uint16))


def predict_proba(model: SegModel, x: MultiModalSample) -> ProbabilityMap:
    _check_compat(model, x)
    probs = softmax(logits_from_features(model, extract_features(x)))
    return ProbabilityMap(x.dims, model.num_classes, probs)


def predict_mask(model: SegModel, x: MultiModalSample) -> LabelMask:
    _check_compat(model, x)
    return mask_from_logits(logits_from_features(model, extract_features(x)), x.dims)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    total_epochs: int = 200
    poly_power: float = 0.9
    batch_voxels: int = 512
    balance: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.batch_voxels < 1:
            raise ConfigError(f"batch_voxels must be >= 1, got {self.batch_voxels}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def to_json_dict(self) -> dict:
        return {
            "lr0": self.lr0,
            "total_epochs": self.total_epochs,
            "poly_power": self.poly_power,
            "batch_voxels": self.batch_voxels,
            "balance": self.balance,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def poly_lr(lr0: float, t: int, total_epochs: int, poly_power: float) -> float:
    """lr0 * (1 - t/T)^power, the poly decay policy."""
    if not 0 <= t <= total_epochs:
        raise ConfigError(f"epoch {t} outside [0, {total_epochs}]")
    return lr0 * max(0.0, 1.0 - t / total_epochs) ** poly_power


def ce_loss_and_grad(weights: np.ndarray, feats: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a voxel batch and its gradient w.r.t. weights."""
    logits = feats @ weights.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    b = feats.shape[0]
    loss = -float(logp[np.arange(b), labels].mean())
    probs = np.exp(logp)
    probs[np.arange(b), labels] -= 1.0
    grad = probs.T @ feats / b
    return loss, grad


class TrainSet:
    """Stacked voxel features and labels for the current labeled set.

    Built once per labeled-set change; per-class index arrays back the
    class-balanced batch sampler.
    """

    def __init__(self, feats: np.ndarray, labels: np.ndarray):
        if feats.shape[0] != labels.shape[0]:
            raise ShapeError("features and labels must align")
        self.feats = feats
        self.labels = np.asarray(labels, dtype=np.int64)
        self.classes = np.unique(self.labels)
        self.class_indices = [np.flatnonzero(self.labels == c) for c in self.classes]

    @classmethod
    def from_labeled(cls, labeled, feature_cache: dict | None = None) -> "TrainSet":
        feats, labels = [], []
        for sample, mask in labeled:
            if sample.dims != mask.dims:
                raise ShapeError(f"sample {sample.id} and mask disagree on dims")
            if feature_cache is not None:
                f = feature_cache.get(sample.id)
                if f is None:
                    f = extract_features(sample)
                    feature_cache[sample.id] = f
            else:
                f = extract_features(sample)
            feats.append(f)
            labels.append(mask.labels)
        return cls(np.concatenate(feats, axis=0), np.concatenate(labels))


def _epoch_rng(seed: int, t: int) -> np.random.Generator:
    # keyed by (seed, epoch) so training is chunk-invariant and resumable
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, t])))


def sample_batch(ts: TrainSet, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.balance:
        per = cfg.batch_voxels // len(ts.classes)
        extra = cfg.batch_voxels % len(ts.classes)
        picks = []
        for j, idx in enumerate(ts.class_indices):
            draws = per + (1 if j < extra else 0)
            picks.append(rng.choice(idx, size=draws, replace=True))
        return np.concatenate(picks)
    return rng.integers(0, ts.feats.shape[0], size=cfg.batch_voxels)


def sgd_epochs(
    weights: np.ndarray,
    ts: TrainSet,
    cfg: TrainConfig,
    t_start: int,
    n_epochs: int,
):
    """Run n_epochs SGD steps starting at epoch t_start; returns (weights, losses)."""
    if t_start + n_epochs > cfg.total_epochs:
        raise ConfigError(
            f"epochs [{t_start}, {t_start + n_epochs}) exceed total {cfg.total_epochs}"
        )
    if cfg.batch_voxels < weights.shape[0]:
        raise ConfigError("batch_voxels must be at least the class count")
    w = np.array(weights, dtype=np.float64)
    losses = []
    for e in range(n_epochs):
        t = t_start + e
        rng = _epoch_rng(cfg.seed, t)
        batch = sample_batch(ts, cfg, rng)
        loss, grad = ce_loss_and_grad(w, ts.feats[batch], ts.labels[batch])
        if not np.isfinite(loss):
            raise ValueError(f"non-finite training loss at epoch {t}")
        w -= poly_lr(cfg.lr0, t, cfg.total_epochs, cfg.poly_power) * grad
        losses.append(loss)
    return w, losses


def train_epochs(
    model: SegModel,
    labeled,
    cfg: TrainConfig,
    t_start: int,
    n_epochs: int,
    feature_cache: dict | None = None,
):
    """Fine-tune on (sample, mask) pairs for n_epochs; returns (model, losses)."""
    labeled = list(labeled)
    if not labeled:
        raise ConfigError("cannot train on an empty labeled set")
    for sample, _ in labeled:
        _check_compat(model, sample)
    ts = TrainSet.from_labeled(labeled, feature_cache)
    w, losses = sgd_epochs(model.weights, ts, cfg, t_start, n_epochs)
    return SegModel(w, model.num_modalities, model.num_classes), losses


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: SegModel) -> None:
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        0,
        0,
        model.num_modalities,
        model.num_classes,
        model.weights.shape[1],
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header + model.weights.astype("<f8").tobytes())
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc


def load_model(path) -> SegModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"reading {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(path, "file too short for checkpoint header", offset=len(raw))
    magic, version, _, _, m, c, d = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, f"unsupported checkpoint version {version}", offset=4)
    if d != feature_dim(m):
        raise FormatError(path, f"feature dim {d} inconsistent with M={m}", offset=12)
    expected = _CKPT_HEADER.size + 8 * c * d
    if len(raw) != expected:
        raise FormatError(
            path,
            f"expected {expected} bytes for {c}x{d} weights, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    weights = np.frombuffer(raw, dtype="<f8", count=c * d, offset=_CKPT_HEADER.size)
    return SegModel(weights.reshape(c, d), m, c)
