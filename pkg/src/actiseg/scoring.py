"""Sample selection criterion: informativeness times pool density.

Informativeness couples the mean normalized prediction entropy (uncertainty
cue) with the predicted foreground volume (concentration cue).  Density sums a
Gaussian kernel over Wasserstein-1 distances between patch distributions after
per-modality PCA reduction, so selection favors samples that are both hard and
representative of the remaining unlabeled pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .errors import ConfigError, ShapeError
from .phantom import Dataset
from .volume import LabelMask, MultiModalSample, ProbabilityMap

SLICED_DIRECTIONS = 32


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    """Per-voxel normalized entropy in [0, 1]."""

    dims: tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size != self.dims[0] * self.dims[1] * self.dims[2]:
            raise ShapeError("uncertainty map size does not match dims")
        if v.size and (v.min() < 0.0 or v.max() > 1.0 + 1e-9):
            raise ValueError("uncertainty values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def entropy_map(p: ProbabilityMap) -> UncertaintyMap:
    """Per-voxel entropy of the class distribution, normalized by ln C."""
    if p.num_classes < 2:
        raise ConfigError("entropy needs at least 2 classes")
    probs = p.probs
    terms = np.where(probs > 0.0, probs * np.log(probs, where=probs > 0.0), 0.0)
    h = -terms.sum(axis=1) / np.log(p.num_classes)
    return UncertaintyMap(p.dims, np.clip(h, 0.0, None))


def uncertainty_score(u: UncertaintyMap) -> float:
    """Mean voxel-wise entropy over the whole map."""
    return float(u.values.mean())


def abundance(mask: LabelMask) -> int:
    """Number of voxels predicted as foreground (any non-background class)."""
    return int(np.count_nonzero(mask.labels))


def informativeness(mu: float, foreground: int) -> float:
    """Uncertainty cue times concentration cue."""
    return mu * foreground


def criterion(zeta: float, gamma: float) -> float:
    """Final selection score: informativeness times density."""
    return zeta * gamma


def select_best(scores: dict) -> int:
    """Id with the maximal score; exact ties resolve to the lowest id."""
    if not scores:
        raise ConfigError("cannot select from an empty pool")
    best_id, best = None, -np.inf
    for sid in sorted(scores):
        if scores[sid] > best:
            best_id, best = sid, scores[sid]
    return best_id


# ---------------------------------------------------------------------------
# PCA patch reduction


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """Top principal directions of pooled non-overlapping patches of one modality."""

    modality: int
    patch_size: int
    mean: np.ndarray         # (p^3,)
    components: np.ndarray   # (d, p^3), orthonormal rows
    eigenvalues: np.ndarray  # (d,), non-increasing

    def __post_init__(self):
        comps = np.asarray(self.components, dtype=np.float64)
        gram = comps @ comps.T
        if np.abs(gram - np.eye(comps.shape[0])).max() > 1e-8:
            raise ValueError("components must be orthonormal")
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if np.any(np.diff(ev) > 1e-12) or (ev.size and ev.min() < 0):
            raise ValueError("eigenvalues must be non-increasing and non-negative")
        for name, arr in (("mean", np.asarray(self.mean, dtype=np.float64)),
                          ("components", comps), ("eigenvalues", ev)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def _volume_patches(vol, patch_size: int) -> np.ndarray:
    """Non-overlapping p^3 patches as rows; dims padded to multiples of p by edge clamp."""
    grid = vol.as_grid()
    p = patch_size
    pads = [(0, (-grid.shape[a]) % p) for a in range(3)]
    if any(pad[1] for pad in pads):
        grid = np.pad(grid, pads, mode="edge")
    bz, by, bx = (s // p for s in grid.shape)
    blocks = grid.reshape(bz, p, by, p, bx, p).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(-1, p ** 3)


def sample_patches(x: MultiModalSample, modality: int, patch_size: int) -> np.ndarray:
    if not 0 <= modality < x.num_modalities:
        raise ShapeError(f"modality {modality} out of range [0, {x.num_modalities})")
    return _volume_patches(x.modalities[modality], patch_size)


def fit_pca(pool: Dataset, modality: int, patch_size: int = 4, n_components: int = 1) -> PcaBasis:
    """Fit the patch-space PCA basis on all samples of one modality."""
    if len(pool) < 1:
        raise ConfigError("cannot fit PCA on an empty pool")
    if not 1 <= n_components <= patch_size ** 3:
        raise ConfigError(
            f"n_components must be in [1, {patch_size ** 3}], got {n_components}"
        )
    patches = np.concatenate(
        [sample_patches(s, modality, patch_size) for s in pool.samples], axis=0
    )
    if patches.shape[0] < n_components:
        raise ConfigError(
            f"{patches.shape[0]} patches cannot support {n_components} components"
        )
    mean = patches.mean(axis=0)
    centered = patches - mean
    cov = centered.T @ centered / patches.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    return PcaBasis(
        modality=modality,
        patch_size=patch_size,
        mean=mean,
        components=eigvecs[:, order].T,
        eigenvalues=np.clip(eigvals[order], 0.0, None),
    )


def project_sample(basis: PcaBasis, x: MultiModalSample) -> np.ndarray:
    """Empirical patch distribution of x under the basis, shape (n_patches, d)."""
    patches = sample_patches(x, basis.modality, basis.patch_size)
    if patches.shape[1] != basis.mean.size:
        raise ShapeError(
            f"patch dim {patches.shape[1]} does not match basis ({basis.mean.size})"
        )
    return (patches - basis.mean) @ basis.components.T


# ---------------------------------------------------------------------------
# Wasserstein distances


def wasserstein_1d(a, b) -> float:
    """W1 between equal-weight empirical distributions on the line.

    Equal counts reduce to the mean absolute difference of sorted values;
    unequal counts integrate |Fa^-1 - Fb^-1| over the merged piecewise-constant
    quantile functions (exact integer segment bookkeeping).
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("wasserstein_1d needs non-empty inputs")
    n, m = a.size, b.size
    if n == m:
        return float(np.abs(a - b).mean())
    # segment lengths counted in units of 1/(n*m)
    i = j = 0
    ra, rb = m, n
    total = 0
    cost = 0.0
    while i < n and j < m:
        step = min(ra, rb)
        cost += step * abs(a[i] - b[j])
        total += step
        ra -= step
        rb -= step
        if ra == 0:
            i += 1
            ra = m
        if rb == 0:
            j += 1
            rb = n
    assert total == n * m
    return cost / (n * m)


def wasserstein_lp_oracle(a, b, a_weights=None, b_weights=None, method: str = "auto") -> float:
    """Exact optimal-transport cost between small weighted point sets.

    Realizes the transport definition directly: minimizes the expected
    Euclidean ground cost over all couplings, as a linear program (or an
    optimal assignment when weights are uniform and counts equal).  Test-scale
    only: at most 16 points per side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigError("point sets must be 1- or 2-dimensional arrays")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"point dims differ: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    if n > 16 or m > 16:
        raise ConfigError(f"oracle capped at 16 points per side, got {n}x{m}")
    wa = np.full(n, 1.0 / n) if a_weights is None else np.asarray(a_weights, dtype=np.float64)
    wb = np.full(m, 1.0 / m) if b_weights is None else np.asarray(b_weights, dtype=np.float64)
    if wa.size != n or wb.size != m:
        raise ShapeError("weights must align with the point sets")
    if abs(wa.sum() - 1.0) > 1e-9 or abs(wb.sum() - 1.0) > 1e-9:
        raise ConfigError("weights must sum to 1 on each side")

    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))

    uniform = (
        n == m
        and np.allclose(wa, 1.0 / n, atol=1e-12)
        and np.allclose(wb, 1.0 / m, atol=1e-12)
    )
    if method == "assignment" or (method == "auto" and uniform):
        if not uniform:
            raise ConfigError("assignment method needs uniform weights and equal counts")
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean())

    # transportation LP over the coupling matrix
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(
        cost.ravel(),
        A_eq=a_eq,
        b_eq=np.concatenate([wa, wb]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


@lru_cache(maxsize=8)
def _sliced_directions(d: int, count: int = SLICED_DIRECTIONS) -> np.ndarray:
    """Fixed seeded unit directions for sliced W1 in d > 1 dimensions."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([0x5C1CED, d, count])))
    dirs = rng.standard_normal((count, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs.setflags(write=False)
    return dirs


def _projection_distance(pa: np.ndarray, pb: np.ndarray) -> float:
    d = pa.shape[1]
    if d == 1:
        return wasserstein_1d(pa[:, 0], pb[:, 0])
    dirs = _sliced_directions(d)
    return float(np.mean([wasserstein_1d(pa @ u, pb @ u) for u in dirs]))


def pair_distance(x_i: MultiModalSample, x_j: MultiModalSample, bases) -> float:
    """Mean over modalities of W1 between PCA-projected patch distributions."""
    bases = list(bases)
    if not (x_i.num_modalities == x_j.num_modalities == len(bases)):
        raise ShapeError("samples and bases must agree on modality count")
    dists = [
        _projection_distance(project_sample(basis, x_i), project_sample(basis, x_j))
        for basis in bases
    ]
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# pool density


@dataclass(frozen=True, eq=False)
class PairDistanceMatrix:
    """All pairwise distances over the target pool, with the kernel scale.

    Depends only on the raw data, so it is computed once per run and reused
    across selection rounds.
    """

    dist: np.ndarray
    threshold: float  # kernel scale: median off-diagonal distance

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ShapeError(f"distance matrix must be square, got {d.shape}")
        if np.abs(d - d.T).max() > 1e-12:
            raise ValueError("distance matrix must be symmetric")
        if d.size and d.min() < 0:
            raise ValueError("distances must be non-negative")
        if np.abs(np.diag(d)).max() > 0:
            raise ValueError("diagonal must be zero")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "dist", d)
        object.__setattr__(self, "threshold", float(self.threshold))

    def __len__(self) -> int:
        return self.dist.shape[0]


def pair_distance_matrix(pool: Dataset, bases) -> PairDistanceMatrix:
    """Compute every pairwise distance; the kernel scale is the median off-diagonal."""
    bases = list(bases)
    n = len(pool)
    if n < 2:
        raise ConfigError("pair distances need at least 2 samples")
    projections = [
        [project_sample(basis, s) for basis in bases] for s in pool.samples
    ]
    d1 = all(p.shape[1] == 1 for p in projections[0])
    if d1:
        # pre-sort once per (sample, modality); every pair is then a mean |diff|
        sorted_proj = [[np.sort(p[:, 0]) for p in mods] for mods in projections]
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if d1:
                w = float(
                    np.mean(
                        [
                            np.abs(sorted_proj[i][l] - sorted_proj[j][l]).mean()
                            for l in range(len(bases))
                        ]
                    )
                )
            else:
                w = float(
                    np.mean(
                        [
                            _projection_distance(projections[i][l], projections[j][l])
                            for l in range(len(bases))
                        ]
                    )
                )
            dist[i, j] = dist[j, i] = w
    off_diag = dist[np.triu_indices(n, k=1)]
    return PairDistanceMatrix(dist, float(np.median(off_diag)))


def density(i: int, unlabeled, matrix: PairDistanceMatrix) -> float:
    """Gaussian-kernel density of sample i within the current unlabeled pool."""
    if matrix.threshold <= 0:
        raise ConfigError("kernel scale must be positive")
    pool = sorted(unlabeled)
    if i not in unlabeled:
        raise ValueError(f"sample {i} is not in the unlabeled pool")
    js = np.array([j for j in pool if j != i], dtype=np.int64)
    if js.size == 0:
        return 0.0
    ratios = matrix.dist[i, js] / matrix.threshold
    return float(np.exp(-(ratios ** 2)).sum())
