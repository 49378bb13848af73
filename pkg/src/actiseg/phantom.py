"""Deterministic synthetic multi-modal datasets with a controllable domain shift.

A sample is a shared low-frequency background texture observed through M
modality channels (per-channel gain/bias/contrast/noise), with axis-aligned
ellipsoidal tumors as the single foreground class.  The ground-truth mask
doubles as the simulated annotation oracle.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError
from .volume import LabelMask, MultiModalSample, Volume3D, read_mask, read_volume, write_mask, write_volume

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer; decorrelates consecutive integers into 64-bit seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def substream_seed(seed: int, index: int) -> int:
    """Seed for per-sample RNG sub-stream `index`; prefix-stable across dataset sizes."""
    return (seed ^ splitmix64(index)) & _MASK64


def _per_modality(value, m: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * m
    out = tuple(float(v) for v in value)
    if len(out) != m:
        raise ConfigError(f"{name} needs one value per modality ({m}), got {len(out)}")
    return out


@dataclass(frozen=True)
class DomainSpec:
    """Generator parameters for one domain (source or target)."""

    dims: tuple[int, int, int] = (32, 32, 32)
    num_modalities: int = 3
    tumor_count_range: tuple[int, int] = (1, 3)
    tumor_radius_range: tuple[float, float] = (2.0, 5.5)
    intensity_gain: tuple[float, ...] = (1.0, 1.0, 1.0)
    intensity_bias: tuple[float, ...] = (0.0, 0.0, 0.0)
    tumor_contrast: tuple[float, ...] = (1.5, 0.9, 0.3)
    noise_sigma: float = 0.05
    smoothing_radius: int = 0
    seed: int = 0

    def __post_init__(self):
        m = int(self.num_modalities)
        if m < 1:
            raise ConfigError(f"num_modalities must be >= 1, got {m}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ConfigError(f"dims must be three positive counts, got {dims}")
        cmin, cmax = (int(c) for c in self.tumor_count_range)
        if not 0 <= cmin <= cmax:
            raise ConfigError(f"bad tumor_count_range {(cmin, cmax)}")
        rmin, rmax = (float(r) for r in self.tumor_radius_range)
        if not 0 < rmin <= rmax:
            raise ConfigError(f"radii must be positive, got {(rmin, rmax)}")
        # strict enough that an ellipsoid always fits without touching the boundary
        if rmax > (min(dims) - 1) / 2:
            raise ConfigError(
                f"max radius {rmax} too large for dims {dims}; needs <= (min(dims)-1)/2"
            )
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.smoothing_radius < 0:
            raise ConfigError(f"smoothing_radius must be >= 0, got {self.smoothing_radius}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "num_modalities", m)
        object.__setattr__(self, "tumor_count_range", (cmin, cmax))
        object.__setattr__(self, "tumor_radius_range", (rmin, rmax))
        object.__setattr__(self, "intensity_gain", _per_modality(self.intensity_gain, m, "intensity_gain"))
        object.__setattr__(self, "intensity_bias", _per_modality(self.intensity_bias, m, "intensity_bias"))
        object.__setattr__(self, "tumor_contrast", _per_modality(self.tumor_contrast, m, "tumor_contrast"))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "smoothing_radius", int(self.smoothing_radius))
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "DomainSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def single_modality(self, l: int) -> "DomainSpec":
        """Spec describing the same domain restricted to modality `l`."""
        if not 0 <= l < self.num_modalities:
            raise ConfigError(f"modality {l} out of range [0, {self.num_modalities})")
        return dataclasses.replace(
            self,
            num_modalities=1,
            intensity_gain=(self.intensity_gain[l],),
            intensity_bias=(self.intensity_bias[l],),
            tumor_contrast=(self.tumor_contrast[l],),
        )


def default_source_spec(seed: int = 101) -> DomainSpec:
    return DomainSpec(seed=seed)


def default_target_spec(seed: int = 202) -> DomainSpec:
    """Default shifted domain: gain 1.0->1.4, bias 0->0.3, noise 0.05->0.12,
    and per-modality tumor contrast dimmed to 45% of the source level after
    gain normalization, so tumors sit much closer to the noise floor."""
    return DomainSpec(
        intensity_gain=(1.4, 1.4, 1.4),
        intensity_bias=(0.3, 0.3, 0.3),
        tumor_contrast=(0.945, 0.567, 0.189),
        noise_sigma=0.12,
        seed=seed,
    )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Generated samples with their ground-truth masks."""

    samples: tuple[MultiModalSample, ...]
    truths: tuple[LabelMask, ...]
    spec: DomainSpec

    def __post_init__(self):
        samples = tuple(self.samples)
        truths = tuple(self.truths)
        if len(samples) != len(truths):
            raise ConfigError("samples and truths must be parallel lists")
        for s, t in zip(samples, truths):
            if s.dims != t.dims:
                raise ConfigError(f"sample {s.id} and its mask disagree on dims")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "truths", truths)

    def __len__(self) -> int:
        return len(self.samples)

    def modality_subset(self, l: int) -> "Dataset":
        """View of the dataset keeping only modality `l` of every sample."""
        samples = tuple(
            MultiModalSample(s.id, (s.modalities[l],)) for s in self.samples
        )
        return Dataset(samples, self.truths, self.spec.single_modality(l))


def _background_texture(dims: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Sum of 3 random-phase separable cosine products, each of amplitude 1."""
    nx, ny, nz = dims
    freqs = rng.integers(1, 4, size=(3, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, 3))
    x = np.arange(nx) / nx
    y = np.arange(ny) / ny
    z = np.arange(nz) / nz
    tex = np.zeros((nz, ny, nx))
    for k in range(3):
        cx = np.cos(2.0 * np.pi * freqs[k, 0] * x + phases[k, 0])
        cy = np.cos(2.0 * np.pi * freqs[k, 1] * y + phases[k, 1])
        cz = np.cos(2.0 * np.pi * freqs[k, 2] * z + phases[k, 2])
        tex += cz[:, None, None] * cy[None, :, None] * cx[None, None, :]
    return tex


def gen_sample(spec: DomainSpec, rng: np.random.Generator, sample_id: int = 0):
    """Generate one (MultiModalSample, LabelMask) pair.

    Draw order is fixed (texture, tumor count, per-tumor geometry, per-modality
    noise) so identical (spec, rng state) yields bit-identical output.  Voxels
    are quantized to f32 precision so in-memory data matches the file format
    exactly.
    """
    nx, ny, nz = spec.dims
    tex = _background_texture(spec.dims, rng)

    cmin, cmax = spec.tumor_count_range
    count = int(rng.integers(cmin, cmax + 1))
    inside = np.zeros((nz, ny, nx), dtype=bool)
    zs = np.arange(nz, dtype=np.float64)[:, None, None]
    ys = np.arange(ny, dtype=np.float64)[None, :, None]
    xs = np.arange(nx, dtype=np.float64)[None, None, :]
    for _ in range(count):
        radii = rng.uniform(*spec.tumor_radius_range, size=3)  # rx, ry, rz
        center = np.array(
            [rng.uniform(radii[a], spec.dims[a] - 1 - radii[a]) for a in range(3)]
        )
        q = (
            ((xs - center[0]) / radii[0]) ** 2
            + ((ys - center[1]) / radii[1]) ** 2
            + ((zs - center[2]) / radii[2]) ** 2
        )
        inside |= q <= 1.0

    mask = LabelMask(spec.dims, inside.astype(np.uint16).ravel())

    modalities = []
    size = 2 * spec.smoothing_radius + 1
    for l in range(spec.num_modalities):
        vol = tex * spec.intensity_gain[l] + spec.intensity_bias[l]
        vol = vol + inside * spec.tumor_contrast[l]
        if spec.noise_sigma > 0:
            vol = vol + rng.normal(0.0, spec.noise_sigma, size=(nz, ny, nx))
        if spec.smoothing_radius > 0:
            vol = uniform_filter(vol, size=size, mode="nearest")
        vol = vol.astype(np.float32).astype(np.float64)
        modalities.append(Volume3D.from_grid(vol))

    return MultiModalSample(sample_id, tuple(modalities)), mask


def gen_dataset(spec: DomainSpec, n: int) -> Dataset:
    """Generate n samples from independent sub-streams of spec.seed."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    samples, truths = [], []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(substream_seed(spec.seed, i)))
        s, t = gen_sample(spec, rng, sample_id=i)
        samples.append(s)
        truths.append(t)
    return Dataset(tuple(samples), tuple(truths), spec)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(directory, ds: Dataset) -> None:
    """Write samples as sample_<i>_mod_<l>.avol / sample_<i>_mask.avol plus spec.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (sample, truth) in enumerate(zip(ds.samples, ds.truths)):
        for l, vol in enumerate(sample.modalities):
            write_volume(directory / f"sample_{i}_mod_{l}.avol", vol)
        write_mask(directory / f"sample_{i}_mask.avol", truth)
    meta = {"spec": ds.spec.to_json_dict(), "n_samples": len(ds)}
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta_path = directory / "spec.json"
    if not meta_path.exists():
        raise OSError(f"reading {meta_path}: no such file")
    meta = json.loads(meta_path.read_text())
    spec = DomainSpec.from_json_dict(meta["spec"])
    n = int(meta["n_samples"])
    samples, truths = [], []
    for i in range(n):
        mods = tuple(
            read_volume(directory / f"sample_{i}_mod_{l}.avol")
            for l in range(spec.num_modalities)
        )
        samples.append(MultiModalSample(i, mods))
        truths.append(read_mask(directory / f"sample_{i}_mask.avol"))
    return Dataset(tuple(samples), tuple(truths), spec)
