"""Core volumetric data types and their binary file format.

All types are immutable after construction (backing arrays are marked
read-only) and safe to share across threads.

Binary layout (all integers little-endian):

    bytes 0-3   magic b"AVOL"
    byte  4     format version (1)
    byte  5     payload kind: 0 float volume, 1 integer mask, 2 probability map
    bytes 6-7   reserved, zero
    3 x u32     dims nx, ny, nz
    [u32]       class count C (kind 2 only)
    payload     f32 voxels (kinds 0 and 2) or u16 labels (kind 1)

Voxel order is x-fastest: flat index = x + nx*(y + ny*z).  Files store
32-bit payloads; in-memory arrays are 64-bit floats (or u16 for masks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"AVOL"
FORMAT_VERSION = 1
KIND_VOLUME = 0
KIND_MASK = 1
KIND_PROBMAP = 2

_HEADER = struct.Struct("<4sBBH")  # magic, version, kind, reserved
_DIMS = struct.Struct("<III")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ShapeError(f"dims must be three positive voxel counts, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume3D:
    """One scalar 3D volume, flat in x-fastest order."""

    dims: tuple[int, int, int]
    voxels: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        vox = np.array(self.voxels, dtype=np.float64).ravel()
        if vox.size != dims[0] * dims[1] * dims[2]:
            raise ShapeError(
                f"voxel count {vox.size} does not match dims {dims}"
            )
        if not np.all(np.isfinite(vox)):
            raise ValueError("volume contains non-finite voxel values")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxels", _freeze(vox))

    @property
    def size(self) -> int:
        return self.voxels.size

    def as_grid(self) -> np.ndarray:
        """View as a (nz, ny, nx) array; C-order flattening is x-fastest."""
        nx, ny, nz = self.dims
        return self.voxels.reshape(nz, ny, nx)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "Volume3D":
        nz, ny, nx = grid.shape
        return cls((nx, ny, nz), np.asarray(grid).ravel())

    def __eq__(self, other):
        return (
            isinstance(other, Volume3D)
            and self.dims == other.dims
            and np.array_equal(self.voxels, other.voxels)
        )


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Per-voxel integer class labels, flat in x-fastest order."""

    dims: tuple[int, int, int]
    labels: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        lab = np.asarray(self.labels)
        if lab.size != dims[0] * dims[1] * dims[2]:
            raise ShapeError(f"label count {lab.size} does not match dims {dims}")
        if lab.size and (lab.min() < 0 or lab.max() > 0xFFFF):
            raise ValueError("labels must lie in [0, 65535]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", _freeze(lab.astype(np.uint16).ravel()))

    @property
    def size(self) -> int:
        return self.labels.size

    def as_grid(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return self.labels.reshape(nz, ny, nx)

    def __eq__(self, other):
        return (
            isinstance(other, LabelMask)
            and self.dims == other.dims
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class MultiModalSample:
    """Co-registered modality volumes for one subject; the unit of selection."""

    id: int
    modalities: tuple[Volume3D, ...]

    def __post_init__(self):
        mods = tuple(self.modalities)
        if len(mods) < 1:
            raise ShapeError("a sample needs at least one modality")
        dims = mods[0].dims
        if any(m.dims != dims for m in mods):
            raise ShapeError("all modalities of a sample must share dims")
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "modalities", mods)

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.modalities[0].dims

    def __eq__(self, other):
        return (
            isinstance(other, MultiModalSample)
            and self.id == other.id
            and self.modalities == other.modalities
        )


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-voxel class distributions, shape (K, C), rows summing to one."""

    dims: tuple[int, int, int]
    num_classes: int
    probs: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        c = int(self.num_classes)
        if c < 1:
            raise ConfigError(f"class count must be >= 1, got {c}")
        k = dims[0] * dims[1] * dims[2]
        probs = np.asarray(self.probs, dtype=np.float64).reshape(k, c)
        if probs.min() < 0:
            raise ValueError("probabilities must be non-negative")
        sums = probs.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("per-voxel probabilities must sum to 1 within 1e-6")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "num_classes", c)
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def num_voxels(self) -> int:
        return self.probs.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, ProbabilityMap)
            and self.dims == other.dims
            and self.num_classes == other.num_classes
            and np.array_equal(self.probs, other.probs)
        )


# ---------------------------------------------------------------------------
# file I/O


def _header_bytes(kind: int, dims: tuple[int, int, int], num_classes: int | None = None) -> bytes:
    out = _HEADER.pack(MAGIC, FORMAT_VERSION, kind, 0) + _DIMS.pack(*dims)
    if kind == KIND_PROBMAP:
        out += struct.pack("<I", num_classes)
    return out


def _write_bytes(path, payload: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise OSError(f"reading {path}: {exc}") from exc


def _parse_header(path, raw: bytes, expect_kind: int) -> tuple[tuple[int, int, int], int]:
    """Validate the fixed header and return (dims, payload_offset)."""
    if len(raw) < _HEADER.size + _DIMS.size:
        raise FormatError(path, f"file too short for header ({len(raw)} bytes)", offset=len(raw))
    magic, version, kind, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(path, f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(path, f"unsupported format version {version}", offset=4)
    if kind != expect_kind:
        raise FormatError(path, f"payload kind {kind}, expected {expect_kind}", offset=5)
    if reserved != 0:
        raise FormatError(path, "reserved header bytes are non-zero", offset=6)
    dims = _DIMS.unpack_from(raw, _HEADER.size)
    if any(d < 1 for d in dims):
        raise FormatError(path, f"non-positive dims {dims}", offset=_HEADER.size)
    return dims, _HEADER.size + _DIMS.size


def _payload_f64(path, raw: bytes, offset: int, count: int) -> np.ndarray:
    expected = offset + 4 * count
    if len(raw) != expected:
        raise FormatError(
            path,
            f"expected {expected} bytes for {count} f32 values, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise FormatError(path, "non-finite value in payload", offset=offset + 4 * idx)
    return values


def write_volume(path, v: Volume3D) -> None:
    """Write a volume as f32; validates finiteness before any bytes go out."""
    if not np.all(np.isfinite(v.voxels)):
        raise ValueError("refusing to write volume with non-finite voxels")
    payload = _header_bytes(KIND_VOLUME, v.dims) + v.voxels.astype("<f4").tobytes()
    _write_bytes(path, payload)


def read_volume(path) -> Volume3D:
    raw = _read_bytes(path)
    dims, offset = _parse_header(path, raw, KIND_VOLUME)
    values = _payload_f64(path, raw, offset, dims[0] * dims[1] * dims[2])
    return Volume3D(dims, values)


def write_mask(path, m: LabelMask) -> None:
    payload = _header_bytes(KIND_MASK, m.dims) + m.labels.astype("<u2").tobytes()
    _write_bytes(path, payload)


def read_mask(path) -> LabelMask:
    raw = _read_bytes(path)
    dims, offset = _parse_header(path, raw, KIND_MASK)
    count = dims[0] * dims[1] * dims[2]
    expected = offset + 2 * count
    if len(raw) != expected:
        raise FormatError(
            path,
            f"expected {expected} bytes for {count} u16 labels, found {len(raw)}",
            offset=min(len(raw), expected),
        )
    labels = np.frombuffer(raw, dtype="<u2", count=count, offset=offset)
    return LabelMask(dims, labels)


def write_probmap(path, p: ProbabilityMap) -> None:
    header = _header_bytes(KIND_PROBMAP, p.dims, p.num_classes)
    _write_bytes(path, header + p.probs.astype("<f4").tobytes())


def read_probmap(path) -> ProbabilityMap:
    raw = _read_bytes(path)
    dims, offset = _parse_header(path, raw, KIND_PROBMAP)
    if len(raw) < offset + 4:
        raise FormatError(path, "missing class count", offset=offset)
    (num_classes,) = struct.unpack_from("<I", raw, offset)
    if num_classes < 1:
        raise FormatError(path, f"non-positive class count {num_classes}", offset=offset)
    offset += 4
    values = _payload_f64(path, raw, offset, dims[0] * dims[1] * dims[2] * num_classes)
    return ProbabilityMap(dims, num_classes, values)


# ---------------------------------------------------------------------------
# normalization


def zscore(v: Volume3D) -> Volume3D:
    """Normalize to zero mean, unit population std; constant input maps to zeros."""
    mean = float(v.voxels.mean())
    std = float(v.voxels.std())
    if std < 1e-12:
        return Volume3D(v.dims, np.zeros(v.size))
    return Volume3D(v.dims, (v.voxels - mean) / std)
