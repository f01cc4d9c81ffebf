"""Hyperspectral cube storage, ingestion, patch extraction and synthetic scenes.

File formats (little-endian):

* HSC1 cube: magic ``HSC1``; u32 bands, height, width; u8 normalized flag;
  3 reserved bytes; then bands*height*width float32 values in band-major
  order (band, then row, then column).
* HSL1 labels: magic ``HSL1``; u32 height, width; height*width uint16 labels
  row-major.  0 means unlabeled, 1..K are class ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError
from .seeding import PATCHES, SCENE, SPLIT, derive_rng
from .validation import check_unit_range

_CUBE_MAGIC = b"HSC1"
_LABEL_MAGIC = b"HSL1"
_CUBE_HEADER = struct.Struct("<4sIIIB3s")
_LABEL_HEADER = struct.Struct("<4sII")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DataCube:
    """A (bands, height, width) cube of reflectances normalized to [0, 1]."""

    values: np.ndarray
    wavelengths: np.ndarray | None = None  # nm, metadata only

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise ValueError(f"cube values must be (bands, height, width), got {values.shape}")
        if min(values.shape) < 1:
            raise ValueError(f"cube has an empty dimension: {values.shape}")
        check_unit_range(values, "cube values")
        object.__setattr__(self, "values", _freeze(values))
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float32)
            if wl.shape != (values.shape[0],):
                raise ValueError(f"wavelengths shape {wl.shape} != ({values.shape[0]},)")
            object.__setattr__(self, "wavelengths", _freeze(wl))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LabelGrid:
    """Per-pixel integer labels: 0 = unlabeled, 1..K = class id (dense)."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (height, width), got {labels.shape}")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        labels = labels.astype(np.uint16)
        present = np.unique(labels[labels > 0])
        if present.size and not np.array_equal(present, np.arange(1, present.size + 1)):
            raise ValueError(f"class ids must be dense 1..K, got {present.tolist()}")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        labeled = self.labels[self.labels > 0]
        return int(labeled.max()) if labeled.size else 0


@dataclass(frozen=True)
class PatchSet:
    """Stack of (bands, h, h) patches with labels and source pixel coordinates."""

    values: np.ndarray           # (n, bands, h, h) float32
    labels: np.ndarray           # (n,) int
    source_ids: np.ndarray       # (n, 2) center (row, col) in the source scene
    patch_size: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.source_ids, dtype=np.int64)
        if values.ndim != 4:
            raise ValueError(f"patch values must be (n, bands, h, h), got {values.shape}")
        n = values.shape[0]
        if values.shape[2] != self.patch_size or values.shape[3] != self.patch_size:
            raise ValueError("patch array does not match patch_size")
        if labels.shape != (n,) or ids.shape != (n, 2):
            raise ValueError("labels/source_ids misaligned with patches")
        if n and labels.min() < 1:
            raise ValueError("patch labels must be >= 1")
        object.__setattr__(self, "values", _freeze(values))
        object.__setattr__(self, "labels", _freeze(labels))
        object.__setattr__(self, "source_ids", _freeze(ids))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def bands(self) -> int:
        return self.values.shape[1]

    def replace_values(self, values: np.ndarray) -> "PatchSet":
        """Same labels/ids with new patch values (e.g. after an attack)."""
        return PatchSet(values, self.labels, self.source_ids, self.patch_size)

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.values[idx], self.labels[idx], self.source_ids[idx], self.patch_size)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def save_cube(cube: DataCube, path, normalized: bool = True) -> None:
    header = _CUBE_HEADER.pack(
        _CUBE_MAGIC, cube.bands, cube.height, cube.width, 1 if normalized else 0, b"\0\0\0"
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def load_cube(path) -> DataCube:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CUBE_HEADER.size:
        raise FormatError(f"{path}: truncated cube header")
    magic, c, h, w, normalized, _ = _CUBE_HEADER.unpack_from(raw)
    if magic != _CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if min(c, h, w) < 1:
        raise FormatError(f"{path}: empty dimension in header (C={c}, H={h}, W={w})")
    expected = _CUBE_HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=_CUBE_HEADER.size).reshape(c, h, w)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values")
    if not normalized:
        values = _minmax_per_band(values)
    return DataCube(values)


def _minmax_per_band(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values, dtype=np.float32)
    for c in range(values.shape[0]):
        band = values[c]
        lo, hi = band.min(), band.max()
        out[c] = 0.0 if hi == lo else (band - lo) / (hi - lo)
    return out


def save_labels(grid: LabelGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(_LABEL_MAGIC, grid.height, grid.width))
        fh.write(np.ascontiguousarray(grid.labels, dtype="<u2").tobytes())


def load_labels(path) -> LabelGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _LABEL_HEADER.size:
        raise FormatError(f"{path}: truncated label header")
    magic, h, w = _LABEL_HEADER.unpack_from(raw)
    if magic != _LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _LABEL_HEADER.size + 2 * h * w
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    labels = np.frombuffer(raw, dtype="<u2", offset=_LABEL_HEADER.size).reshape(h, w)
    return LabelGrid(labels)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def extract_patches(
    cube: DataCube,
    grid: LabelGrid,
    patch_size: int = 32,
    max_per_class: int = 100,
    seed: int = 0,
) -> PatchSet:
    """Extract h x h windows centered on labeled pixels, mirror-padded at borders.

    Up to ``max_per_class`` pixels are drawn uniformly per class; output order
    is deterministic, sorted by (row, col).  The window around center (r, c)
    covers rows [r - h/2, r + h/2); padding reflects without repeating the
    border row/column.
    """
    h = patch_size
    if h % 2 or h < 2:
        raise ValueError(f"patch_size must be even and >= 2, got {h}")
    if h > min(cube.height, cube.width):
        raise ValueError(f"patch_size {h} exceeds scene extent {cube.height}x{cube.width}")
    if (grid.height, grid.width) != (cube.height, cube.width):
        raise ValueError("label grid does not match cube dimensions")
    if max_per_class < 1:
        raise ValueError("max_per_class must be >= 1")

    labels = grid.labels
    if not np.any(labels > 0):
        raise ValueError("no labeled pixels in scene")

    rng = derive_rng(seed, PATCHES)
    chosen: list[np.ndarray] = []
    for cls in range(1, grid.num_classes + 1):
        coords = np.argwhere(labels == cls)
        if coords.shape[0] > max_per_class:
            pick = rng.choice(coords.shape[0], size=max_per_class, replace=False)
            coords = coords[pick]
        chosen.append(coords)
    coords = np.concatenate(chosen, axis=0)
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    coords = coords[order]

    pad = h // 2
    padded = np.pad(cube.values, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    patches = np.empty((coords.shape[0], cube.bands, h, h), dtype=np.float32)
    for i, (r, c) in enumerate(coords):
        patches[i] = padded[:, r:r + h, c:c + h]
    patch_labels = labels[coords[:, 0], coords[:, 1]].astype(np.int64)
    return PatchSet(patches, patch_labels, coords, h)


def split(patchset: PatchSet, train_fraction: float, seed: int = 0) -> tuple[PatchSet, PatchSet]:
    """Stratified per-class split into (train, test), deterministic and disjoint."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = derive_rng(seed, SPLIT)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in np.unique(patchset.labels):
        idx = np.flatnonzero(patchset.labels == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has {idx.size} patch(es); need >= 2 to stratify")
        perm = rng.permutation(idx.size)
        n_train = int(idx.size * train_fraction + 0.5)
        n_train = min(max(n_train, 1), idx.size - 1)
        train_idx.append(idx[perm[:n_train]])
        test_idx.append(idx[perm[n_train:]])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return patchset.subset(train), patchset.subset(test)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def make_synthetic_scene(
    classes: int,
    bands: int,
    height: int,
    width: int,
    seed: int = 0,
    noise_sigma: float = 0.02,
) -> tuple[DataCube, LabelGrid]:
    """Generate a labeled scene of K contiguous regions with distinct spectra.

    Regions are Voronoi cells of K random anchors, each carrying a smooth
    spectral signature; signatures of any two classes are at least 0.15 apart
    in max-norm so a small CNN separates them easily.  Gaussian noise with the
    given sigma is added per voxel.  Deterministic under the seed.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if bands < 1 or height < classes or width < 1:
        raise ValueError("scene dimensions too small")
    rng = derive_rng(seed, SCENE)

    sigs = _class_signatures(classes, bands, rng)

    # K distinct anchor pixels -> Voronoi labeling (ties to the lowest class id)
    anchors = rng.choice(height * width, size=classes, replace=False)
    arows, acols = anchors // width, anchors % width
    rows = np.arange(height)[:, None, None]
    cols = np.arange(width)[None, :, None]
    d2 = (rows - arows[None, None, :]) ** 2 + (cols - acols[None, None, :]) ** 2
    labels = d2.argmin(axis=2).astype(np.uint16) + 1

    values = sigs.T[:, labels - 1].astype(np.float32)  # (bands, H, W)
    values = values + rng.normal(0.0, noise_sigma, size=values.shape).astype(np.float32)
    values = np.clip(values, 0.0, 1.0)
    return DataCube(values), LabelGrid(labels)


def _class_signatures(classes: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """(classes, bands) smooth spectra, pairwise L-inf distance >= 0.2."""
    base = np.linspace(0.2, 0.8, classes)
    rng.shuffle(base)
    t = np.linspace(0.0, 1.0, bands)

    def smooth_wiggle():
        w = np.zeros(bands)
        for _ in range(3):
            amp = rng.uniform(0.02, 0.06)
            freq = rng.uniform(0.5, 3.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            w += amp * np.sin(2.0 * np.pi * freq * t + phase)
        return w - w.mean()  # keep the base level intact

    sigs = np.empty((classes, bands))
    for k in range(classes):
        sigs[k] = np.clip(base[k] + smooth_wiggle(), 0.05, 0.95)

    # Zero-mean wiggles keep pairs separated by construction when base levels
    # are far apart; resample the later signature of any pair that still collides.
    min_gap = 0.2
    for _ in range(200):
        bad = _closest_pair_below(sigs, min_gap)
        if bad is None:
            return sigs
        k = bad[1]
        sigs[k] = np.clip(base[k] + smooth_wiggle(), 0.05, 0.95)
    raise RuntimeError("could not separate class signatures; too many classes for [0,1]")


def _closest_pair_below(sigs: np.ndarray, min_gap: float):
    k = sigs.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            if np.max(np.absolute(sigs[i] - sigs[j])) < min_gap:
                return (i, j)
    return None
