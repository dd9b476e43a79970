"""Synthetic ellipsoid volumes, DVOL file I/O, augmentation and mixed batch sampling."""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# ---------------------------------------------------------------------------
# synthetic data

MIN_FG_FRACTION = 0.02
MAX_FG_FRACTION = 0.40


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # (z, y, x) in voxel coordinates
    radii: tuple

    def contains(self, z, y, x) -> np.ndarray:
        (cz, cy, cx), (rz, ry, rx) = self.center, self.radii
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def coordinate_grids(shape: Sequence[int]):
    return np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")


def render_mask(shape: Sequence[int], ellipsoids: Sequence[Ellipsoid], grids=None) -> np.ndarray:
    """Union of ellipsoids evaluated at voxel centres."""
    z, y, x = coordinate_grids(shape) if grids is None else grids
    m = np.zeros(np.shape(z), dtype=bool)
    for e in ellipsoids:
        m |= e.contains(z, y, x)
    return m.astype(np.uint8)


def sample_ellipsoids(rng: np.random.Generator, shape: Sequence[int], max_tries: int = 1000):
    """Draw 1-2 ellipsoids whose union covers 2-40% of the volume."""
    shape = tuple(shape)
    scale = min(shape) / 32.0
    grids = coordinate_grids(shape)
    for _ in range(max_tries):
        count = int(rng.integers(1, 3))
        ells = []
        for _ in range(count):
            radii = tuple(float(r) for r in rng.uniform(4.0, 10.0, 3) * scale)
            center = tuple(
                float(rng.uniform(0.6 * r, s - 1 - 0.6 * r)) for r, s in zip(radii, shape)
            )
            ells.append(Ellipsoid(center, radii))
        mask = render_mask(shape, ells, grids)
        frac = mask.mean()
        if MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            return ells, mask
    raise RuntimeError("could not draw ellipsoids within the foreground-fraction bounds")


def bias_field(rng: np.random.Generator, shape: Sequence[int], amplitude: float) -> np.ndarray:
    """Smooth additive offset: a random quadratic in normalised coordinates, max |b| <= amplitude."""
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    basis = np.stack([z, y, x, z * z, y * y, x * x, z * y, z * x, y * x])
    coef = rng.normal(size=9)
    b = np.tensordot(coef, basis, axes=1)
    b -= b.mean()
    peak = np.abs(b).max()
    if peak == 0 or amplitude == 0:
        return np.zeros(shape)
    return b * (amplitude * rng.uniform(0.5, 1.0) / peak)


@dataclass
class SyntheticCase:
    volume: np.ndarray
    mask: np.ndarray
    ellipsoids: list
    contrast: float


def generate_case(rng: np.random.Generator, shape=(32, 32, 32), noise_sigma: float = 0.1,
                  bias_amplitude: float = 0.2) -> SyntheticCase:
    ells, mask = sample_ellipsoids(rng, shape)
    contrast = float(rng.uniform(0.5, 1.0))
    vol = contrast * mask + bias_field(rng, shape, bias_amplitude)
    if noise_sigma > 0:
        vol = vol + rng.normal(0.0, noise_sigma, shape)
    return SyntheticCase(vol.astype(np.float32), mask, ells, contrast)


def generate_cases(n_volumes: int, shape=(32, 32, 32), seed: int = 0, **kw) -> list:
    for s in shape:
        if s % 8:
            raise ValueError(f"volume dimensions must be divisible by 8, got {tuple(shape)}")
    rng = np.random.default_rng(seed)
    return [generate_case(rng, shape, **kw) for _ in range(n_volumes)]


def generate_synthetic(n_volumes: int, shape=(32, 32, 32), seed: int = 0, noise_sigma: float = 0.1,
                       bias_amplitude: float = 0.2) -> list:
    """``n_volumes`` (volume, mask) pairs; bit-identical for equal arguments."""
    cases = generate_cases(n_volumes, shape, seed, noise_sigma=noise_sigma, bias_amplitude=bias_amplitude)
    return [(c.volume, c.mask) for c in cases]


def zscore(v: np.ndarray) -> np.ndarray:
    v64 = np.asarray(v, dtype=np.float64)
    sd = v64.std()
    return ((v64 - v64.mean()) / (sd if sd > 1e-8 else 1.0)).astype(np.float32)


# ---------------------------------------------------------------------------
# labelled / unlabelled split


@dataclass
class DatasetSplit:
    labelled: list  # (volume, mask)
    unlabelled: list  # volume
    labelled_ids: list = field(default_factory=list)
    unlabelled_ids: list = field(default_factory=list)

    @property
    def num_labelled(self) -> int:
        return len(self.labelled)

    @property
    def num_unlabelled(self) -> int:
        return len(self.unlabelled)


def split(data: Sequence, labelled_fraction: float, seed: int = 0) -> DatasetSplit:
    """Seeded shuffle, then the first ``ceil(fraction * n)`` items keep their masks.

    Items whose mask is ``None`` can only land on the unlabelled side.
    """
    if not 0.0 < labelled_fraction <= 1.0:
        raise ValueError(f"labelled_fraction must lie in (0, 1], got {labelled_fraction}")
    n = len(data)
    n_lab = math.ceil(labelled_fraction * n - 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    lab_ids = [int(i) for i in order if data[i][1] is not None][:n_lab]
    if not lab_ids:
        raise ValueError(f"labelled_fraction={labelled_fraction} of {n} volumes leaves no labelled sample")
    chosen = set(lab_ids)
    unl_ids = [int(i) for i in order if int(i) not in chosen]
    if len(lab_ids) / n > 0.5:
        warnings.warn(f"labelled share {len(lab_ids)}/{n} exceeds one half", stacklevel=2)
    return DatasetSplit(
        labelled=[(data[i][0], data[i][1]) for i in lab_ids],
        unlabelled=[data[i][0] for i in unl_ids],
        labelled_ids=lab_ids,
        unlabelled_ids=unl_ids,
    )


# ---------------------------------------------------------------------------
# augmentation

ROT_PLANES = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class Transform:
    flips: tuple = (False, False, False)
    plane: tuple = (1, 2)
    k: int = 0

    @property
    def is_identity(self) -> bool:
        return not any(self.flips) and self.k % 4 == 0

    def apply(self, a: np.ndarray) -> np.ndarray:
        for ax, f in enumerate(self.flips):
            if f:
                a = np.flip(a, axis=ax)
        if self.k % 4:
            a = np.rot90(a, self.k, axes=self.plane)
        return np.ascontiguousarray(a)


def draw_transform(rng: np.random.Generator) -> Transform:
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    plane = ROT_PLANES[int(rng.integers(3))]
    return Transform(flips, plane, int(rng.integers(4)))


def augment(v: np.ndarray, m: np.ndarray | None = None, seed=0):
    """Random flips and a random quarter-turn; ``seed`` may be an int or a Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tf = draw_transform(rng)
    return tf.apply(v), (None if m is None else tf.apply(m))


# ---------------------------------------------------------------------------
# batch sampling


@dataclass(frozen=True)
class BatchSpec:
    labelled_per_batch: int = 2
    unlabelled_per_batch: int = 2
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.labelled_per_batch < 1 or self.unlabelled_per_batch < 1:
            raise ValueError("labelled_per_batch and unlabelled_per_batch must both be >= 1")


_LAB, _UNL, _AUG = 0, 1, 2


class BatchSampler:
    """Epoch-reshuffled mixed batches; the batch at step ``t`` depends only on (seed, t)."""

    def __init__(self, split: DatasetSplit, spec: BatchSpec):
        if split.num_labelled == 0:
            raise ValueError("batch sampling needs at least one labelled volume")
        self.split = split
        self.spec = spec
        self._perms: dict = {}
        self._warned = False

    def _perm(self, kind: int, epoch: int, n: int) -> np.ndarray:
        key = (kind, epoch)
        if key not in self._perms:
            if len(self._perms) > 64:
                self._perms.clear()
            rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, kind, epoch]))
            self._perms[key] = rng.permutation(n)
        return self._perms[key]

    def indices(self, t: int, kind: int, per_batch: int, n: int) -> list:
        out = []
        for j in range(per_batch):
            pos = t * per_batch + j
            out.append(int(self._perm(kind, pos // n, n)[pos % n]))
        return out

    def batch(self, t: int):
        spec, sp = self.spec, self.split
        lab = self.indices(t, _LAB, spec.labelled_per_batch, sp.num_labelled)
        unl = []
        if sp.num_unlabelled:
            unl = self.indices(t, _UNL, spec.unlabelled_per_batch, sp.num_unlabelled)
        elif not self._warned:
            warnings.warn("no unlabelled volumes: sampling labelled-only batches", stacklevel=2)
            self._warned = True
        xs, ys = [], []
        for slot, i in enumerate(lab):
            v, m = sp.labelled[i]
            if spec.augment:
                v, m = augment(v, m, self._aug_rng(t, slot))
            xs.append(zscore(v))
            ys.append(np.asarray(m, dtype=np.float32))
        for slot, i in enumerate(unl, start=len(lab)):
            v = sp.unlabelled[i]
            if spec.augment:
                v, _ = augment(v, None, self._aug_rng(t, slot))
            xs.append(zscore(v))
        x = np.stack(xs)[:, None]
        y = np.stack(ys)
        return x, y, frozenset(range(len(lab)))

    def _aug_rng(self, t: int, slot: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.spec.seed, _AUG, t, slot]))


def next_batch(split: DatasetSplit, spec: BatchSpec, t: int):
    """``(x[B,1,D,H,W], y[L,D,H,W], labelled slot set)``; labelled slots come first."""
    return BatchSampler(split, spec).batch(t)


# ---------------------------------------------------------------------------
# DVOL volume files

MAGIC = b"DVOL"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
MAX_VOXELS = 1 << 31


class VolumeIOError(Exception):
    pass


class MagicMismatch(VolumeIOError):
    pass


class TruncatedPayload(VolumeIOError):
    pass


class DimOverflow(VolumeIOError):
    pass


class UnsupportedFormat(VolumeIOError):
    pass


class ManifestError(VolumeIOError):
    pass


def encode_volume(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.ndim != 3:
        raise ValueError(f"volumes are 3-D, got shape {a.shape}")
    if a.dtype == np.uint8 or a.dtype == bool:
        code, payload = 1, a.astype(np.uint8)
    else:
        code, payload = 0, a.astype("<f4")
    return _HEADER.pack(MAGIC, VERSION, code, *a.shape) + np.ascontiguousarray(payload).tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise MagicMismatch(f"bad magic {bytes(buf[:4])!r}")
        raise TruncatedPayload(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    magic, version, code, d, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedFormat(f"unsupported DVOL version {version}")
    if code not in _DTYPES:
        raise UnsupportedFormat(f"unknown dtype code {code}")
    count = d * h * w
    if count > MAX_VOXELS:
        raise DimOverflow(f"dims {d}x{h}x{w} exceed the {MAX_VOXELS}-voxel limit")
    dt = _DTYPES[code]
    need = count * dt.itemsize
    have = len(buf) - _HEADER.size
    if have != need:
        raise TruncatedPayload(f"header {d}x{h}x{w} needs {need} payload bytes, file has {have}")
    out = np.frombuffer(buf, dtype=dt, count=count, offset=_HEADER.size).reshape(d, h, w)
    return out.astype(np.float32 if code == 0 else np.uint8)


def write_volume(path, a: np.ndarray):
    Path(path).write_bytes(encode_volume(a))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def mask_path(volume_path) -> Path:
    p = Path(volume_path)
    return p.with_name(p.stem + "_mask" + p.suffix)


def write_manifest(path, entries: Sequence[tuple]):
    with open(path, "w", newline="\n") as fh:
        for rel, labelled in entries:
            fh.write(f"{rel}\t{'labelled' if labelled else 'unlabelled'}\n")


def read_manifest(path) -> list:
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[1] not in ("labelled", "unlabelled"):
                raise ManifestError(f"{path}:{lineno}: expected 'path<TAB>labelled|unlabelled', got {line!r}")
            entries.append((parts[0], parts[1] == "labelled"))
    return entries


MANIFEST_NAME = "manifest.tsv"


def write_dataset(out_dir, data: Sequence[tuple], prefix: str = "case") -> Path:
    """Write volumes, masks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (v, m) in enumerate(data):
        name = f"{prefix}_{i:03d}.dvol"
        write_volume(out / name, v)
        if m is not None:
            write_volume(mask_path(out / name), np.asarray(m, dtype=np.uint8))
        entries.append((name, m is not None))
    manifest = out / MANIFEST_NAME
    write_manifest(manifest, entries)
    return manifest


def load_dataset(data_dir) -> tuple[list, list]:
    """(pairs, ids) from a manifest directory; unlabelled entries carry ``None`` masks."""
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    pairs, ids = [], []
    for rel, labelled in read_manifest(manifest):
        vp = root / rel
        v = read_volume(vp)
        m = read_volume(mask_path(vp)) if labelled else None
        if m is not None and m.shape != v.shape:
            raise VolumeIOError(f"{rel}: mask shape {m.shape} differs from volume {v.shape}")
        pairs.append((v, m))
        ids.append(os.path.splitext(rel)[0])
    return pairs, ids
