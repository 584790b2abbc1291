"""Labeled patch-pair datasets from roughly aligned volume pairs.

Positive pairs crop a patch from the fixed image and the corresponding
(per the current alignment estimate) location in the moving image, with an
optional Gaussian dither of the moving sampling center.  Negative pairs
displace the moving center by at least a minimum offset.  Every emitted
pair can be augmented by one of the 48 cube symmetries applied identically
to both patches, which cancels directional bias in the training data.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from patchreg.errors import (
    BadMagicError,
    NoAnatomyError,
    OutOfBoundsError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from patchreg.transform import RigidParams, apply_point
from patchreg.volume import Volume, sample_points

PPD_MAGIC = b"PPD1"

DEFAULT_ANATOMY_TAU = 0.05
_MAX_REJECTIONS = 1000


@dataclass
class PatchPair:
    """Two cubic patches and a correspondence label (1 = registered)."""

    u_patch: np.ndarray
    v_patch: np.ndarray
    z: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_patch = np.asarray(self.u_patch, dtype=np.float32)
        self.v_patch = np.asarray(self.v_patch, dtype=np.float32)
        if self.u_patch.shape != self.v_patch.shape:
            raise ValueError("patches must share a shape")
        if self.z not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.z}")


@dataclass(frozen=True)
class DitherSpec:
    """Gaussian dither of the moving sampling center.

    sigma2 is the per-axis variance in mm^2; m is how many dithered pairs
    each base center spawns.
    """

    sigma2: float = 0.0
    m: int = 1

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")


@dataclass(frozen=True)
class SamplerConfig:
    """Patch sampling policy.

    min_negative_offset defaults (when None) to patch_size * max(spacing),
    one full patch extent, which keeps negative pairs essentially
    non-overlapping with their positive counterpart.
    """

    patch_size: int = 17
    anatomy_threshold: float = DEFAULT_ANATOMY_TAU
    min_negative_offset: float | None = None
    pairs_per_volume: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if not (0 <= self.anatomy_threshold < 1):
            raise ValueError(f"anatomy_threshold must be in [0,1), got {self.anatomy_threshold}")
        if self.min_negative_offset is not None and self.min_negative_offset <= 0:
            raise ValueError("min_negative_offset must be positive")

    def negative_offset(self, vol: Volume) -> float:
        if self.min_negative_offset is not None:
            return self.min_negative_offset
        return self.patch_size * max(vol.spacing)


def _lattice_offsets(P: int, spacing) -> np.ndarray:
    """(P^3, 3) physical offsets of an axis-aligned cubic lattice."""
    key = (P, tuple(spacing))
    cached = _lattice_cache.get(key)
    if cached is None:
        half = (P - 1) / 2.0
        ax = [(np.arange(P) - half) * s for s in spacing]
        gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
        cached = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
        cached.setflags(write=False)
        _lattice_cache[key] = cached
    return cached


_lattice_cache: dict = {}


def _lattice_fits(vol: Volume, center, P: int) -> bool:
    c = np.asarray(center, dtype=float)
    half = (P - 1) / 2.0 * np.asarray(vol.spacing)
    lo = np.asarray(vol.origin) - 1e-9
    hi = np.asarray(vol.origin) + (np.asarray(vol.dims) - 1) * np.asarray(vol.spacing) + 1e-9
    return bool(np.all(c - half >= lo) and np.all(c + half <= hi))


def extract_patch(vol: Volume, center, P: int) -> np.ndarray:
    """Cubic patch of trilinear samples on an axis-aligned lattice.

    The lattice spacing matches the volume spacing and must lie fully
    inside the voxel-center bounding box.
    """
    if P < 1:
        raise ValueError(f"patch size must be >= 1, got {P}")
    if not _lattice_fits(vol, center, P):
        raise OutOfBoundsError(f"patch lattice (P={P}) at {tuple(center)} exits the volume")
    pts = np.asarray(center, dtype=float) + _lattice_offsets(P, vol.spacing)
    vals, _ = sample_points(vol, pts)
    return vals.reshape(P, P, P).astype(np.float32)


@dataclass(frozen=True)
class CubeSymmetry:
    """One of the 48 signed axis permutations of a cube."""

    perm: tuple[int, int, int]
    flips: tuple[bool, bool, bool]

    def apply(self, patch: np.ndarray) -> np.ndarray:
        if patch.ndim != 3 or len(set(patch.shape)) != 1:
            raise ValueError(f"cube symmetry needs a cubic patch, got shape {patch.shape}")
        out = np.transpose(patch, self.perm)
        axes = [i for i, f in enumerate(self.flips) if f]
        if axes:
            out = np.flip(out, axis=axes)
        return np.ascontiguousarray(out)


CUBE_SYMMETRIES: tuple[CubeSymmetry, ...] = tuple(
    CubeSymmetry(perm, flips)
    for perm in itertools.permutations((0, 1, 2))
    for flips in itertools.product((False, True), repeat=3)
)

IDENTITY_SYMMETRY = CUBE_SYMMETRIES[0]


def symmetrize_pair(pair: PatchPair, g: CubeSymmetry) -> PatchPair:
    """Apply the same cube symmetry to both patches; the label is unchanged."""
    meta = dict(pair.meta)
    meta["symmetry"] = (g.perm, g.flips)
    return PatchPair(g.apply(pair.u_patch), g.apply(pair.v_patch), pair.z, meta)


def _draw_center(vol: Volume, P: int, rng: np.random.Generator,
                 margin: float = 0.0) -> np.ndarray:
    """Uniform candidate center in the region where a P-lattice fits,
    optionally shrunk by an extra physical margin per side."""
    half = (P - 1) / 2.0 * np.asarray(vol.spacing) + margin
    lo = np.asarray(vol.origin) + half
    hi = np.asarray(vol.origin) + (np.asarray(vol.dims) - 1) * np.asarray(vol.spacing) - half
    if np.any(hi < lo):
        raise OutOfBoundsError(f"volume {vol.dims} too small for patch size {P}")
    return lo + rng.random(3) * (hi - lo)


def _anatomy_center(fixed: Volume, cfg: SamplerConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sample a fixed-image center whose patch covers anatomy."""
    for _ in range(_MAX_REJECTIONS):
        c = _draw_center(fixed, cfg.patch_size, rng)
        patch = extract_patch(fixed, c, cfg.patch_size)
        if float(patch.mean()) > cfg.anatomy_threshold:
            return c, patch
    raise NoAnatomyError(
        f"no anatomy center found after {_MAX_REJECTIONS} rejections "
        f"(threshold {cfg.anatomy_threshold})"
    )


def _dither(sigma2: float, rng: np.random.Generator) -> np.ndarray:
    if sigma2 == 0:
        return np.zeros(3)
    return rng.normal(0.0, np.sqrt(sigma2), size=3)


def _negative_displacement(sigma2: float, rho: float,
                           rng: np.random.Generator) -> np.ndarray:
    """Dither plus a uniform-direction offset, redrawn until its total
    length is at least rho."""
    for _ in range(_MAX_REJECTIONS):
        d = _dither(sigma2, rng)
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm == 0:
            continue
        off = direction / norm * rng.uniform(rho, 2.0 * rho)
        w = d + off
        if np.linalg.norm(w) >= rho:
            return w
    raise NoAnatomyError("could not draw a negative offset of sufficient length")


def make_pair(fixed: Volume, moving: Volume, align: RigidParams,
              cfg: SamplerConfig, dither: DitherSpec, label: int,
              rng: np.random.Generator) -> PatchPair:
    """Draw one labeled patch pair.

    Positive pairs sample the moving image at the aligned fixed center plus
    a Gaussian dither; negative pairs add a uniform-direction offset whose
    combined displacement is at least the minimum negative offset.  The
    fixed patch (and, for negatives, the moving patch) must cover anatomy.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    rho = cfg.negative_offset(fixed)
    for _ in range(_MAX_REJECTIONS):
        c, u_patch = _anatomy_center(fixed, cfg, rng)
        mapped = apply_point(align, c)
        if label == 1:
            m_center = mapped + _dither(dither.sigma2, rng)
        else:
            m_center = mapped + _negative_displacement(dither.sigma2, rho, rng)
        if not _lattice_fits(moving, m_center, cfg.patch_size):
            continue
        v_patch = extract_patch(moving, m_center, cfg.patch_size)
        if label == 0 and float(v_patch.mean()) <= cfg.anatomy_threshold:
            continue
        meta = {"fixed_center": tuple(c), "moving_center": tuple(m_center)}
        return PatchPair(u_patch, v_patch, label, meta)
    raise NoAnatomyError(f"no acceptable z={label} pair after {_MAX_REJECTIONS} attempts")


class PatchDataset:
    """Array-backed collection of labeled patch pairs."""

    def __init__(self, u: np.ndarray, v: np.ndarray, z: np.ndarray, meta=None):
        self.u = np.asarray(u, dtype=np.float32)
        self.v = np.asarray(v, dtype=np.float32)
        self.z = np.asarray(z, dtype=np.uint8)
        if not (len(self.u) == len(self.v) == len(self.z)):
            raise ValueError("u, v, z must have equal length")
        self.meta = list(meta) if meta is not None else [{} for _ in range(len(self.z))]

    @property
    def patch_size(self) -> int:
        return self.u.shape[1] if len(self.u) else 0

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i: int) -> PatchPair:
        return PatchPair(self.u[i], self.v[i], int(self.z[i]), self.meta[i])

    @staticmethod
    def from_pairs(pairs: list[PatchPair]) -> "PatchDataset":
        if not pairs:
            raise ValueError("empty pair list")
        u = np.stack([p.u_patch for p in pairs])
        v = np.stack([p.v_patch for p in pairs])
        z = np.array([p.z for p in pairs], dtype=np.uint8)
        return PatchDataset(u, v, z, [p.meta for p in pairs])

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset(self.u[idx], self.v[idx], self.z[idx],
                            [self.meta[i] for i in idx])

    def split(self, val_fraction: float, seed: int) -> tuple["PatchDataset", "PatchDataset"]:
        """Shuffled (train, val) split."""
        n = len(self)
        order = np.random.default_rng(seed).permutation(n)
        n_val = max(1, int(round(val_fraction * n)))
        return self.subset(order[n_val:]), self.subset(order[:n_val])


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def build_dataset(volume_pairs, cfg: SamplerConfig, dither: DitherSpec,
                  symmetrize: bool = True, seed: int | None = None) -> PatchDataset:
    """Build a balanced, shuffled patch-pair dataset.

    volume_pairs is a sequence of (fixed, moving, align) triples; each
    contributes cfg.pairs_per_volume pairs, half of each label.  Each base
    center spawns dither.m dithered pairs.  Every pair is optionally
    augmented with an independently uniform cube symmetry.  Output is
    deterministic given the seed (default cfg.seed).
    """
    if not volume_pairs:
        raise ValueError("need at least one volume pair")
    if seed is None:
        seed = cfg.seed
    pairs: list[PatchPair] = []
    for vol_idx, (fixed, moving, align) in enumerate(volume_pairs):
        rng = rng_stream(seed, vol_idx)
        n_pos = cfg.pairs_per_volume // 2
        n_neg = cfg.pairs_per_volume - n_pos
        for label, want in ((1, n_pos), (0, n_neg)):
            made = 0
            while made < want:
                burst = min(dither.m, want - made)
                base = None
                for _ in range(burst):
                    if base is None:
                        pair = make_pair(fixed, moving, align, cfg, dither, label, rng)
                        base = pair.meta["fixed_center"]
                    else:
                        pair = _repeat_pair(fixed, moving, align, cfg, dither,
                                            label, np.asarray(base), rng)
                        if pair is None:
                            break
                    pair.meta["volume"] = vol_idx
                    if symmetrize:
                        g = CUBE_SYMMETRIES[int(rng.integers(len(CUBE_SYMMETRIES)))]
                        pair = symmetrize_pair(pair, g)
                    pairs.append(pair)
                    made += 1
    order = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xD5,))) \
        .permutation(len(pairs))
    return PatchDataset.from_pairs([pairs[i] for i in order])


def _repeat_pair(fixed, moving, align, cfg, dither, label, c, rng):
    """Another dithered draw at a known-good fixed center; None if the
    moving lattice cannot be placed."""
    u_patch = extract_patch(fixed, c, cfg.patch_size)
    mapped = apply_point(align, c)
    rho = cfg.negative_offset(fixed)
    for _ in range(_MAX_REJECTIONS):
        if label == 1:
            m_center = mapped + _dither(dither.sigma2, rng)
        else:
            m_center = mapped + _negative_displacement(dither.sigma2, rho, rng)
        if not _lattice_fits(moving, m_center, cfg.patch_size):
            return None
        v_patch = extract_patch(moving, m_center, cfg.patch_size)
        if label == 0 and float(v_patch.mean()) <= cfg.anatomy_threshold:
            continue
        meta = {"fixed_center": tuple(c), "moving_center": tuple(m_center)}
        return PatchPair(u_patch, v_patch, label, meta)
    return None


_PPD_HEADER = struct.Struct("<IQ")


def write_dataset(path, ds: PatchDataset) -> None:
    """Write a dataset in the PPD1 record-stream format."""
    path = Path(path)
    P = ds.patch_size
    with open(path, "wb") as fh:
        fh.write(PPD_MAGIC)
        fh.write(_PPD_HEADER.pack(P, len(ds)))
        for i in range(len(ds)):
            fh.write(np.asarray(ds.u[i], dtype="<f4").tobytes())
            fh.write(np.asarray(ds.v[i], dtype="<f4").tobytes())
            fh.write(struct.pack("<B", int(ds.z[i])))


def read_dataset(path) -> PatchDataset:
    """Read a PPD1 dataset."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic header")
    magic = data[:4]
    if magic != PPD_MAGIC:
        if magic[:3] == PPD_MAGIC[:3]:
            raise UnsupportedVersionError(f"{path}: unsupported dataset version {magic!r}")
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if len(data) < 4 + _PPD_HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    P, count = _PPD_HEADER.unpack_from(data, 4)
    rec = 2 * P * P * P * 4 + 1
    expect = 4 + _PPD_HEADER.size + rec * count
    if len(data) < expect:
        raise TruncatedFileError(f"{path}: expected {expect} bytes, got {len(data)}")
    u = np.empty((count, P, P, P), dtype=np.float32)
    v = np.empty((count, P, P, P), dtype=np.float32)
    z = np.empty(count, dtype=np.uint8)
    off = 4 + _PPD_HEADER.size
    n = P * P * P
    for i in range(count):
        u[i] = np.frombuffer(data, "<f4", n, off).reshape(P, P, P)
        off += 4 * n
        v[i] = np.frombuffer(data, "<f4", n, off).reshape(P, P, P)
        off += 4 * n
        z[i] = data[off]
        off += 1
    return PatchDataset(u, v, z)
