"""Seeded synthetic multimodal phantoms for hermetic registration tests.

A phantom is a sum of randomly placed smooth blobs, smoothed and noised,
normalized to [0,1].  A second modality is derived either by a seeded
monotone intensity remap (an analog of a second MR weighting) or by the
gradient magnitude (an analog of an edge-dominant modality).  Misaligned
pairs resample the derived modality so that the recorded ground truth is
the transform a registration should recover.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchreg.errors import PhantomGenerationError
from patchreg.sampling import DEFAULT_ANATOMY_TAU, rng_stream
from patchreg.transform import (
    MisalignSpec,
    RigidParams,
    draw_misalignment,
    invert,
    resample_moving,
)
from patchreg.volume import (
    Volume,
    gaussian_smooth,
    gradient_magnitude,
    normalize_intensity,
    read_volume,
    write_volume,
)

MODALITY_KINDS = ("remap", "gm")


@dataclass(frozen=True)
class PhantomSpec:
    """Blob phantom parameters.

    blob_count and blob_radius default (when None) to values scaled for the
    grid extent, targeting 25-45% anatomy occupancy.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blob_count: int | None = None
    blob_radius: tuple[float, float] | None = None
    smooth_sigma_mm: float = 2.0
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 32:
            raise ValueError(f"dims must be >= 32 per axis, got {self.dims}")
        if not (0 <= self.noise <= 0.2):
            raise ValueError(f"noise amplitude must be in [0, 0.2], got {self.noise}")
        if self.blob_count is not None and self.blob_count < 1:
            raise ValueError("blob_count must be >= 1")

    def effective_blobs(self) -> tuple[int, tuple[float, float]]:
        extent = [(n - 1) * s for n, s in zip(self.dims, self.spacing)]
        count = self.blob_count
        if count is None:
            count = max(5, int(round(np.prod(extent) / 8300.0)))
        radius = self.blob_radius
        if radius is None:
            hi = min(extent) / 5.7
            radius = (0.4 * hi, hi)
        return count, radius


def _render_blobs(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    dims = np.asarray(spec.dims)
    spacing = np.asarray(spec.spacing)
    extent = (dims - 1) * spacing
    blob_count, blob_radius = spec.effective_blobs()
    arr = np.zeros(spec.dims, dtype=np.float64)
    coords = [np.arange(n) * s for n, s in zip(spec.dims, spec.spacing)]
    for _ in range(blob_count):
        c = rng.uniform(0.12, 0.88, size=3) * extent
        radius = rng.uniform(*blob_radius)
        amp = rng.uniform(0.4, 1.0)
        # Evaluate each blob only on its local bounding box.
        lo = np.maximum(((c - 3 * radius) / spacing).astype(int), 0)
        hi = np.minimum(((c + 3 * radius) / spacing).astype(int) + 2, dims)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        dx = coords[0][sl[0]] - c[0]
        dy = coords[1][sl[1]] - c[1]
        dz = coords[2][sl[2]] - c[2]
        d2 = (dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
        arr[sl] += amp * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
    return arr


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Seeded blob phantom normalized to [0,1].

    Regenerates (with derived sub-seeds) until the fraction of voxels above
    the anatomy threshold lands in [0.10, 0.60]; gives up after 100 tries.
    """
    for attempt in range(100):
        rng = rng_stream(spec.seed, 0xA, attempt)
        arr = _render_blobs(spec, rng)
        vol = Volume(arr.astype(np.float32), spec.spacing, (0.0, 0.0, 0.0))
        sigma_vox = spec.smooth_sigma_mm / min(spec.spacing)
        if sigma_vox > 0:
            vol = gaussian_smooth(vol, sigma_vox)
        noised = vol.voxels.astype(np.float64)
        if spec.noise > 0:
            noised = noised + rng.uniform(0.0, spec.noise, size=vol.dims)
        vol = normalize_intensity(Volume(noised.astype(np.float32), spec.spacing))
        occupancy = float(np.mean(vol.voxels > DEFAULT_ANATOMY_TAU))
        if 0.10 <= occupancy <= 0.60:
            return vol
    raise PhantomGenerationError(
        f"could not reach 10-60% anatomy occupancy for seed {spec.seed}"
    )


def monotone_remap(values: np.ndarray, rng: np.random.Generator,
                   n_knots: int = 8) -> np.ndarray:
    """Strictly increasing piecewise-linear intensity map on [0,1]."""
    xs = np.linspace(0.0, 1.0, n_knots)
    steps = rng.uniform(0.2, 1.0, size=n_knots - 1)
    ys = np.concatenate([[0.0], np.cumsum(steps)])
    ys /= ys[-1]
    return np.interp(values, xs, ys)


def derive_modality(vol: Volume, kind: str, seed: int = 0) -> Volume:
    """Second modality derived from a normalized volume.

    "gm" is the normalized gradient magnitude; "remap" applies a seeded
    monotone piecewise-linear intensity map plus mild noise, renormalized.
    """
    if kind not in MODALITY_KINDS:
        raise ValueError(f"kind must be one of {MODALITY_KINDS}, got {kind!r}")
    if kind == "gm":
        return normalize_intensity(gradient_magnitude(vol))
    rng = rng_stream(seed, 0xB)
    remapped = monotone_remap(vol.voxels.astype(np.float64), rng)
    remapped = remapped + rng.uniform(0.0, 0.05, size=vol.dims)
    return normalize_intensity(Volume(remapped.astype(np.float32), vol.spacing, vol.origin))


@dataclass
class MisalignedPair:
    pair_id: int
    fixed: Volume
    moving: Volume
    theta_true: RigidParams


def make_misaligned_set(n_pairs: int, phantom_spec: PhantomSpec, kind: str,
                        misalign: MisalignSpec) -> list[MisalignedPair]:
    """Generate misaligned multimodal pairs with known ground truth.

    The moving image is the derived modality resampled under the inverse
    of the drawn transform, so registering moving onto fixed should
    recover exactly theta_true.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    pairs = []
    for i in range(n_pairs):
        spec_i = PhantomSpec(
            dims=phantom_spec.dims, spacing=phantom_spec.spacing,
            blob_count=phantom_spec.blob_count, blob_radius=phantom_spec.blob_radius,
            smooth_sigma_mm=phantom_spec.smooth_sigma_mm, noise=phantom_spec.noise,
            seed=phantom_spec.seed + 7919 * i,
        )
        fixed = generate_phantom(spec_i)
        modality = derive_modality(fixed, kind, seed=spec_i.seed + 1)
        rng = rng_stream(misalign.seed, 0xC, i)
        theta_true = draw_misalignment(misalign, rng, center=tuple(fixed.center()))
        moving = resample_moving(modality, invert(theta_true), modality)
        pairs.append(MisalignedPair(i, fixed, moving, theta_true))
    return pairs


def write_pair_set(out_dir, pairs: list[MisalignedPair]) -> Path:
    """Write V3D1 volumes plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in pairs:
        fixed_path = out_dir / f"pair_{p.pair_id:04d}_fixed.v3d"
        moving_path = out_dir / f"pair_{p.pair_id:04d}_moving.v3d"
        write_volume(fixed_path, p.fixed)
        write_volume(moving_path, p.moving)
        rows.append((p.pair_id, fixed_path.name, moving_path.name,
                     p.theta_true.serialize()))
    manifest = out_dir / "manifest.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair_id", "fixed_path", "moving_path", "theta_true"])
    writer.writerows(rows)
    manifest.write_text(buf.getvalue())
    return manifest


def read_pair_set(manifest_path) -> list[MisalignedPair]:
    """Load a pair set written by write_pair_set."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    pairs = []
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            pairs.append(MisalignedPair(
                pair_id=int(row["pair_id"]),
                fixed=read_volume(base / row["fixed_path"]),
                moving=read_volume(base / row["moving_path"]),
                theta_true=RigidParams.deserialize(row["theta_true"]),
            ))
    return pairs
