"""3D scalar volumes with physical coordinates.

A volume couples a voxel grid with its physical geometry (spacing in mm
per voxel and the position of voxel (0,0,0) in mm).  Voxel (i,j,k) sits at
``origin + (i*sx, j*sy, k*sz)``.  All operations here are pure functions:
they never mutate their input and a :class:`Volume` is safe to share
across threads once built.

Voxel data is stored float32, C-contiguous, shape ``(nx, ny, nz)``.  The
on-disk layout (format ``V3D1``) is x-fastest, matching ``ravel(order="F")``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchreg.errors import (
    BadMagicError,
    TruncatedFileError,
    UnsupportedVersionError,
)

V3D_MAGIC = b"V3D1"

# Continuous voxel indices this close to an integer are snapped onto it so
# that sampling exactly at grid points reproduces stored values bit-for-bit.
_SNAP_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Volume:
    """An immutable 3D scalar grid with physical spacing and origin."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {spacing}")
        if len(origin) != 3:
            raise ValueError(f"origin must have 3 components, got {origin}")
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def center(self) -> np.ndarray:
        """Physical center of the grid (midpoint of the voxel-center box)."""
        d = np.asarray(self.dims, dtype=float)
        return np.asarray(self.origin) + (d - 1.0) / 2.0 * np.asarray(self.spacing)

    def voxel_positions(self) -> np.ndarray:
        """Physical coordinates of every voxel center, shape (nx*ny*nz, 3)."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)


def sample_points(vol: Volume, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation of `vol` at physical points `pts` (N,3).

    Returns (values, inside) where values are float64 with 0.0 outside the
    voxel-center bounding box and inside is the in-bounds mask.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"pts must have shape (N,3), got {pts.shape}")
    dims = np.asarray(vol.dims)
    u = (pts - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    r = np.rint(u)
    u = np.where(np.abs(u - r) <= _SNAP_TOL, r, u)
    inside = np.all((u >= 0.0) & (u <= dims - 1.0), axis=1)

    uc = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(uc).astype(np.int64), np.maximum(dims - 2, 0))
    i1 = np.minimum(i0 + 1, dims - 1)
    f = uc - i0

    nx, ny, nz = vol.dims
    flat = vol.voxels.reshape(-1)

    def corner(ia, ja, ka):
        return flat[(ia * ny + ja) * nz + ka].astype(np.float64)

    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    vals = (
        corner(i0[:, 0], i0[:, 1], i0[:, 2]) * gx * gy * gz
        + corner(i1[:, 0], i0[:, 1], i0[:, 2]) * fx * gy * gz
        + corner(i0[:, 0], i1[:, 1], i0[:, 2]) * gx * fy * gz
        + corner(i0[:, 0], i0[:, 1], i1[:, 2]) * gx * gy * fz
        + corner(i1[:, 0], i1[:, 1], i0[:, 2]) * fx * fy * gz
        + corner(i1[:, 0], i0[:, 1], i1[:, 2]) * fx * gy * fz
        + corner(i0[:, 0], i1[:, 1], i1[:, 2]) * gx * fy * fz
        + corner(i1[:, 0], i1[:, 1], i1[:, 2]) * fx * fy * fz
    )
    vals[~inside] = 0.0
    return vals, inside


def trilinear_sample(vol: Volume, p) -> float:
    """Trilinear sample at one physical point; 0.0 outside the grid."""
    vals, _ = sample_points(vol, np.asarray(p, dtype=float).reshape(1, 3))
    return float(vals[0])


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ceil(3*sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.array([1.0])
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_smooth(vol: Volume, sigma_vox: float) -> Volume:
    """Separable Gaussian smoothing; edges handled by clamping (replication)."""
    if sigma_vox < 0:
        raise ValueError(f"sigma_vox must be >= 0, got {sigma_vox}")
    if sigma_vox == 0:
        return Volume(vol.voxels.copy(), vol.spacing, vol.origin)
    kernel = gaussian_kernel_1d(sigma_vox)
    radius = len(kernel) // 2
    arr = vol.voxels.astype(np.float64)
    for axis in range(3):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(arr, pad, mode="edge")
        out = np.zeros_like(arr)
        n = arr.shape[axis]
        for tap, w in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[axis] = slice(tap, tap + n)
            out += w * padded[tuple(sl)]
        arr = out
    return Volume(arr.astype(np.float32), vol.spacing, vol.origin)


def downsample(vol: Volume, factor: int) -> Volume:
    """Anti-aliased decimation by an integer factor.

    Smooths with sigma = factor/2 voxels, then keeps every factor-th voxel
    starting at index 0, so output dims are ceil(n/factor) and spacing is
    multiplied by factor.  factor 1 is an identity copy.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Volume(vol.voxels.copy(), vol.spacing, vol.origin)
    smoothed = gaussian_smooth(vol, factor / 2.0)
    dec = smoothed.voxels[::factor, ::factor, ::factor]
    spacing = tuple(s * factor for s in vol.spacing)
    return Volume(np.ascontiguousarray(dec), spacing, vol.origin)


def normalize_intensity(vol: Volume) -> Volume:
    """Affine rescale of intensities onto [0,1]; a constant volume maps to 0."""
    arr = vol.voxels.astype(np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        out = np.zeros_like(arr)
    else:
        out = (arr - lo) / (hi - lo)
    return Volume(out.astype(np.float32), vol.spacing, vol.origin)


def gradient_magnitude(vol: Volume) -> Volume:
    """Per-voxel gradient magnitude in physical units (1/mm).

    Central differences in the interior, one-sided at the faces; requires at
    least 3 voxels per axis.
    """
    if min(vol.dims) < 3:
        raise ValueError(f"gradient_magnitude needs dims >= 3 per axis, got {vol.dims}")
    arr = vol.voxels.astype(np.float64)
    gx, gy, gz = np.gradient(arr, *vol.spacing)
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return Volume(mag.astype(np.float32), vol.spacing, vol.origin)


_HEADER = struct.Struct("<3I6d")


def write_volume(path, vol: Volume) -> None:
    """Write a volume in the V3D1 binary format."""
    path = Path(path)
    nx, ny, nz = vol.dims
    header = V3D_MAGIC + _HEADER.pack(nx, ny, nz, *vol.spacing, *vol.origin)
    payload = np.asarray(vol.voxels, dtype="<f4").ravel(order="F").tobytes()
    path.write_bytes(header + payload)


def read_volume(path) -> Volume:
    """Read a V3D1 volume; raises distinct errors for bad magic, unsupported
    version and truncation."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic header")
    magic = data[:4]
    if magic != V3D_MAGIC:
        if magic[:3] == V3D_MAGIC[:3]:
            raise UnsupportedVersionError(f"{path}: unsupported volume format version {magic!r}")
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if len(data) < 4 + _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack_from(data, 4)
    expect = 4 + _HEADER.size + 4 * nx * ny * nz
    if len(data) < expect:
        raise TruncatedFileError(f"{path}: expected {expect} bytes, got {len(data)}")
    raw = np.frombuffer(data, dtype="<f4", count=nx * ny * nz, offset=4 + _HEADER.size)
    voxels = raw.reshape((nx, ny, nz), order="F")
    return Volume(voxels, (sx, sy, sz), (ox, oy, oz))
