"""Rigid 3D transforms: parameterization, point mapping, resampling.

A transform maps points of the reference (fixed-image) frame to sampling
locations in the moving image: ``x -> R(x - center) + center + t`` with
``R = Rz(rz) @ Ry(ry) @ Rx(rx)``.  Registration therefore estimates the
parameters that make ``moving(T(x))`` agree with ``fixed(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchreg.volume import Volume, sample_points

PARAMS_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class RigidParams:
    """Six rigid parameters plus the rotation center (all in mm / rad)."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("t", "r", "center"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ValueError(f"{name} must have 3 components")
            object.__setattr__(self, name, v)

    def as_vector(self) -> np.ndarray:
        """(tx, ty, tz, rx, ry, rz) as a float array."""
        return np.asarray(self.t + self.r, dtype=float)

    @staticmethod
    def from_vector(vec, center=(0.0, 0.0, 0.0)) -> "RigidParams":
        vec = np.asarray(vec, dtype=float)
        return RigidParams(tuple(vec[:3]), tuple(vec[3:6]), tuple(center))

    @staticmethod
    def identity(center=(0.0, 0.0, 0.0)) -> "RigidParams":
        return RigidParams(center=tuple(float(c) for c in center))

    def serialize(self) -> str:
        """Ten whitespace-separated numbers: t, r, center, format version."""
        nums = list(self.t) + list(self.r) + list(self.center)
        return " ".join(format(x, ".17g") for x in nums) + f" {PARAMS_FORMAT_VERSION}"

    @staticmethod
    def deserialize(text: str) -> "RigidParams":
        parts = text.split()
        if len(parts) != 10:
            raise ValueError(f"expected 10 fields, got {len(parts)}")
        version = int(float(parts[9]))
        if version != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported rigid-params version {version}")
        nums = [float(p) for p in parts[:9]]
        return RigidParams(tuple(nums[0:3]), tuple(nums[3:6]), tuple(nums[6:9]))


@dataclass(frozen=True)
class MisalignSpec:
    """Uniform misalignment distribution: |t| per axis in [t_min, t_max] mm
    with random sign, rotations per axis in [-r_max, r_max] rad."""

    t_range: tuple[float, float] = (0.0, 0.0)
    r_range: float = 0.0
    seed: int = 0

    def __post_init__(self):
        a, b = self.t_range
        if not (0 <= a <= b):
            raise ValueError(f"t_range must satisfy 0 <= a <= b, got {self.t_range}")
        if self.r_range < 0:
            raise ValueError(f"r_range must be >= 0, got {self.r_range}")


def _rotation_matrix(r) -> np.ndarray:
    rx, ry, rz = r
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _euler_zyx_from_matrix(R: np.ndarray) -> tuple[float, float, float]:
    """Angles (rx, ry, rz) with R = Rz(rz) @ Ry(ry) @ Rx(rx)."""
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, float(sy)))
    ry = float(np.arcsin(sy))
    if abs(sy) < 1.0 - 1e-12:
        rx = float(np.arctan2(R[2, 1], R[2, 2]))
        rz = float(np.arctan2(R[1, 0], R[0, 0]))
    else:
        # Gimbal lock: only rx +/- rz is determined; put it all in rx.
        rx = float(np.arctan2(-R[0, 1] * np.sign(sy), R[1, 1]))
        rz = 0.0
    return rx, ry, rz


def rigid_matrix(theta: RigidParams) -> np.ndarray:
    """4x4 homogeneous matrix of x -> R(x - center) + center + t."""
    R = _rotation_matrix(theta.r)
    c = np.asarray(theta.center, dtype=float)
    t = np.asarray(theta.t, dtype=float)
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = c + t - R @ c
    return M


def apply_point(theta: RigidParams, p) -> np.ndarray:
    """Map one physical point through the transform."""
    p = np.asarray(p, dtype=float)
    M = rigid_matrix(theta)
    return M[:3, :3] @ p + M[:3, 3]


def apply_points(theta: RigidParams, pts: np.ndarray) -> np.ndarray:
    """Map (N,3) physical points through the transform."""
    M = rigid_matrix(theta)
    return np.asarray(pts, dtype=float) @ M[:3, :3].T + M[:3, 3]


def _params_from_matrix(M: np.ndarray, center) -> RigidParams:
    R = M[:3, :3]
    c = np.asarray(center, dtype=float)
    t = M[:3, 3] - c + R @ c
    return RigidParams(tuple(t), _euler_zyx_from_matrix(R), tuple(c))


def compose(outer: RigidParams, inner: RigidParams) -> RigidParams:
    """Parameters of outer(inner(x)); keeps the outer transform's center."""
    M = rigid_matrix(outer) @ rigid_matrix(inner)
    return _params_from_matrix(M, outer.center)


def invert(theta: RigidParams) -> RigidParams:
    """Parameters of the inverse map, with the same rotation center."""
    R = _rotation_matrix(theta.r)
    t = np.asarray(theta.t, dtype=float)
    Rt = R.T
    return RigidParams(tuple(-Rt @ t), _euler_zyx_from_matrix(Rt), theta.center)


def resample_moving(moving: Volume, theta: RigidParams, ref: Volume) -> Volume:
    """Resample the moving image onto ref's grid through the transform.

    The output voxel at physical location x holds moving(T(x)); sampling
    locations outside the moving grid yield background 0.
    """
    pts = ref.voxel_positions()
    vals, _ = sample_points(moving, apply_points(theta, pts))
    voxels = vals.reshape(ref.dims).astype(np.float32)
    return Volume(voxels, ref.spacing, ref.origin)


def draw_misalignment(spec: MisalignSpec, rng: np.random.Generator,
                      center=(0.0, 0.0, 0.0)) -> RigidParams:
    """Draw a random rigid misalignment.

    Translation magnitudes are uniform in [a, b] per axis with equiprobable
    sign; rotations are uniform in [-c, c] per axis.
    """
    a, b = spec.t_range
    mags = rng.uniform(a, b, size=3)
    signs = np.where(rng.random(3) < 0.5, -1.0, 1.0)
    t = mags * signs
    r = rng.uniform(-spec.r_range, spec.r_range, size=3) if spec.r_range > 0 else np.zeros(3)
    return RigidParams(tuple(t), tuple(r), tuple(float(c) for c in center))


@dataclass(frozen=True)
class ErrorRecord:
    """Differences (estimated - true): translations in mm, rotations in deg."""

    dt: tuple[float, float, float]
    norm_t: float
    dr_deg: tuple[float, float, float]


def transform_error(theta_true: RigidParams, theta_est: RigidParams) -> ErrorRecord:
    """Parameter-space error between two transforms sharing a center."""
    if not np.allclose(theta_true.center, theta_est.center, atol=1e-9):
        raise ValueError(
            f"rotation centers differ: {theta_true.center} vs {theta_est.center}"
        )
    dt = np.asarray(theta_est.t) - np.asarray(theta_true.t)
    dr = np.asarray(theta_est.r) - np.asarray(theta_true.r)
    return ErrorRecord(
        dt=tuple(float(x) for x in dt),
        norm_t=float(np.linalg.norm(dt)),
        dr_deg=tuple(float(np.degrees(x)) for x in dr),
    )
