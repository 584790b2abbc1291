"""Similarity scores between a volume pair under a candidate transform.

Two metrics are provided: the learned deep metric, which sums the
classifier's pre-softmax score over a frozen set of patch centers, and a
normalized-mutual-information baseline.  Patch centers are sampled once
per registration run and reused for every evaluation, so the objective a
derivative-free optimizer sees is deterministic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from patchreg.errors import NoAnatomyError
from patchreg.network import ModelParams, forward_batch
from patchreg.sampling import _draw_center, _lattice_offsets, extract_patch
from patchreg.transform import RigidParams, apply_point, apply_points
from patchreg.volume import Volume, sample_points

DEFAULT_N_PATCHES = 64
DEFAULT_NMI_BINS = 60

AXES = ("tx", "ty", "tz", "rx", "ry", "rz")


@dataclass
class MetricContext:
    """Frozen evaluation context for one registration run."""

    kind: str  # "deep" | "nmi" | "custom"
    model: ModelParams | None = None
    centers: np.ndarray | None = None
    patch_size: int = 17
    bins: int = DEFAULT_NMI_BINS
    fn: Callable | None = None
    fixed_patches: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("deep", "nmi", "custom"):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == "nmi" and self.bins < 2:
            raise ValueError(f"nmi needs at least 2 bins, got {self.bins}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom metric needs a callable")


def nmi_context(bins: int = DEFAULT_NMI_BINS) -> MetricContext:
    return MetricContext(kind="nmi", bins=bins)


def make_deep_context(fixed: Volume, model: ModelParams,
                      n_patches: int = DEFAULT_N_PATCHES,
                      patch_size: int = 17,
                      anatomy_threshold: float = 0.05,
                      rng: np.random.Generator | None = None,
                      seed: int = 0,
                      margin: float = 0.0,
                      moving: Volume | None = None,
                      theta0: RigidParams | None = None) -> MetricContext:
    """Sample and freeze anatomy-covering patch centers in the fixed image.

    The fixed patches are cached so repeated metric evaluations only
    resample the moving image.  A positive margin (mm) keeps centers away
    from the boundary by that much beyond the patch half-extent, which
    keeps response sweeps over +-margin fully in-bounds.  When the moving
    volume and a starting transform are given, centers are additionally
    screened so the moving window at the mapped center also covers
    anatomy; this keeps the frozen patch set clear of the background rind
    a misaligned moving image carries after resampling.
    """
    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    if rng is None:
        rng = np.random.default_rng(seed)
    offsets = _lattice_offsets(patch_size, fixed.spacing)
    centers = []
    patches = []
    misses = 0
    while len(centers) < n_patches:
        c = _draw_center(fixed, patch_size, rng, margin)
        patch = extract_patch(fixed, c, patch_size)
        ok = float(patch.mean()) > anatomy_threshold
        if ok and moving is not None and theta0 is not None:
            vals, _ = sample_points(moving, apply_point(theta0, c) + offsets)
            ok = float(vals.mean()) > anatomy_threshold
        if ok:
            centers.append(c)
            patches.append(patch)
            misses = 0
        else:
            misses += 1
            if misses > 1000:
                raise NoAnatomyError("could not place metric patch centers on anatomy")
    ctx = MetricContext(kind="deep", model=model, centers=np.asarray(centers),
                        patch_size=patch_size)
    ctx.fixed_patches = np.stack(patches)
    return ctx


def deep_metric(ctx: MetricContext, fixed: Volume, moving: Volume,
                theta: RigidParams) -> float:
    """Sum of per-patch pre-softmax scores over the frozen centers.

    The moving patch for a center p is sampled on an axis-aligned lattice
    centered at the mapped point T(p), mirroring how training pairs sample
    the moving image at a displaced center.  Rotations therefore act on
    the score through the coherent displacement of the patch centers,
    which keeps evaluation inside the training distribution.  Sampling
    locations outside the moving grid contribute background zeros, so the
    score stays defined everywhere.
    """
    if ctx.kind != "deep":
        raise ValueError("context is not a deep-metric context")
    P = ctx.patch_size
    n = len(ctx.centers)
    if ctx.fixed_patches is None:
        ctx.fixed_patches = np.stack(
            [extract_patch(fixed, c, P) for c in ctx.centers]
        )
    offsets = _lattice_offsets(P, fixed.spacing)
    mapped = apply_points(theta, ctx.centers)
    pts = (mapped[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    vals, _ = sample_points(moving, pts)
    v_patches = vals.reshape(n, P, P, P).astype(np.float32)
    x = np.stack([ctx.fixed_patches, v_patches], axis=1)
    # One patch per forward pass: identical-shape computations make each
    # per-patch score independent of which other centers share the context,
    # so additivity over center sets holds bit-exactly.
    total = 0.0
    for i in range(n):
        logits, _ = forward_batch(ctx.model, x[i:i + 1], train=False)
        total += float(logits[0, 1]) - float(logits[0, 0])
    return total


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0].astype(np.float64)
    p = p / p.sum()
    return float(-np.sum(p * np.log(p)))


def joint_histogram(a: np.ndarray, b: np.ndarray, bins: int) -> np.ndarray:
    """bins x bins joint count histogram of paired samples on [0,1]."""
    ia = np.minimum((np.asarray(a, dtype=np.float64) * bins).astype(np.int64), bins - 1)
    ib = np.minimum((np.asarray(b, dtype=np.float64) * bins).astype(np.int64), bins - 1)
    ia = np.clip(ia, 0, bins - 1)
    ib = np.clip(ib, 0, bins - 1)
    joint = np.bincount(ia * bins + ib, minlength=bins * bins)
    return joint.reshape(bins, bins).astype(np.float64)


def nmi(fixed: Volume, moving: Volume, theta: RigidParams,
        bins: int = DEFAULT_NMI_BINS) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B), natural log.

    The moving image is resampled onto the fixed grid through the
    transform; only voxels whose sampling location lands inside the moving
    grid enter the histogram.  If fewer than 1% of voxels overlap the score
    is 0; a degenerate joint entropy yields 1.0.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    pts = fixed.voxel_positions()
    vals, inside = sample_points(moving, apply_points(theta, pts))
    n_in = int(inside.sum())
    if n_in < 0.01 * len(pts):
        return 0.0
    a = fixed.voxels.reshape(-1)[inside]
    b = vals[inside]
    joint = joint_histogram(a, b, bins)
    h_joint = _entropy(joint.reshape(-1))
    if h_joint == 0.0:
        return 1.0
    h_a = _entropy(joint.sum(axis=1))
    h_b = _entropy(joint.sum(axis=0))
    return (h_a + h_b) / h_joint


def evaluate_metric(ctx: MetricContext, fixed: Volume, moving: Volume,
                    theta: RigidParams) -> float:
    if ctx.kind == "deep":
        return deep_metric(ctx, fixed, moving, theta)
    if ctx.kind == "nmi":
        return nmi(fixed, moving, theta, ctx.bins)
    return float(ctx.fn(fixed, moving, theta))


def shift_axis(theta: RigidParams, axis: str, offset: float) -> RigidParams:
    """New parameters with one component displaced by offset."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    vec = theta.as_vector()
    vec[AXES.index(axis)] += offset
    return RigidParams.from_vector(vec, theta.center)


def response_sweep(ctx: MetricContext, fixed: Volume, moving: Volume,
                   theta_base: RigidParams, axis: str,
                   sweep_range: tuple[float, float], steps: int) -> list[tuple[float, float]]:
    """Metric values at equally spaced offsets of one parameter."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    lo, hi = sweep_range
    offsets = np.linspace(lo, hi, steps)
    curve = []
    for off in offsets:
        value = evaluate_metric(ctx, fixed, moving, shift_axis(theta_base, axis, float(off)))
        curve.append((float(off), float(value)))
    return curve


def sweep_to_csv(curve, axis: str) -> str:
    unit = "mm" if axis.startswith("t") else "rad"
    out = io.StringIO()
    out.write(f"# axis={axis} unit={unit}\n")
    out.write("offset,value\n")
    for off, val in curve:
        out.write(f"{off!r},{val!r}\n")
    return out.getvalue()
