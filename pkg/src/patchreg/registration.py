"""Derivative-free rigid registration and the multi-shot training pipeline.

Registration maximizes a similarity metric over the six rigid parameters
with Powell's direction-set method: repeated exact-ish line minimizations
(bracketing plus Brent's parabolic/golden search) along a direction set
that is updated with the direction of largest decrease.  Rotations are
optimized in units of 0.01 rad per unit step so translation and rotation
steps are commensurate.

The pipeline alternates metric training and training-data realignment
across downsampling stages: each stage trains a classifier on dithered,
symmetrized patches sampled under the current alignment estimates, then
registers every training pair with the learned metric to tighten those
estimates before the next stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from patchreg.errors import InvalidStartError
from patchreg.metric import (
    MetricContext,
    evaluate_metric,
    make_deep_context,
    nmi_context,
)
from patchreg.sampling import DitherSpec, SamplerConfig, build_dataset, rng_stream
from patchreg.trainer import TrainConfig, train, validate_accuracy
from patchreg.transform import RigidParams, transform_error
from patchreg.volume import Volume, downsample, normalize_intensity

_GOLD = 1.618034
_GLIMIT = 100.0
_TINY = 1e-20
_FTOL_GUARD = 1e-10


@dataclass(frozen=True)
class PowellConfig:
    """Direction-set optimizer settings.

    scales gives the step unit per component; None means unit scaling for
    every component.  ftol is the relative decrease threshold per sweep,
    xtol the line-search tolerance in scaled units.
    """

    scales: tuple[float, ...] | None = None
    ftol: float = 1e-4
    max_iters: int = 50
    xtol: float = 1e-3

    def __post_init__(self):
        if self.ftol <= 0 or self.xtol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.scales is not None and any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")


RIGID_SCALES = (1.0, 1.0, 1.0, 0.01, 0.01, 0.01)


@dataclass
class PowellResult:
    x: np.ndarray
    fval: float
    status: str  # "converged" | "max-iters"
    trace: list[float]
    nfev: int


class _Counted:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, x):
        self.n += 1
        v = float(self.f(x))
        return v if np.isfinite(v) else np.inf


def _bracket(g, xa=0.0, xb=1.0, max_expand=60):
    """Expand downhill from (xa, xb) until a minimum is bracketed."""
    fa, fb = g(xa), g(xb)
    if fb > fa:
        xa, xb = xb, xa
        fa, fb = fb, fa
    xc = xb + _GOLD * (xb - xa)
    fc = g(xc)
    for _ in range(max_expand):
        if fb <= fc:
            break
        r = (xb - xa) * (fb - fc)
        q = (xb - xc) * (fb - fa)
        denom = q - r
        denom = 2.0 * (abs(denom) if abs(denom) > _TINY else _TINY) * np.sign(denom or 1.0)
        u = xb - ((xb - xc) * q - (xb - xa) * r) / denom
        ulim = xb + _GLIMIT * (xc - xb)
        if not np.isfinite(u):
            u = xc + _GOLD * (xc - xb)
        if (xb - u) * (u - xc) > 0.0:
            fu = g(u)
            if fu < fc:
                return (xb, u, xc), (fb, fu, fc)
            if fu > fb:
                return (xa, xb, u), (fa, fb, fu)
            u = xc + _GOLD * (xc - xb)
            fu = g(u)
        elif (xc - u) * (u - ulim) > 0.0:
            fu = g(u)
            if fu < fc:
                xb, xc, u = xc, u, u + _GOLD * (u - xc)
                fb, fc, fu = fc, fu, g(u)
        elif (u - ulim) * (ulim - xc) >= 0.0:
            u = ulim
            fu = g(u)
        else:
            u = xc + _GOLD * (xc - xb)
            fu = g(u)
        xa, xb, xc = xb, xc, u
        fa, fb, fc = fb, fc, fu
    return (xa, xb, xc), (fa, fb, fc)


def _brent(g, bracket, fbracket, xtol, max_iter=100):
    """Brent's 1D minimization inside a bracket; returns (x, f) best seen."""
    xa, xb, xc = bracket
    fb = fbracket[1]
    a, b = (xa, xc) if xa < xc else (xc, xa)
    x = w = v = xb
    fx = fw = fv = fb
    d = e = 0.0
    for _ in range(max_iter):
        xm = 0.5 * (a + b)
        tol1 = xtol
        tol2 = 2.0 * tol1
        if abs(x - xm) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            etemp = e
            e = d
            if not (abs(p) >= abs(0.5 * q * etemp) or p <= q * (a - x) or p >= q * (b - x)):
                d = p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if xm >= x else -tol1
                use_golden = False
        if use_golden:
            e = (a if x >= xm else b) - x
            d = 0.381966 * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d >= 0 else -tol1)
        fu = g(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


def _line_minimize(func, point, direction, f0, xtol):
    """Minimize func along point + alpha*direction; never worse than f0."""
    def g(alpha):
        return func(point + alpha * direction)

    bracket, fbracket = _bracket(g)
    alpha, fmin = _brent(g, bracket, fbracket, xtol)
    if fmin >= f0:
        return point, f0
    return point + alpha * direction, fmin


def powell_minimize(func, x0, cfg: PowellConfig | None = None) -> PowellResult:
    """Powell's direction-set minimization.

    Line-minimizes along each direction per sweep, then replaces the
    direction of largest decrease with the sweep displacement when the
    classic acceptance test favors it.  Terminates when the per-sweep
    relative decrease falls below ftol or after max_iters sweeps.  The
    trace of accepted objective values never increases.
    """
    if cfg is None:
        cfg = PowellConfig()
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    scales = np.ones(n) if cfg.scales is None else np.asarray(cfg.scales, dtype=float)
    if len(scales) != n:
        raise ValueError(f"scales length {len(scales)} does not match x0 length {n}")

    counted = _Counted(func)

    def g(u):
        return counted(x0 + scales * u)

    u = np.zeros(n)
    fval = g(u)
    if not np.isfinite(fval):
        raise InvalidStartError("objective is not finite at the starting point")

    dirs = [np.eye(n)[i] for i in range(n)]
    trace = [fval]
    status = "max-iters"
    for _ in range(cfg.max_iters):
        f_start = fval
        u_start = u.copy()
        biggest = 0.0
        ibig = 0
        for i in range(n):
            f_prev = fval
            u, fval = _line_minimize(g, u, dirs[i], fval, cfg.xtol)
            if f_prev - fval > biggest:
                biggest = f_prev - fval
                ibig = i
        trace.append(fval)
        if 2.0 * (f_start - fval) <= cfg.ftol * (abs(f_start) + abs(fval) + _FTOL_GUARD):
            status = "converged"
            break
        u_ext = 2.0 * u - u_start
        f_ext = g(u_ext)
        if f_ext < f_start:
            t = (2.0 * (f_start - 2.0 * fval + f_ext) * (f_start - fval - biggest) ** 2
                 - biggest * (f_start - f_ext) ** 2)
            if t < 0.0:
                new_dir = u - u_start
                norm = np.linalg.norm(new_dir)
                if norm > 0:
                    new_dir = new_dir / norm
                    u, fval = _line_minimize(g, u, new_dir, fval, cfg.xtol)
                    dirs[ibig] = dirs[-1]
                    dirs[-1] = new_dir
                    trace[-1] = fval
    return PowellResult(x0 + scales * u, fval, status, trace, counted.n)


def register_pair(fixed: Volume, moving: Volume, ctx: MetricContext,
                  theta0: RigidParams, cfg: PowellConfig | None = None) -> RigidParams:
    """Maximize the metric over rigid parameters, warm-started at theta0.

    The rotation center is pinned to theta0's center.  The returned
    parameters never score worse than the start.
    """
    if cfg is None:
        cfg = PowellConfig(scales=RIGID_SCALES)
    elif cfg.scales is None:
        cfg = PowellConfig(scales=RIGID_SCALES, ftol=cfg.ftol,
                           max_iters=cfg.max_iters, xtol=cfg.xtol)
    center = theta0.center

    def objective(x):
        return -evaluate_metric(ctx, fixed, moving, RigidParams.from_vector(x, center))

    result = powell_minimize(objective, theta0.as_vector(), cfg)
    return RigidParams.from_vector(result.x, center)


@dataclass(frozen=True)
class StageSpec:
    """One pipeline stage: downsample factor, dither variance, patch size.

    epochs / pairs_per_volume / n_patches override the pipeline-wide
    training and metric budgets for this stage; registration precision
    requirements grow as residual misalignment shrinks, so later stages
    typically get more metric patches.
    """

    level: int
    sigma2: float
    patch_size: int = 17
    epochs: int | None = None
    pairs_per_volume: int | None = None
    n_patches: int | None = None

    def __post_init__(self):
        if self.level < 1:
            raise ValueError(f"downsample level must be >= 1, got {self.level}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")


def parse_stages(text: str) -> list[StageSpec]:
    """Parse space-separated `l,sigma2[,P]` stage triples."""
    stages = []
    for token in text.split():
        parts = token.split(",")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad stage spec {token!r}; expected l,sigma2[,P]")
        level = int(parts[0])
        sigma2 = float(parts[1])
        P = int(parts[2]) if len(parts) == 3 else 17
        stages.append(StageSpec(level, sigma2, patch_size=P))
    if not stages:
        raise ValueError("no stages given")
    return stages


@dataclass
class StageReport:
    stage: int
    mean_train_norm_t_before: float
    mean_train_norm_t_after: float
    val_accuracy: float


@dataclass
class PipelineResult:
    models: list
    train_aligns: list[RigidParams]
    stage_reports: list[StageReport]
    test_estimates: dict[str, list[RigidParams]]
    test_mean_norm_t: dict[str, float]
    histories: list = None

    def report_csv(self) -> str:
        lines = ["stage,mean_train_normT_before,mean_train_normT_after,val_accuracy"]
        for r in self.stage_reports:
            lines.append(
                f"{r.stage},{r.mean_train_norm_t_before!r},"
                f"{r.mean_train_norm_t_after!r},{r.val_accuracy!r}"
            )
        for method in sorted(self.test_mean_norm_t):
            lines.append(f"# test_mean_normT {method} {self.test_mean_norm_t[method]!r}")
        return "\n".join(lines) + "\n"


def _prep_level(vol: Volume, level: int) -> Volume:
    out = downsample(vol, level)
    return normalize_intensity(out)


def _mean_norm_t(pairs, aligns) -> float:
    errs = [transform_error(p.theta_true, a).norm_t for p, a in zip(pairs, aligns)]
    return float(np.mean(errs))


def run_pipeline(stages, train_pairs, test_pairs, seed: int = 0,
                 train_cfg: TrainConfig | None = None,
                 sampler_cfg: SamplerConfig | None = None,
                 dither_m: int = 4,
                 n_metric_patches: int = 64,
                 powell_cfg: PowellConfig | None = None,
                 val_fraction: float = 0.15,
                 nmi_bins: int = 60,
                 metric_margin: float = 8.0,
                 progress=None) -> PipelineResult:
    """Multi-resolution, multi-shot metric learning plus test registration.

    Each stage downsamples to its level, builds a dithered symmetrized
    dataset under the current alignment estimates, trains a classifier,
    and realigns every training pair with the learned metric.  Test pairs
    are then registered by the stage cascade (each stage's model refining
    the previous estimate at its own resolution) and, for comparison, by
    NMI over the same resolution schedule.

    metric_margin (mm) keeps registration patch centers away from the
    volume boundary, where the moving image's resampling rind of background
    zeros would otherwise pull the learned metric's optimum inward.
    """
    if not stages:
        raise ValueError("need at least one stage")
    if train_cfg is None:
        train_cfg = TrainConfig(epochs=5, seed=seed)
    if sampler_cfg is None:
        sampler_cfg = SamplerConfig(pairs_per_volume=400, seed=seed)
    if powell_cfg is None:
        powell_cfg = PowellConfig(scales=RIGID_SCALES, ftol=1e-3, max_iters=8, xtol=0.02)

    def log(msg):
        if progress is not None:
            progress(msg)

    level_cache: dict[tuple[int, int, int], Volume] = {}

    def at_level(which: int, idx: int, vol: Volume, level: int) -> Volume:
        key = (which, idx, level)
        if key not in level_cache:
            level_cache[key] = _prep_level(vol, level) if level > 1 else vol
        return level_cache[key]

    aligns = [RigidParams.identity(p.fixed.center()) for p in train_pairs]
    models = []
    histories = []
    reports = []
    for s_idx, stage in enumerate(stages):
        log(f"stage {s_idx + 1}: level={stage.level} sigma2={stage.sigma2}")
        before = _mean_norm_t(train_pairs, aligns)
        fixed_l = [at_level(0, i, p.fixed, stage.level) for i, p in enumerate(train_pairs)]
        moving_l = [at_level(1, i, p.moving, stage.level) for i, p in enumerate(train_pairs)]

        # Half a patch extent: the spec's full-extent default cannot be
        # placed inside coarse-level grids.
        rho = sampler_cfg.min_negative_offset
        if rho is None:
            rho = (stage.patch_size - 1) / 2.0 * max(fixed_l[0].spacing)
        cfg_stage = SamplerConfig(
            patch_size=stage.patch_size,
            anatomy_threshold=sampler_cfg.anatomy_threshold,
            min_negative_offset=rho,
            pairs_per_volume=stage.pairs_per_volume or sampler_cfg.pairs_per_volume,
            seed=seed + 101 * s_idx,
        )
        dataset = build_dataset(
            list(zip(fixed_l, moving_l, aligns)), cfg_stage,
            DitherSpec(stage.sigma2, dither_m), symmetrize=True,
        )
        tr, val = dataset.split(val_fraction, seed=seed + 7 * s_idx)
        cfg_train = TrainConfig(
            lr0=train_cfg.lr0, lr_decay=train_cfg.lr_decay, dropout=train_cfg.dropout,
            weight_decay=train_cfg.weight_decay, batch_size=train_cfg.batch_size,
            epochs=stage.epochs or train_cfg.epochs, seed=seed + 13 * s_idx,
        )
        model, history = train(tr, val, cfg_train)
        val_acc = validate_accuracy(model, val)
        models.append(model)
        histories.append(history)
        log(f"stage {s_idx + 1}: val accuracy {val_acc:.3f}")

        for i, pair in enumerate(train_pairs):
            ctx = make_deep_context(
                fixed_l[i], model, stage.n_patches or n_metric_patches,
                stage.patch_size, sampler_cfg.anatomy_threshold,
                rng=rng_stream(seed, 3, s_idx, i), margin=metric_margin,
            )
            aligns[i] = register_pair(fixed_l[i], moving_l[i], ctx, aligns[i], powell_cfg)
        after = _mean_norm_t(train_pairs, aligns)
        reports.append(StageReport(s_idx + 1, before, after, val_acc))
        log(f"stage {s_idx + 1}: mean train |T| {before:.3f} -> {after:.3f}")

    test_estimates: dict[str, list[RigidParams]] = {"deep": [], "nmi": []}
    for j, pair in enumerate(test_pairs):
        theta = RigidParams.identity(pair.fixed.center())
        for s_idx, stage in enumerate(stages):
            f_l = at_level(2, j, pair.fixed, stage.level)
            m_l = at_level(3, j, pair.moving, stage.level)
            ctx = make_deep_context(
                f_l, models[s_idx], stage.n_patches or n_metric_patches,
                stage.patch_size, sampler_cfg.anatomy_threshold,
                rng=rng_stream(seed, 4, s_idx, j), margin=metric_margin,
            )
            theta = register_pair(f_l, m_l, ctx, theta, powell_cfg)
        test_estimates["deep"].append(theta)

        theta_n = RigidParams.identity(pair.fixed.center())
        nmi_ctx = nmi_context(nmi_bins)
        for stage in stages:
            f_l = at_level(2, j, pair.fixed, stage.level)
            m_l = at_level(3, j, pair.moving, stage.level)
            theta_n = register_pair(f_l, m_l, nmi_ctx, theta_n, powell_cfg)
        test_estimates["nmi"].append(theta_n)
        log(f"test pair {j}: deep |T| err "
            f"{transform_error(pair.theta_true, theta).norm_t:.3f}, nmi |T| err "
            f"{transform_error(pair.theta_true, theta_n).norm_t:.3f}")

    test_mean = {
        method: _mean_norm_t(test_pairs, est)
        for method, est in test_estimates.items()
    }
    return PipelineResult(models, aligns, reports, test_estimates, test_mean, histories)
