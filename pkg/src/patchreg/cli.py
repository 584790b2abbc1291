"""Command-line entry points and the quantitative evaluation report.

Subcommands: gen-data, train, register, sweep, evaluate.  Exit codes:
0 success, 2 invalid arguments, 3 I/O or parse errors, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patchreg.errors import FileFormatError, InvalidStartError, PatchRegError
from patchreg.metric import (
    AXES,
    MetricContext,
    make_deep_context,
    nmi_context,
    response_sweep,
    sweep_to_csv,
)
from patchreg.network import load_model, save_model
from patchreg.registration import (
    PowellConfig,
    RIGID_SCALES,
    parse_stages,
    register_pair,
    run_pipeline,
)
from patchreg.sampling import SamplerConfig
from patchreg.synthdata import (
    MisalignSpec,
    PhantomSpec,
    make_misaligned_set,
    read_pair_set,
    write_pair_set,
)
from patchreg.trainer import TrainConfig
from patchreg.transform import RigidParams, transform_error
from patchreg.volume import read_volume

ERROR_COLUMNS = ("norm_t", "dtx", "dty", "dtz", "dthx_deg", "dthy_deg", "dthz_deg")


def _error_row(theta_true: RigidParams, theta_est: RigidParams) -> tuple[float, ...]:
    e = transform_error(theta_true, theta_est)
    return (
        e.norm_t,
        abs(e.dt[0]), abs(e.dt[1]), abs(e.dt[2]),
        abs(e.dr_deg[0]), abs(e.dr_deg[1]), abs(e.dr_deg[2]),
    )


def _normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b) -> float:
    """Two-sided Wilcoxon signed-rank p-value, normal approximation.

    Zero differences are dropped; ties get average ranks with the usual
    variance correction.  All-zero differences give p = 1.0.
    """
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if len(d) != len(np.asarray(b)):
        raise ValueError("paired samples must have equal length")
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return 1.0
    mag = np.abs(d)
    order = np.argsort(mag, kind="stable")
    ranks = np.empty(n, dtype=float)
    sorted_mag = mag[order]
    i = 0
    tie_term = 0.0
    while i < n:
        j = i
        while j + 1 < n and sorted_mag[j + 1] == sorted_mag[i]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i:j + 1]] = avg
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    t_plus = float(np.sum(ranks[d > 0]))
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        return 1.0
    z = (t_plus - mean) / math.sqrt(var)
    return min(1.0, 2.0 * (1.0 - _normal_cdf(abs(z))))


@dataclass
class ErrorTable:
    """Per-method registration error aggregates plus pairwise p-values."""

    methods: list[str]
    stats: dict[str, dict[str, tuple[float, float]]]
    raw: dict[str, dict[int, tuple[float, ...]]]
    counts: dict[str, int]

    def pvalue(self, method_a: str, method_b: str, column: str) -> float:
        """Wilcoxon signed-rank p on matched per-pair errors; raises
        ValueError when the two methods cover different pair ids."""
        if column not in ERROR_COLUMNS:
            raise ValueError(f"unknown column {column!r}")
        ids_a = sorted(self.raw[method_a])
        ids_b = sorted(self.raw[method_b])
        if ids_a != ids_b:
            raise ValueError(
                f"pair ids of {method_a!r} and {method_b!r} do not match"
            )
        col = ERROR_COLUMNS.index(column)
        a = [self.raw[method_a][i][col] for i in ids_a]
        b = [self.raw[method_b][i][col] for i in ids_a]
        return wilcoxon_signed_rank(a, b)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        header = ["kind", "method", "n"]
        for c in ERROR_COLUMNS:
            header += [f"{c}_mean", f"{c}_std"]
        writer.writerow(header)
        for m in self.methods:
            row = ["stats", m, self.counts[m]]
            for c in ERROR_COLUMNS:
                mean, std = self.stats[m][c]
                row += [f"{mean:.2f}", f"{std:.2f}"]
            writer.writerow(row)
        for i, ma in enumerate(self.methods):
            for mb in self.methods[i + 1:]:
                row = ["pvalue", f"{ma}|{mb}", ""]
                for c in ERROR_COLUMNS:
                    try:
                        row += [f"{self.pvalue(ma, mb, c):.4g}", ""]
                    except ValueError:
                        row += ["", ""]
                writer.writerow(row)
        return out.getvalue()


def evaluate_errors(records) -> ErrorTable:
    """Aggregate (method, pair_id, theta_true, theta_est) records.

    Means and (population) standard deviations are computed per method for
    the translation-norm, per-axis absolute translation and per-axis
    absolute rotation (degrees) errors.
    """
    raw: dict[str, dict[int, tuple[float, ...]]] = {}
    methods: list[str] = []
    for method, pair_id, theta_true, theta_est in records:
        if method not in raw:
            raw[method] = {}
            methods.append(method)
        raw[method][pair_id] = _error_row(theta_true, theta_est)
    if not methods:
        raise ValueError("no records given")
    stats = {}
    counts = {}
    for m in methods:
        rows = np.asarray([raw[m][i] for i in sorted(raw[m])], dtype=float)
        counts[m] = len(rows)
        stats[m] = {
            c: (float(rows[:, k].mean()), float(rows[:, k].std()))
            for k, c in enumerate(ERROR_COLUMNS)
        }
    return ErrorTable(methods, stats, raw, counts)


def _parse_init(text: str, center) -> RigidParams:
    parts = [float(x) for x in text.split()]
    if len(parts) != 6:
        raise ValueError(f"--init needs 6 numbers, got {len(parts)}")
    return RigidParams(tuple(parts[:3]), tuple(parts[3:]), tuple(center))


def _make_context(args, fixed) -> MetricContext:
    if args.metric == "nmi":
        return nmi_context(args.bins)
    if not args.model:
        raise ValueError("--metric deep requires --model")
    model = load_model(args.model)
    return make_deep_context(
        fixed, model, n_patches=args.n_patches, patch_size=args.patch_size,
        rng=np.random.default_rng(args.seed),
    )


def _cmd_gen_data(args) -> int:
    dims = tuple(int(x) for x in args.dims.split(","))
    if len(dims) != 3:
        raise ValueError("--dims needs three comma-separated integers")
    a, b = (float(x) for x in args.t_range.split(","))
    spec = PhantomSpec(dims=dims, seed=args.seed)
    mis = MisalignSpec(t_range=(a, b), r_range=args.r_range, seed=args.seed)
    pairs = make_misaligned_set(args.pairs, spec, args.modality, mis)
    manifest = write_pair_set(args.out, pairs)
    print(f"wrote {len(pairs)} pairs; manifest {manifest}")
    return 0


def _cmd_train(args) -> int:
    pairs = read_pair_set(Path(args.data) / "manifest.csv")
    stages = parse_stages(args.stages)
    n_train = args.train_pairs if args.train_pairs is not None else max(1, len(pairs) // 2)
    if not (1 <= n_train <= len(pairs)):
        raise ValueError(f"--train-pairs must be in [1, {len(pairs)}]")
    train_pairs = pairs[:n_train]
    test_pairs = pairs[n_train:]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = run_pipeline(
        stages, train_pairs, test_pairs, seed=args.seed,
        train_cfg=TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed),
        sampler_cfg=SamplerConfig(pairs_per_volume=args.patches_per_pair, seed=args.seed),
        n_metric_patches=args.n_patches,
        progress=(print if args.verbose else None),
    )
    for k, model in enumerate(result.models):
        save_model(out_dir / f"model_stage_{k + 1}.dmr", model)
        (out_dir / f"history_stage_{k + 1}.csv").write_text(result.histories[k].to_csv())
    (out_dir / "report.csv").write_text(result.report_csv())
    est_buf = io.StringIO()
    writer = csv.writer(est_buf, lineterminator="\n")
    writer.writerow(["pair_id", "method", "theta"])
    for method in sorted(result.test_estimates):
        for pair, est in zip(test_pairs, result.test_estimates[method]):
            writer.writerow([pair.pair_id, method, est.serialize()])
    (out_dir / "estimates.csv").write_text(est_buf.getvalue())
    print(f"wrote {len(result.models)} stage models and reports to {out_dir}")
    return 0


def _cmd_register(args) -> int:
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    ctx = _make_context(args, fixed)
    center = fixed.center()
    theta0 = _parse_init(args.init, center) if args.init else RigidParams.identity(center)
    theta = register_pair(fixed, moving, ctx, theta0,
                          PowellConfig(scales=RIGID_SCALES))
    Path(args.out).write_text(theta.serialize() + "\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    ctx = _make_context(args, fixed)
    lo, hi = (float(x) for x in args.range.split(","))
    center = fixed.center()
    theta0 = _parse_init(args.init, center) if args.init else RigidParams.identity(center)
    curve = response_sweep(ctx, fixed, moving, theta0, args.axis, (lo, hi), args.steps)
    Path(args.out).write_text(sweep_to_csv(curve, args.axis))
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    truth: dict[int, RigidParams] = {}
    with open(args.manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            truth[int(row["pair_id"])] = RigidParams.deserialize(row["theta_true"])
    records = []
    for est_path in args.estimates:
        with open(est_path, newline="") as fh:
            for row in csv.DictReader(fh):
                pid = int(row["pair_id"])
                if pid not in truth:
                    raise ValueError(f"pair_id {pid} in {est_path} missing from manifest")
                records.append((row["method"], pid, truth[pid],
                                RigidParams.deserialize(row["theta"])))
    table = evaluate_errors(records)
    Path(args.out).write_text(table.to_csv())
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchreg",
        description="Learned patch-similarity metrics for multimodal rigid registration",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic misaligned pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--modality", choices=["remap", "gm"], default="remap")
    p.add_argument("--t-range", default="1,5")
    p.add_argument("--r-range", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="run the multi-shot training pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--stages", required=True, help='space-separated "l,sigma2[,P]"')
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--train-pairs", type=int, default=None)
    p.add_argument("--patches-per-pair", type=int, default=400)
    p.add_argument("--n-patches", type=int, default=64)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    for name, fn in (("register", _cmd_register), ("sweep", _cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--fixed", required=True)
        p.add_argument("--moving", required=True)
        p.add_argument("--metric", choices=["deep", "nmi"], required=True)
        p.add_argument("--model", default=None)
        p.add_argument("--n-patches", type=int, default=64)
        p.add_argument("--patch-size", type=int, default=17)
        p.add_argument("--bins", type=int, default=60)
        p.add_argument("--init", default=None, help='"tx ty tz rx ry rz"')
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if name == "sweep":
            p.add_argument("--axis", choices=list(AXES), required=True)
            p.add_argument("--range", required=True, help="lo,hi")
            p.add_argument("--steps", type=int, required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="Table-style error report with p-values")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimates", action="append", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, PatchRegError) as exc:
        if isinstance(exc, FileFormatError):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        if isinstance(exc, InvalidStartError):
            print(f"error: {exc}", file=sys.stderr)
            return 4
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
