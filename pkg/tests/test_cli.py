import numpy as np
import pytest

from patchreg.cli import ERROR_COLUMNS, evaluate_errors, main, wilcoxon_signed_rank
from patchreg.transform import RigidParams


def _truth(pair_id):
    return RigidParams(t=(1.0 * pair_id, 0.0, 0.0))


class TestWilcoxon:
    def test_identical_lists_give_one(self):
        a = [1.0, 2.0, 3.0]
        assert wilcoxon_signed_rank(a, a) == 1.0

    def test_detects_consistent_difference(self):
        rng = np.random.default_rng(0)
        b = rng.uniform(1.0, 2.0, 40)
        a = b + rng.uniform(0.5, 1.0, 40)
        assert wilcoxon_signed_rank(a, b) < 0.001

    def test_symmetric_noise_not_significant(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=30)
        b = a + rng.normal(scale=0.5, size=30) * np.where(np.arange(30) % 2, 1, -1)
        assert wilcoxon_signed_rank(a, b) > 0.01

    def test_two_sided_symmetry(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, 25)
        b = rng.uniform(0, 1, 25)
        assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_signed_rank(b, a))


class TestEvaluateErrors:
    def test_single_record_row(self):
        truth = RigidParams()
        est = RigidParams(t=(1.0, 2.0, 2.0))
        table = evaluate_errors([("mi", 0, truth, est)])
        mean, std = table.stats["mi"]["norm_t"]
        assert mean == pytest.approx(3.0)
        assert std == 0.0
        for c in ("dthx_deg", "dthy_deg", "dthz_deg"):
            assert table.stats["mi"][c] == (0.0, 0.0)

    def test_degrees_column_scaling(self):
        truth = RigidParams()
        est = RigidParams(r=(0.1, -0.2, 0.05))
        table = evaluate_errors([("m", 0, truth, est)])
        assert table.stats["m"]["dthx_deg"][0] == pytest.approx(np.degrees(0.1))
        assert table.stats["m"]["dthy_deg"][0] == pytest.approx(np.degrees(0.2))

    def test_renders_target_aggregates_verbatim(self):
        # Two records engineered to mean 2.02, population std 0.70 for one
        # method and 1.43 +- 0.64 for the other.
        records = []
        for pid, err in ((0, 2.02 - 0.70), (1, 2.02 + 0.70)):
            records.append(("mi", pid, RigidParams(), RigidParams(t=(err, 0.0, 0.0))))
        for pid, err in ((0, 1.43 - 0.64), (1, 1.43 + 0.64)):
            records.append(("cnn", pid, RigidParams(), RigidParams(t=(err, 0.0, 0.0))))
        table = evaluate_errors(records)
        csv_text = table.to_csv()
        lines = csv_text.strip().split("\n")
        mi_row = next(l for l in lines if l.startswith("stats,mi"))
        cnn_row = next(l for l in lines if l.startswith("stats,cnn"))
        assert "2.02,0.70" in mi_row
        assert "1.43,0.64" in cnn_row

    def test_identical_methods_pvalue_one(self):
        records = []
        for m in ("a", "b"):
            for pid in range(5):
                records.append((m, pid, _truth(pid), RigidParams(t=(pid + 0.5, 0, 0))))
        table = evaluate_errors(records)
        assert table.pvalue("a", "b", "norm_t") == 1.0

    def test_unmatched_pair_ids_invalid_for_pvalues(self):
        records = [
            ("a", 0, _truth(0), RigidParams(t=(0.5, 0, 0))),
            ("a", 1, _truth(1), RigidParams(t=(1.5, 0, 0))),
            ("b", 0, _truth(0), RigidParams(t=(0.25, 0, 0))),
            ("b", 2, _truth(2), RigidParams(t=(2.5, 0, 0))),
        ]
        table = evaluate_errors(records)
        assert "a" in table.stats and "b" in table.stats
        with pytest.raises(ValueError):
            table.pvalue("a", "b", "norm_t")

    def test_csv_pure_function_of_records(self):
        records = []
        rng = np.random.default_rng(3)
        for m in ("x", "y"):
            for pid in range(4):
                est = RigidParams(t=tuple(rng.uniform(-2, 2, 3)))
                records.append((m, pid, _truth(pid), est))
        assert evaluate_errors(records).to_csv() == evaluate_errors(records).to_csv()

    def test_column_list_matches_table_layout(self):
        assert ERROR_COLUMNS == ("norm_t", "dtx", "dty", "dtz",
                                 "dthx_deg", "dthy_deg", "dthz_deg")


class TestCliCommands:
    def test_gen_data_and_evaluate_round_trip(self, tmp_path):
        out = tmp_path / "data"
        rc = main([
            "gen-data", "--out", str(out), "--pairs", "2", "--dims", "32,32,32",
            "--modality", "remap", "--t-range", "1,3", "--r-range", "0.05",
            "--seed", "3",
        ])
        assert rc == 0
        assert (out / "manifest.csv").exists()
        assert (out / "pair_0000_fixed.v3d").exists()

        # hand-written estimates referencing the manifest
        import csv as csvmod
        from patchreg.synthdata import read_pair_set
        pairs = read_pair_set(out / "manifest.csv")
        est = tmp_path / "est.csv"
        with open(est, "w", newline="") as fh:
            w = csvmod.writer(fh)
            w.writerow(["pair_id", "method", "theta"])
            for p in pairs:
                w.writerow([p.pair_id, "perfect", p.theta_true.serialize()])
                ident = RigidParams.identity(p.theta_true.center)
                w.writerow([p.pair_id, "identity", ident.serialize()])
        table_out = tmp_path / "table.csv"
        rc = main(["evaluate", "--manifest", str(out / "manifest.csv"),
                   "--estimates", str(est), "--out", str(table_out)])
        assert rc == 0
        text = table_out.read_text()
        assert text.startswith("kind,method,n")
        perfect = next(l for l in text.split("\n") if l.startswith("stats,perfect"))
        assert ",0.00,0.00" in perfect

    def test_register_and_sweep_nmi(self, tmp_path):
        from patchreg.synthdata import PhantomSpec, generate_phantom
        from patchreg.transform import RigidParams as RP, invert, resample_moving
        from patchreg.volume import write_volume

        vol = generate_phantom(PhantomSpec(dims=(32, 32, 32), blob_count=6,
                                           blob_radius=(3.0, 6.0), seed=21))
        theta = RP(t=(2.0, -1.0, 0.0), center=tuple(vol.center()))
        moving = resample_moving(vol, invert(theta), vol)
        fixed_path = tmp_path / "fixed.v3d"
        moving_path = tmp_path / "moving.v3d"
        write_volume(fixed_path, vol)
        write_volume(moving_path, moving)

        params_out = tmp_path / "params.txt"
        rc = main(["register", "--fixed", str(fixed_path), "--moving", str(moving_path),
                   "--metric", "nmi", "--bins", "30", "--out", str(params_out)])
        assert rc == 0
        est = RP.deserialize(params_out.read_text().strip())
        assert np.linalg.norm(np.asarray(est.t) - np.asarray(theta.t)) < 1.0

        curve_out = tmp_path / "curve.csv"
        rc = main(["sweep", "--fixed", str(fixed_path), "--moving", str(moving_path),
                   "--metric", "nmi", "--bins", "30", "--axis", "tx",
                   "--range=-3,3", "--steps", "7", "--out", str(curve_out)])
        assert rc == 0
        lines = curve_out.read_text().strip().split("\n")
        assert lines[0] == "# axis=tx unit=mm"
        assert lines[1] == "offset,value"
        assert len(lines) == 9

    def test_exit_code_2_on_bad_arguments(self, tmp_path):
        rc = main(["gen-data", "--out", str(tmp_path / "x"), "--pairs", "1",
                   "--dims", "32,32", "--seed", "0"])
        assert rc == 2

    def test_exit_code_3_on_parse_error(self, tmp_path):
        bad = tmp_path / "bad.v3d"
        bad.write_bytes(b"NOPE" + bytes(64))
        rc = main(["register", "--fixed", str(bad), "--moving", str(bad),
                   "--metric", "nmi", "--out", str(tmp_path / "p.txt")])
        assert rc == 3

    def test_exit_code_3_on_missing_file(self, tmp_path):
        rc = main(["register", "--fixed", str(tmp_path / "none.v3d"),
                   "--moving", str(tmp_path / "none.v3d"),
                   "--metric", "nmi", "--out", str(tmp_path / "p.txt")])
        assert rc == 3

    def test_exit_code_4_on_nonfinite_objective(self, tmp_path):
        from patchreg.network import init_model, save_model
        from patchreg.synthdata import PhantomSpec, generate_phantom
        from patchreg.volume import Volume, write_volume

        vol = generate_phantom(PhantomSpec(dims=(32, 32, 32), blob_count=6,
                                           blob_radius=(3.0, 6.0), seed=33))
        bad = np.array(vol.voxels, copy=True)
        bad[:, :, :] = np.nan
        fixed_path = tmp_path / "fixed.v3d"
        moving_path = tmp_path / "nan.v3d"
        model_path = tmp_path / "m.dmr"
        write_volume(fixed_path, vol)
        write_volume(moving_path, Volume(bad, vol.spacing, vol.origin))
        save_model(model_path, init_model(seed=0))
        rc = main(["register", "--fixed", str(fixed_path),
                   "--moving", str(moving_path), "--metric", "deep",
                   "--model", str(model_path), "--n-patches", "4",
                   "--out", str(tmp_path / "p.txt")])
        assert rc == 4
