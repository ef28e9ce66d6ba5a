"""Command-line workflow on a tiny run directory: artifacts, exit codes, determinism."""

import csv
import json
import os
import shutil

import numpy as np
import pytest

from pfoa import cli, io, metrics, synth
from pfoa.gbm import FeatureMatrix, GbmModel

from scenarios import run_workflow


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def error_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="class")
def run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("run"))
    run_workflow(root)
    return root


class TestWorkflow:
    """Artifacts written by each command of the tiny workflow."""

    def test_cohort_files(self, run):
        rows = read_csv(os.path.join(run, "cohort", "clinical.csv"))
        assert len(rows) == 80
        for sub in ("images", "landmarks", "lesions"):
            assert len(os.listdir(os.path.join(run, "cohort", sub))) == 80
        assert os.path.exists(os.path.join(run, "manifests", "synth.json"))

    def test_preprocess_zero_failures_square_tensors(self, run):
        with open(os.path.join(run, "roi", "summary.json")) as fh:
            summary = json.load(fh)
        assert summary["processed"] == 80 and summary["failed"] == 0
        # stored at the resize size; the model crop is taken at load time
        arr, _ = io.read_array(os.path.join(run, "roi", "S00L.f32"))
        assert arr.shape == (40, 40)

    def test_predictions_one_row_per_knee(self, run):
        rows = read_csv(os.path.join(run, "predictions", "gbm3.csv"))
        assert len(rows) == 80 and len({r["knee_id"] for r in rows}) == 80
        assert {int(r["fold"]) for r in rows} == {0, 1, 2}

    def test_fold_digest_shared_by_models(self, run):
        digests = set()
        for model in ("gbm3", "cnn", "cnn-attn"):
            with open(os.path.join(run, "models", model, "cv.json")) as fh:
                digests.add(json.load(fh)["fold_digest"])
        assert len(digests) == 1

    def test_fold_models_written(self, run):
        for f in range(3):
            assert os.path.exists(os.path.join(run, "models", "gbm3", f"fold{f}.json"))
            assert os.path.exists(os.path.join(run, "models", "cnn-attn", f"fold{f}.ckpt"))
            assert os.path.exists(os.path.join(run, "models", "cnn-attn", f"fold{f}_history.csv"))

    def test_parameter_manifests_differ_only_by_attention(self, run):
        with open(os.path.join(run, "models", "cnn", "parameters.json")) as fh:
            plain = json.load(fh)
        with open(os.path.join(run, "models", "cnn-attn", "parameters.json")) as fh:
            gated = json.load(fh)
        extra = set(gated) - set(plain)
        assert set(plain) <= set(gated)
        assert extra and all(name.startswith("attn") for name in extra)
        assert all(plain[k] == gated[k] for k in plain)

    def test_report_fields(self, run):
        with open(os.path.join(run, "eval", "report.json")) as fh:
            report = json.load(fh)
        assert set(report) == {"gbm3", "cnn", "cnn-attn", "stacked"}
        for entry in report.values():
            for key in ("auc", "auc_ci", "ap", "ap_ci", "brier", "n_pos", "n_neg"):
                assert key in entry
            lo, hi = entry["auc_ci"]
            assert lo <= entry["auc"] <= hi

    def test_curves_monotone_in_threshold(self, run):
        for kind, cols in (("roc", ("fpr", "tpr")), ("pr", ("recall",))):
            rows = read_csv(os.path.join(run, "eval", "curves", f"gbm3_{kind}.csv"))
            thr = np.array([float(r["threshold"]) for r in rows])
            assert np.all(np.diff(thr) <= 0)
            for c in cols:
                assert np.all(np.diff([float(r[c]) for r in rows]) >= 0)

    def test_shap_efficiency_against_margins(self, run):
        rows = read_csv(os.path.join(run, "explain", "gbm3_shap.csv"))
        phi_cols = [k for k in rows[0] if k.startswith("phi_")]
        folds = {}
        for r in rows:
            total = float(r["base_value"]) + sum(float(r[c]) for c in phi_cols)
            assert total == pytest.approx(float(r["margin"]), abs=1e-9)
            folds.setdefault(int(r["fold"]), []).append(r)
        # margins recomputed from the saved fold models
        features = [c[4:] for c in phi_cols]
        clinical = {r["knee_id"]: r for r in synth.read_clinical_csv(os.path.join(run, "cohort", "clinical.csv"))}
        for f, members in folds.items():
            with open(os.path.join(run, "models", "gbm3", f"fold{f}.json")) as fh:
                model = GbmModel.from_json(fh.read())
            X = np.array([[float(clinical[r["knee_id"]][c]) for c in features] for r in members])
            np.testing.assert_allclose(model.predict_margin(FeatureMatrix(X, features)), [float(r["margin"]) for r in members], atol=1e-12)

    def test_importance_ranking_sorted(self, run):
        with open(os.path.join(run, "explain", "gbm3_importance.json")) as fh:
            ranking = json.load(fh)
        values = [r["mean_abs_shap"] for r in ranking]
        assert values == sorted(values, reverse=True) and len(values) == 5

    def test_attn_one_png_per_knee(self, run, capsys):
        ckpt = os.path.join(run, "models", "cnn-attn", "fold0.ckpt")
        assert cli.main(["attn", "--out", run, "--checkpoint", ckpt, "--knees", "S00L,S01R,S02L"]) == 0
        pngs = sorted(p for p in os.listdir(os.path.join(run, "attention")) if p.endswith(".png"))
        assert pngs == ["S00L.png", "S01R.png", "S02L.png"]

    def test_attn_rejects_plain_checkpoint(self, run, capsys):
        ckpt = os.path.join(run, "models", "cnn", "fold0.ckpt")
        assert cli.main(["attn", "--out", run, "--checkpoint", ckpt, "--knees", "S00L"]) == 2


class TestEvalAndCompare:
    """Metric reports and DeLong comparisons on hand-made prediction files."""

    @staticmethod
    def write_table(path, ids, probs, labels, model="m", folds=None):
        folds = folds if folds is not None else [i % 2 for i in range(len(ids))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knee_id", "fold", "model", "probability", "label"])
            for k, f, p, y in zip(ids, folds, probs, labels):
                w.writerow([k, f, model, repr(float(p)), int(y)])
        return str(path)

    def sample(self, n=120, seed=0):
        rng = np.random.default_rng(seed)
        labels = (np.arange(n) % 4 == 0).astype(int)
        a = 1 / (1 + np.exp(-(labels * 1.2 + rng.standard_normal(n))))
        b = 1 / (1 + np.exp(-(labels * 0.8 + rng.standard_normal(n))))
        ids = [f"S{i // 2:03d}{'LR'[i % 2]}" for i in range(n)]
        return ids, labels, a, b

    def test_perfect_predictions(self, tmp_path):
        ids, labels, _, _ = self.sample()
        path = self.write_table(tmp_path / "p.csv", ids, labels.astype(float), labels, "perfect")
        assert cli.main(["eval", "--out", str(tmp_path), path]) == 0
        with open(tmp_path / "eval" / "report.json") as fh:
            entry = json.load(fh)["perfect"]
        assert entry["auc"] == 1.0 and entry["brier"] == 0.0

    def test_csv_report(self, tmp_path):
        ids, labels, a, _ = self.sample()
        path = self.write_table(tmp_path / "a.csv", ids, a, labels, "a")
        assert cli.main(["eval", "--out", str(tmp_path), "--format", "csv", path]) == 0
        rows = read_csv(tmp_path / "eval" / "report.csv")
        assert rows[0]["model"] == "a"
        assert float(rows[0]["auc"]) == pytest.approx(metrics.auc(a, labels), abs=1e-15)

    def test_missing_label_column(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("knee_id,fold,model,probability\nS000L,0,m,0.5\n")
        assert cli.main(["eval", "--out", str(tmp_path), str(path)]) == 2
        assert "label" in error_json(capsys)["message"]

    def test_compare_with_itself(self, tmp_path, capsys):
        ids, labels, a, _ = self.sample()
        path = self.write_table(tmp_path / "a.csv", ids, a, labels)
        assert cli.main(["compare", path, path]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["p_value"] == 1.0

    def test_swapped_arguments_negate_z(self, tmp_path, capsys):
        ids, labels, a, b = self.sample()
        pa = self.write_table(tmp_path / "a.csv", ids, a, labels, "a")
        pb = self.write_table(tmp_path / "b.csv", ids, b, labels, "b")
        assert cli.main(["compare", pa, pb]) == 0
        ab = json.loads(capsys.readouterr().out)
        assert cli.main(["compare", pb, pa]) == 0
        ba = json.loads(capsys.readouterr().out)
        assert ab["z"] == -ba["z"] and ab["p_value"] == ba["p_value"]
        assert np.isfinite(ab["p_value"])

    def test_knee_mismatch_names_first_id(self, tmp_path, capsys):
        ids, labels, a, b = self.sample()
        other = list(ids)
        other[7] = "X999L"
        pa = self.write_table(tmp_path / "a.csv", ids, a, labels)
        pb = self.write_table(tmp_path / "b.csv", other, b, labels)
        assert cli.main(["compare", pa, pb]) == 2
        assert ids[7] in error_json(capsys)["message"]

    def test_stack_of_perfect_inputs(self, tmp_path):
        ids, labels, _, _ = self.sample()
        folds = [i // 2 % 3 for i in range(len(ids))]
        pa = self.write_table(tmp_path / "a.csv", ids, labels.astype(float), labels, "a", folds)
        pb = self.write_table(tmp_path / "b.csv", ids, labels.astype(float), labels, "b", folds)
        assert cli.main(["stack", "--out", str(tmp_path), "--clinical", pa, "--cnn", pb]) == 0
        out = str(tmp_path / "predictions" / "stacked.csv")
        assert cli.main(["eval", "--out", str(tmp_path), out]) == 0
        with open(tmp_path / "eval" / "report.json") as fh:
            assert json.load(fh)["stacked"]["auc"] == 1.0

    def test_stack_rejects_different_folds(self, tmp_path):
        ids, labels, a, b = self.sample()
        pa = self.write_table(tmp_path / "a.csv", ids, a, labels, "a", [0] * 60 + [1] * 60)
        pb = self.write_table(tmp_path / "b.csv", ids, b, labels, "b", [1] * 60 + [0] * 60)
        assert cli.main(["stack", "--out", str(tmp_path), "--clinical", pa, "--cnn", pb]) == 2


class TestErrors:
    """Exit codes and machine-readable error messages."""

    def test_invalid_prevalence_names_field(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("target_prevalence = 1.5\n")
        assert cli.main(["synth", "--out", str(tmp_path), "--config", str(cfg)]) == 2
        err = error_json(capsys)
        assert err["field"] == "target_prevalence" and "target_prevalence" in err["message"]

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("gbm.n_treez = 5\n")
        assert cli.main(["synth", "--out", str(tmp_path), "--config", str(cfg)]) == 2
        assert error_json(capsys)["field"] == "gbm.n_treez"

    def test_plain_error_format(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("target_prevalence = 0\n")
        assert cli.main(["synth", "--out", str(tmp_path), "--config", str(cfg), "--format", "csv"]) == 2
        assert capsys.readouterr().err.startswith("error: ")

    def test_unknown_model_lists_names(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path), "--model", "resnet"]) == 2
        message = error_json(capsys)["message"]
        for name in ("gbm1", "gbm2", "gbm3", "cnn", "cnn-attn"):
            assert name in message

    def test_missing_upstream_names_path(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path), "--model", "gbm3"]) == 2
        assert os.path.join(str(tmp_path), "cohort", "clinical.csv") in error_json(capsys)["message"]

    def test_explain_rejects_cnn(self, tmp_path):
        assert cli.main(["explain", "--out", str(tmp_path), "--model", "cnn"]) == 2

    def test_argparse_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train"])
        assert exc.value.code == 2


class TestPartialFailure:
    """Per-knee preprocessing failures are recorded, not fatal."""

    @pytest.fixture
    def cohort(self, tmp_path):
        run = str(tmp_path / "src")
        cfg = tmp_path / "c.cfg"
        cfg.write_text("n_subjects = 4\nimage_size = 128\ntarget_prevalence = 0.3\n")
        assert cli.main(["synth", "--out", run, "--config", str(cfg), "--seed", "2"]) == 0
        return run

    def test_corrupt_landmarks_skipped(self, cohort, tmp_path, capsys):
        with open(os.path.join(cohort, "cohort", "landmarks", "S1L.json"), "w") as fh:
            fh.write("{not json")
        out = str(tmp_path / "out")
        assert cli.main(["preprocess", "--out", out, "--cohort", os.path.join(cohort, "cohort")]) == 0
        with open(os.path.join(out, "roi", "summary.json")) as fh:
            summary = json.load(fh)
        assert summary["processed"] == 7 and summary["failed"] == 1
        assert summary["failures"][0]["knee_id"] == "S1L"
        assert not os.path.exists(os.path.join(out, "roi", "S1L.f32"))

    def test_all_failing_exits_nonzero(self, cohort, tmp_path):
        shutil.rmtree(os.path.join(cohort, "cohort", "landmarks"))
        out = str(tmp_path / "out")
        assert cli.main(["preprocess", "--out", out, "--cohort", os.path.join(cohort, "cohort")]) == 1


class TestDeterminism:
    """Reruns with identical inputs and seeds reproduce artifacts byte for byte."""

    def test_synth_rerun_identical_csv(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("n_subjects = 6\nimage_size = 96\ntarget_prevalence = 0.3\n")
        for name in ("a", "b"):
            assert cli.main(["synth", "--out", str(tmp_path / name), "--config", str(cfg), "--seed", "5"]) == 0
        a = (tmp_path / "a" / "cohort" / "clinical.csv").read_bytes()
        assert a == (tmp_path / "b" / "cohort" / "clinical.csv").read_bytes()

    def test_train_twice_same_predictions(self, tmp_path):
        run = str(tmp_path / "r")
        cfg = run_workflow(run)
        pred = os.path.join(run, "predictions", "gbm3.csv")
        with open(pred, "rb") as fh:
            first = fh.read()
        assert cli.main(["train", "--out", run, "--config", cfg, "--model", "gbm3"]) == 0
        with open(pred, "rb") as fh:
            assert fh.read() == first

    def test_folds_reused_with_conflicting_k(self, run, capsys):
        assert cli.main(["train", "--out", run, "--model", "gbm1", "--folds", "4"]) == 2
        assert "k=3" in error_json(capsys)["message"]

    def test_thread_limit_flag(self, tmp_path):
        ids, labels, a, _ = TestEvalAndCompare().sample()
        path = TestEvalAndCompare.write_table(tmp_path / "a.csv", ids, a, labels)
        assert cli.main(["eval", "--out", str(tmp_path), "--threads", "1", path]) == 0
