"""End-to-end command-line tests: every subcommand, exit codes, determinism."""

import json

import numpy as np
import pytest

from dglstm.cli import main
from dglstm.communities import CommunitySet
from dglstm.model import build_model
from dglstm.model_io import load_model, save_model


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    rc = main(["synth", "--out", str(out), "--n-subjects", "12", "--rois", "6",
               "--length", "40", "--k-true", "2", "--coupling", "1.0",
               "--noise-sd", "0.5", "--overlap", "0.0", "--seed", "0"])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def cv_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    argv = ["crossval", "--data", str(dataset / "manifest.json"),
            "--out", str(out), "--k", "2", "--variant", "dg", "--k1", "3",
            "--k2", "2", "--window", "10", "--batch-size", "16",
            "--learning-rate", "0.01", "--max-epochs", "2",
            "--patience", "2", "--seed", "0"]
    assert main(argv) == 0
    return out, argv


def test_synth_outputs(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest) == 12
    for entry in manifest:
        assert (dataset / entry["csv_path"]).exists()
    truth = json.loads((dataset / "ground_truth.json").read_text())
    assert truth["source"] == "planted"
    assert len(truth["members"]) == 2
    resolved = json.loads((dataset / "config_resolved.json").read_text())
    assert resolved["command"] == "synth"
    assert resolved["n_subjects"] == 12


def test_synth_requires_out():
    assert main(["synth", "--n-subjects", "4"]) == 2


def test_crossval_k2_tiny_run_completes(cv_run):
    out, _ = cv_run
    folds = json.loads((out / "folds.json").read_text())
    assert len(folds) == 2
    for i, fold in enumerate(folds):
        assert fold["fold"] == i
        assert fold["epochs_run"] == 2
        assert 0.0 <= fold["acc"] <= 1.0
        assert (out / "models" / f"fold_{i:02d}.dglstm").exists()
    agg = json.loads((out / "aggregate.json").read_text())
    accs = [fold["acc"] for fold in folds]
    assert abs(agg["acc_mean"] - np.mean(accs)) < 1e-12
    csv_lines = (out / "aggregate.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "metric,mean,std"
    assert len(csv_lines) == 6  # acc/tpr/tnr/auc + pooled auc


def test_crossval_models_are_loadable(cv_run):
    out, _ = cv_run
    model = load_model(str(out / "models" / "fold_00.dglstm"))
    assert model.variant == "dg"
    assert model.k1 == 3 and model.k2 == 2


def test_crossval_rerun_byte_identical(cv_run):
    out, argv = cv_run
    tracked = ["folds.json", "aggregate.json", "aggregate.csv",
               "config_resolved.json", "models/fold_00.dglstm",
               "models/fold_01.dglstm"]
    before = {name: (out / name).read_bytes() for name in tracked}
    assert main(argv) == 0
    for name in tracked:
        assert (out / name).read_bytes() == before[name], name


def test_crossval_bad_variant(dataset, tmp_path):
    rc = main(["crossval", "--data", str(dataset / "manifest.json"),
               "--out", str(tmp_path / "x"), "--k", "2",
               "--config", str(_write_cfg(tmp_path, {"variant": "zz"}))])
    assert rc == 2


def test_crossval_missing_data(tmp_path):
    rc = main(["crossval", "--data", str(tmp_path / "nope.json"),
               "--out", str(tmp_path / "cv"), "--k", "2"])
    assert rc == 3


def _write_cfg(tmp_path, payload):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(payload))
    return path


def test_config_file_and_flag_precedence(tmp_path):
    cfg = _write_cfg(tmp_path, {"n_subjects": 8, "rois": 5, "length": 30,
                                "k_true": 2, "noise_sd": 0.5})
    out = tmp_path / "ds"
    rc = main(["synth", "--config", str(cfg), "--out", str(out),
               "--n-subjects", "6"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 6  # flag beat the config file
    resolved = json.loads((out / "config_resolved.json").read_text())
    assert resolved["rois"] == 5  # config file beat the default


def test_config_file_invalid(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    assert main(["synth", "--config", str(bad), "--out",
                 str(tmp_path / "o")]) == 2
    missing = tmp_path / "missing.json"
    assert main(["synth", "--config", str(missing), "--out",
                 str(tmp_path / "o")]) == 2


def test_communities_from_trained_model(cv_run, tmp_path):
    cv_out, _ = cv_run
    out = tmp_path / "comm"
    rc = main(["communities", "--model",
               str(cv_out / "models" / "fold_00.dglstm"), "--out", str(out)])
    assert rc == 0
    cs = CommunitySet.load(str(out / "communities.json"))
    assert cs.source == "lstm"
    assert cs.k == 3 and cs.r == 6
    infl = json.loads((out / "influence.json").read_text())
    assert sorted(infl["ranking"]) == [1, 2, 3]
    assert len(infl["scores"]) == 3


def test_communities_rejects_nongenerative_model(tmp_path):
    model = build_model("d", r=5, k1=3, k2=2, t=8, seed=0)
    path = tmp_path / "d.dglstm"
    save_model(model, str(path))
    rc = main(["communities", "--model", str(path),
               "--out", str(tmp_path / "comm")])
    assert rc == 2


def test_cd_baseline(dataset, tmp_path):
    out = tmp_path / "cd"
    rc = main(["cd-baseline", "--data", str(dataset / "manifest.json"),
               "--out", str(out), "--k-communities", "2", "--window", "10",
               "--max-sweeps", "100", "--seed", "0"])
    assert rc == 0
    parafac = json.loads((out / "parafac.json").read_text())
    assert 0.0 < parafac["fit"] <= 1.0
    hist = np.asarray(parafac["fit_history"])
    assert np.all(np.diff(hist) >= -1e-10)
    cs = CommunitySet.load(str(out / "communities.json"))
    assert cs.source == "cd" and cs.k == 2 and cs.r == 6


def test_cd_baseline_k_zero(dataset, tmp_path):
    rc = main(["cd-baseline", "--data", str(dataset / "manifest.json"),
               "--out", str(tmp_path / "cd"), "--k-communities", "0"])
    assert rc == 2


def test_robustness_self_match(dataset, tmp_path):
    out = tmp_path / "rob"
    truth = str(dataset / "ground_truth.json")
    rc = main(["robustness", "--ref", truth, "--other", truth,
               "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "robustness.json").read_text())
    assert rep["mean_dsc"] == 1.0
    assert abs(rep["mean_corr"] - 1.0) < 1e-12
    assert rep["matching"] == "best-match-with-replacement"
    assert (out / "robustness.csv").exists()


def test_robustness_vs_cd(dataset, tmp_path):
    cd_out = tmp_path / "cd"
    assert main(["cd-baseline", "--data", str(dataset / "manifest.json"),
                 "--out", str(cd_out), "--k-communities", "2",
                 "--window", "10"]) == 0
    out = tmp_path / "rob"
    rc = main(["robustness", "--ref", str(dataset / "ground_truth.json"),
               "--other", str(cd_out / "communities.json"),
               "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "robustness.json").read_text())
    assert rep["ref_source"] == "planted"
    assert rep["other_source"] == "cd"
    assert len(rep["best_dsc"]) == 2


def test_gradcheck_single_variant_passes(capsys):
    rc = main(["gradcheck", "--variant", "dg"])
    assert rc == 0
    text = capsys.readouterr().out
    assert "variant dg: max relative error" in text
    assert "(pass)" in text


def test_gradcheck_corrupt_fails(capsys, tmp_path):
    out = tmp_path / "gc"
    rc = main(["gradcheck", "--variant", "d", "--corrupt",
               "--out", str(out)])
    assert rc == 1
    assert "(FAIL)" in capsys.readouterr().out
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"] is False


def _fold_report(path, accs):
    path.write_text(json.dumps([{"fold": i, "acc": a, "auc": a}
                                for i, a in enumerate(accs)]))
    return str(path)


def test_ttest_on_fold_reports(tmp_path, capsys):
    a = _fold_report(tmp_path / "a.json", [0.8, 0.9, 0.7, 0.85])
    b = _fold_report(tmp_path / "b.json", [0.7, 0.8, 0.65, 0.7])
    out = tmp_path / "tt"
    rc = main(["ttest", "--report-a", a, "--report-b", b, "--out", str(out)])
    assert rc == 0
    result = json.loads((out / "ttest.json").read_text())
    assert result["t"] > 0 and 0 < result["p"] < 0.5
    assert result["n"] == 4
    assert "t=" in capsys.readouterr().out


def test_ttest_identical_reports_degenerate(tmp_path):
    a = _fold_report(tmp_path / "a.json", [0.8, 0.9, 0.7])
    b = _fold_report(tmp_path / "b.json", [0.8, 0.9, 0.7])
    assert main(["ttest", "--report-a", a, "--report-b", b]) == 3


def test_ttest_constant_shift_degenerate(tmp_path):
    a = _fold_report(tmp_path / "a.json", [0.8, 0.9, 0.7])
    b = _fold_report(tmp_path / "b.json", [0.7, 0.8, 0.6])
    assert main(["ttest", "--report-a", a, "--report-b", b]) == 3


def test_ttest_mismatched_folds(tmp_path):
    a = _fold_report(tmp_path / "a.json", [0.8, 0.9])
    b = _fold_report(tmp_path / "b.json", [0.7, 0.8, 0.6])
    assert main(["ttest", "--report-a", a, "--report-b", b]) == 2


def test_ttest_bad_metric(tmp_path):
    a = _fold_report(tmp_path / "a.json", [0.8, 0.9])
    b = _fold_report(tmp_path / "b.json", [0.7, 0.8])
    assert main(["ttest", "--report-a", a, "--report-b", b,
                 "--metric", "nope"]) == 2
