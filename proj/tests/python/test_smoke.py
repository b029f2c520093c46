import json

import numpy as np
import pytest

import oncokit


def test_version_and_exceptions():
    assert oncokit.__version__
    assert issubclass(oncokit.ConfigError, oncokit.Error)
    with pytest.raises(oncokit.ConfigError):
        oncokit.c_index([1.0, 2.0], [0.1, 0.2], [1, 1], orientation="sideways")


def test_c_index_orientations():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.array([1, 1, 1, 1], dtype=np.int32)
    assert oncokit.c_index(t, t, e)["c_index"] == 1.0
    assert oncokit.c_index(t, -t, e)["c_index"] == 0.0
    # A risk score is higher for earlier events.
    assert oncokit.c_index(t, -t, e, orientation="shorter_time")["c_index"] == 1.0


def test_dsc_and_precision_recall():
    a = np.zeros((4, 4, 4))
    a[1:3, 1:3, 1:3] = 1
    assert oncokit.dsc(a, a) == 1.0
    assert oncokit.dsc(np.zeros_like(a), a) == 0.0
    assert oncokit.precision_recall(a, a) == (1.0, 1.0)


def test_super_image_round_trip():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2, 5, 7, 13))
    rows, cols = oncokit.choose_grid(13)
    assert rows * cols == 14
    s = oncokit.to_super_image(v)
    assert s.shape == (2, 5 * rows, 7 * cols)
    np.testing.assert_array_equal(oncokit.from_super_image(s, 13), v)
    # The worked example: 80x80x48 volumes tile into 480x640 images.
    assert oncokit.to_super_image(np.zeros((1, 80, 80, 48))).shape == (1, 480, 640)
    with pytest.raises(oncokit.Error):
        oncokit.to_super_image(v, grid="2x2")


def test_volume_io(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    oncokit.write_volume(tmp_path / "v.mvol", data, (1.0, 2.0, 3.0), "PET")
    back, spacing, modality = oncokit.read_volume(tmp_path / "v.mvol")
    np.testing.assert_array_equal(back, data)
    assert spacing == [1.0, 2.0, 3.0]
    assert modality == "PET"
    (tmp_path / "bad.mvol").write_bytes(b"nope")
    with pytest.raises(oncokit.FormatError):
        oncokit.read_volume(tmp_path / "bad.mvol")


def test_cox_recovers_planted_coefficients():
    c = oncokit.synthetic_cohort(n=500, seed=1)
    model = oncokit.cox_fit(c["x"], np.array(c["times"]), np.array(c["events"], dtype=np.int32),
                            feature_names=c["feature_names"])
    assert model["coefficients"][0] == pytest.approx(1.0, abs=0.15)
    assert model["coefficients"][1] == pytest.approx(-0.5, abs=0.15)
    risk = oncokit.cox_risk(model, c["x"])
    ci = oncokit.c_index(np.array(c["times"]), np.array(risk), np.array(c["events"], dtype=np.int32),
                         orientation="shorter_time")
    assert ci["c_index"] > 0.65
    json.dumps(model)  # models are plain JSON-compatible dicts


def test_mtlr_and_fusion():
    c = oncokit.synthetic_cohort(n=150, seed=2)
    t = np.array(c["times"])
    e = np.array(c["events"], dtype=np.int32)
    model = oncokit.mtlr_fit(c["x"], t, e, grid_size=5)
    times, surv = oncokit.mtlr_survival(model, list(c["x"][0]))
    assert len(times) == 6 and surv[0] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(surv, surv[1:]))
    r_mtlr = np.array(oncokit.mtlr_risk(model, c["x"]))
    cox = oncokit.cox_fit(c["x"], t, e)
    r_cox = np.array(oncokit.cox_risk(cox, c["x"]))
    fused = oncokit.deep_fusion_risk(r_cox, r_mtlr)
    assert len(fused) == 150
    assert oncokit.c_index(t, np.array(fused), e, orientation="shorter_time")["c_index"] > 0.65
    nmodel = oncokit.mtlr_fit(c["x"], t, e, grid_size=5, hidden=[4], seed=3)
    assert len(oncokit.mtlr_risk(nmodel, c["x"])) == 150


def test_cv_split():
    folds = oncokit.cv_split(["A"] * 10, k=5, seed=3)
    assert [len(f["test"]) for f in folds] == [2] * 5
    assert sorted(i for f in folds for i in f["test"]) == list(range(10))
    by_center = oncokit.cv_split(["A", "A", "B"], by_center=True)
    assert [f["test"] for f in by_center] == [[0, 1], [2]]
    with pytest.raises(oncokit.ConfigError):
        oncokit.cv_split(["A"] * 3, k=4)


def test_model_stats_ratio():
    p3, _ = oncokit.model_stats("seg3d", "paper", (144, 144, 144))
    p2, _ = oncokit.model_stats("seg2d-si", "paper", (144, 144, 144))
    assert 2.5 <= p3 / p2 <= 3.5


def test_experiment_and_evaluate(tmp_path):
    ehr = oncokit.write_synthetic_dataset(tmp_path / "data", n=80, seed=4)
    config = {"task": "surv-cox", "seed": 1, "data": {"ehr": str(ehr)}, "output": str(tmp_path / "run"),
              "cv": {"k": 4}}
    report = oncokit.run_experiment(config, ["model.cox_ridge=0.01"])
    assert len(report["folds"]) == 4
    assert report["config"]["model"]["cox_ridge"] == 0.01
    assert 0.5 < report["aggregate"]["c_index"]["mean"] <= 1.0
    assert json.loads((tmp_path / "run" / "report.json").read_text()) == report
    ev = oncokit.evaluate(tmp_path / "run" / "fold0", ehr, "surv-cox")
    assert ev["aggregate"]["c_index"] == report["folds"][0]["metrics"]["c_index"]
    with pytest.raises(oncokit.ConfigError):
        oncokit.run_experiment({"task": "surv-cox", "output": "x"})


def test_convert_si_round_trip(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    data = np.random.default_rng(1).normal(size=(4, 4, 6)).astype(np.float32)
    oncokit.write_volume(src / "a.mvol", data)
    assert oncokit.convert_si(src, tmp_path / "si") == []
    sidecar = json.loads((tmp_path / "si" / "a.si.json").read_text())
    assert (sidecar["sh"], sidecar["sw"]) == (2, 3)
    assert oncokit.invert_si(tmp_path / "si", tmp_path / "back") == []
    assert (tmp_path / "back" / "a.mvol").read_bytes() == (src / "a.mvol").read_bytes()
