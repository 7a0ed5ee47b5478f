import csv
import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from diacal import io as dio
from diacal.cli import default_grid, main
from diacal.fusion import METHODS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "3", "--recordings", "6", "--frames", "400", "--out", str(d)]) == 0
    return d


def scores(synth, system):
    return sorted(str(p) for p in (synth / "scores" / system).iterdir())


def test_synth_layout(synth):
    data = json.loads((synth / "data.json").read_text())
    assert list(data["systems"]) == ["sysA", "sysB", "sysC"]
    assert len(data["train"]) == 3 and len(data["test"]) == 3
    assert len(data["configs"]) == len(default_grid(["sysA", "sysB", "sysC"]))
    assert json.loads((synth / "generator.json").read_text())["seed"] == 3
    assert (synth / "ref.rttm").read_text().startswith("SPEAKER rec0000")


def test_synth_is_byte_identical(tmp_path, capsys):
    for d in ("d", "d2"):
        assert run(capsys, "synth", "--seed", 7, "--recordings", 2, "--frames", 100, "--out", tmp_path / d)[0] == 0
    cmp = filecmp.dircmp(tmp_path / "d", tmp_path / "d2")
    files = [os.path.relpath(os.path.join(r, f), tmp_path / "d")
             for r, _, fs in os.walk(tmp_path / "d") for f in fs]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "d", tmp_path / "d2", files, shallow=False)
    assert not mismatch and not errors and len(match) == len(files) > 0
    assert not cmp.left_only and not cmp.right_only


def test_score_der_identical_files(synth, capsys):
    ref = synth / "ref.rttm"
    code, out, _ = run(capsys, "score", "der", "--ref", ref, "--hyp", ref, "--collar", 0)
    assert code == 0
    assert out.startswith("DER 0.000")


def test_score_der_json_and_per_recording(synth, tmp_path, capsys):
    ref = synth / "ref.rttm"
    anns = dio.read_rttm(ref)
    dio.write_rttm(anns[:-1], tmp_path / "hyp.rttm")
    code, out, _ = run(capsys, "score", "der", "--ref", ref, "--hyp", tmp_path / "hyp.rttm", "--json")
    doc = json.loads(out)
    assert code == 0 and doc["collar_s"] == 0.25
    last = doc["recordings"][anns[-1].recording_id]
    assert last["miss_pct"] == pytest.approx(100.0)
    code, out, _ = run(capsys, "score", "der", "--ref", ref, "--hyp", tmp_path / "hyp.rttm", "--per-recording")
    assert out.count("DER") == len(anns) + 1


def test_score_der_extra_hypothesis_warns(synth, tmp_path, capsys):
    ref = dio.read_rttm(synth / "ref.rttm")[:1]
    dio.write_rttm(ref, tmp_path / "ref1.rttm")
    code, _, err = run(capsys, "score", "der", "--ref", tmp_path / "ref1.rttm", "--hyp", synth / "ref.rttm")
    assert code == 0 and "ignored" in err


def test_score_bce(synth, capsys):
    code, out, _ = run(capsys, "score", "bce", "--ref", synth / "ref.rttm", "--scores", *scores(synth, "sysA")[:2])
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 3 and lines[-1].startswith("BCE ")
    assert 0 < float(lines[-1].split()[1]) < 2


def test_fit_and_apply_calibration(synth, tmp_path, capsys):
    model = tmp_path / "cal.json"
    code, out, _ = run(capsys, "fit-cal", "--scores", *scores(synth, "sysA")[:3], "--ref", synth / "ref.rttm",
                       "--model", model)
    assert code == 0 and out.startswith("joint_power")
    code, _, _ = run(capsys, "apply-cal", "--model", model, "--scores", *scores(synth, "sysA")[3:],
                     "--out", tmp_path / "cal")
    assert code == 0
    header, m = dio.load_scores(tmp_path / "cal" / os.path.basename(scores(synth, "sysA")[3]))
    assert header.space == "powerset" and header.kind == "probability" and header.system == "sysA"
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0, atol=1e-12)


def test_fit_cal_independent_mult(synth, tmp_path, capsys):
    code, out, _ = run(capsys, "--out", tmp_path, "fit-cal", "--scores", *scores(synth, "sysB")[:2],
                       "--ref", synth / "ref.rttm", "--space", "mult", "--strategy", "independent")
    assert code == 0 and out.startswith("independent_mult")
    assert (tmp_path / "calibration.json").exists()


def test_apply_cal_refuses_to_overwrite(synth, tmp_path, capsys):
    model = tmp_path / "cal.json"
    run(capsys, "fit-cal", "--scores", *scores(synth, "sysA")[:2], "--ref", synth / "ref.rttm", "--model", model)
    target = scores(synth, "sysA")[0]
    code, _, _ = run(capsys, "apply-cal", "--model", model, "--scores", target, "--out", os.path.dirname(target))
    assert code == 1


@pytest.mark.parametrize("method", [m for m in METHODS if m != "metalearner"])
def test_fuse_unsupervised(synth, tmp_path, capsys, method):
    files = [scores(synth, s)[0] for s in ("sysA", "sysB", "sysC")]
    out = tmp_path / "fused.txt"
    code, _, _ = run(capsys, "fuse", "--scores", *files, "--method", method, "--output", out)
    assert code == 0
    header, m = dio.load_scores(out)
    assert header.system == "fused" and m.num_frames == 400


def test_fit_meta_then_fuse(synth, tmp_path, capsys):
    args = []
    for s in ("sysA", "sysB", "sysC"):
        args += ["--system", s, *scores(synth, s)[:3]]
    model = tmp_path / "meta.json"
    code, out, _ = run(capsys, "fit-meta", *args, "--ref", synth / "ref.rttm", "--model", model)
    assert code == 0 and "systems sysA,sysB,sysC" in out
    files = [scores(synth, s)[4] for s in ("sysA", "sysB", "sysC")]
    code, _, _ = run(capsys, "--out", tmp_path, "fuse", "--scores", *files, "--method", "metalearner",
                     "--model", model)
    assert code == 0 and (tmp_path / "fused.txt").exists()
    # wrong system order is a data error; missing model is a usage error
    code, _, _ = run(capsys, "--out", tmp_path, "fuse", "--scores", *files[::-1], "--method", "metalearner",
                     "--model", model)
    assert code == 2
    code, _, _ = run(capsys, "--out", tmp_path, "fuse", "--scores", *files, "--method", "metalearner")
    assert code == 1


def test_pipeline_fit_apply(synth, tmp_path, capsys):
    cfg = synth / "data.json"
    code, out, _ = run(capsys, "--config", cfg, "--out", tmp_path, "pipeline", "fit")
    assert code == 0 and "1 calibration model" in out
    code, out, _ = run(capsys, "--config", cfg, "--out", tmp_path, "pipeline", "apply",
                       "--model", tmp_path / "pipeline.json", "--write-scores")
    assert code == 0
    assert out.startswith("DER ") and "BCE " in out
    hyp = dio.read_rttm(tmp_path / "hyp.rttm")
    assert len(hyp) >= 1
    assert len(list((tmp_path / "scores").iterdir())) == 3
    code, out2, _ = run(capsys, "--config", cfg, "pipeline", "fit", "--pipeline",
                        "average_probs/mult/C->F/joint-power", "--model", tmp_path / "cf.json")
    assert code == 0 and "3 calibration model" in out2


def test_pipeline_overrides(synth, tmp_path, capsys):
    cfg = synth / "data.json"
    run(capsys, "--config", cfg, "--out", tmp_path, "pipeline", "fit")
    code, _, _ = run(capsys, "--config", cfg, "--out", tmp_path, "--median-window", 1, "--upsample", 1,
                     "--threshold", 0.3, "pipeline", "apply", "--model", tmp_path / "pipeline.json")
    assert code == 0
    code, _, _ = run(capsys, "--config", cfg, "--out", tmp_path, "--median-window", 4,
                     "pipeline", "apply", "--model", tmp_path / "pipeline.json")
    assert code == 2


def test_report(synth, tmp_path, capsys):
    names = ["dynamic_logits/mult/F->C/joint-power", "none/uncal/sysA"]
    code, out, _ = run(capsys, "--config", synth / "data.json", "--out", tmp_path, "report", "--pipeline", *names)
    assert code == 0
    assert len(out.strip().splitlines()) == 4
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert {r["condition"] for r in rows} == set(names)
    assert (tmp_path / "report.txt").read_text().strip() == out.strip()


def test_usage_errors(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage" in err.lower()
    assert run(capsys)[0] == 1
    assert run(capsys, "score", "der", "--ref", "x")[0] == 1
    assert run(capsys, "synth")[0] == 1
    assert run(capsys, "pipeline", "fit")[0] == 1


def test_data_errors(tmp_path, capsys):
    assert run(capsys, "score", "der", "--ref", tmp_path / "missing.rttm", "--hyp", tmp_path / "h.rttm")[0] == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("#diacal-scores v1\nframes=1 speakers=1 rate_hz=10 kind=prob space=mult\n1.5\n")
    ref = tmp_path / "ref.rttm"
    ref.write_text("SPEAKER r 1 0.000 1.000 <NA> <NA> A <NA> <NA>\n")
    assert run(capsys, "score", "bce", "--ref", ref, "--scores", bad)[0] == 2
    (tmp_path / "cfg.json").write_text("{not json")
    assert run(capsys, "--config", tmp_path / "cfg.json", "pipeline", "fit")[0] == 2


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "diacal", "bogus"], capture_output=True, text=True)
    assert res.returncode == 1
