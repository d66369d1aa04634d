import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from badsad import cli
from badsad.errors import TrainingError

SYNTH_INI = """\
[data]
dataset = synth
synth_n_per_group = 200
split_seed = 0

[trigger]
count = 200

[pretrain]
epochs = 5

[train]
epochs = 40
"""


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    ini = root / "synth.ini"
    ini.write_text(SYNTH_INI)
    out = root / "runs"
    assert run("pretrain", "-c", ini, "--out", out) == 0
    for mode in ("clean", "poison_only", "badsad"):
        assert run("train", "-c", ini, "--out", out, "--mode", mode) == 0
        assert run("eval", out / mode) == 0
    return ini, out


def test_pretrain_outputs(synth):
    _, out = synth
    pre = out / "pretrain"
    assert (pre / "pretrain.ckpt").exists()
    rows = read_csv(pre / "pretrain_log.csv")
    assert len(rows) == 5 and list(rows[0]) == ["epoch", "mse"]
    manifest = json.loads((pre / "manifest.json").read_text())
    assert manifest["config"]["pretrain"]["epochs"] == 5
    assert manifest["columns"]["pretrain_log.csv"] == ["epoch", "mse"]


def test_rerun_is_byte_identical(synth, tmp_path):
    ini, out = synth
    again = tmp_path / "again"
    assert run("pretrain", "-c", ini, "--out", again) == 0
    assert run("train", "-c", ini, "--out", again, "--mode", "badsad") == 0
    assert run("eval", again / "badsad") == 0
    for rel in ("pretrain/pretrain.ckpt", "pretrain/pretrain_log.csv", "badsad/model.ckpt", "badsad/train_log.csv", "badsad/report.json", "badsad/report.csv"):
        assert (again / rel).read_bytes() == (out / rel).read_bytes(), rel


def test_missing_data_path_names_it(tmp_path, capsys):
    missing = tmp_path / "no_such_dir"
    code = run("pretrain", "--set", f"data.root={missing}", "--out", tmp_path / "o")
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_clean_mode_purity(synth):
    _, out = synth
    audit = json.loads((out / "clean" / "manifest.json").read_text())["audit"]
    assert audit["triggered_images_encoded"] == 0
    bad = json.loads((out / "badsad" / "manifest.json").read_text())
    assert bad["audit"]["triggered_images_encoded"] > 0
    assert len(bad["poison_source_indices"]) == 200


def test_manifest_echoes_every_default(synth):
    _, out = synth
    manifest = json.loads((out / "badsad" / "manifest.json").read_text())
    from badsad.config import DEFAULTS

    for section, values in DEFAULTS.items():
        assert set(values) <= set(manifest["config"][section])
    assert manifest["train_config"]["weights"]["margin"] == 2.0
    assert len(manifest["inputs_sha256"]) == 64


def test_badsad_without_extra_terms_matches_poison_only(synth, tmp_path):
    ini, out = synth
    pre = out / "pretrain" / "pretrain.ckpt"
    for mode, extra in (("badsad", ["--alpha", 0, "--beta", 0]), ("poison_only", [])):
        assert run("train", "-c", ini, "--mode", mode, "--pretrained", pre, "--run-dir", tmp_path / mode, "--set", "train.epochs=3", *extra) == 0
    assert (tmp_path / "badsad" / "steps.csv").read_bytes() == (tmp_path / "poison_only" / "steps.csv").read_bytes()


def test_dirty_label_manifest(tmp_path):
    ini = tmp_path / "d.ini"
    ini.write_text("[data]\ndataset = synth\n[pretrain]\nepochs = 1\n[train]\nepochs = 1\nmode = dirty_label\n")
    assert run("pretrain", "-c", ini, "--out", tmp_path / "r") == 0
    assert run("train", "-c", ini, "--out", tmp_path / "r") == 0
    audit = json.loads((tmp_path / "r" / "dirty_label" / "manifest.json").read_text())["audit"]
    assert audit["triggered_training_images"] == 500
    assert audit["triggered_label"] == "+1" and audit["triggered_source_role"] == "labeled_abnormal"


def test_eval_report(synth):
    _, out = synth
    report = json.loads((out / "clean" / "report.json").read_text())
    assert 0 <= report["auc"] <= 1 and 0 <= report["asr"] <= 1
    row = read_csv(out / "clean" / "report.csv")[0]
    assert list(row) == ["dataset", "normal_class", "mode", "auc", "asr", "tau"]
    assert row["mode"] == "clean" and row["dataset"] == "synth"
    before = (out / "clean" / "report.json").read_bytes()
    assert run("eval", out / "clean") == 0
    assert (out / "clean" / "report.json").read_bytes() == before


def test_eval_missing_checkpoint(synth, tmp_path, capsys):
    _, out = synth
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "manifest.json").write_text((out / "clean" / "manifest.json").read_text())
    assert run("eval", broken) == 3
    assert "model.ckpt" in capsys.readouterr().err
    assert run("eval", tmp_path / "nowhere") == 3


def test_threshold_sweep(synth):
    _, out = synth
    assert run("sweep", out / "badsad", "--what", "threshold") == 0
    rows = read_csv(out / "badsad" / "sweep_threshold.csv")
    assert len(rows) == 21
    asrs = [float(r["asr"]) for r in rows]
    assert all(a <= b for a, b in zip(asrs, asrs[1:]))
    assert len({r["auc"] for r in rows}) == 1


def test_robustness_table(synth):
    _, out = synth
    assert run("robustness", out / "badsad") == 0
    rows = read_csv(out / "badsad" / "robustness.csv")
    assert [r["trigger"] for r in rows] == ["full", "sub", "distinct"]
    report = json.loads((out / "badsad" / "report.json").read_text())
    assert float(rows[0]["asr"]) == report["asr"]


def test_alpha_sweep_two_retrains(synth):
    _, out = synth
    assert run("sweep", out / "badsad", "--what", "alpha", "--grid", "0,1", "--jobs", 2) == 0
    rows = read_csv(out / "badsad" / "sweep_alpha.csv")
    assert [float(r["alpha"]) for r in rows] == [0.0, 1.0]
    assert rows[0]["manifest_sha256"] != rows[1]["manifest_sha256"]
    for r in rows:
        m = json.loads((out / "badsad" / "sweep_alpha" / r["run"] / "manifest.json").read_text())
        assert m["config"]["train"]["alpha"] == float(r["alpha"])


def test_beta_sweep_zero_not_above_best(synth):
    _, out = synth
    assert run("sweep", out / "badsad", "--what", "beta", "--grid", "0,0.3,1") == 0
    rows = read_csv(out / "badsad" / "sweep_beta.csv")
    asr = {float(r["beta"]): float(r["asr"]) for r in rows}
    assert asr[0.0] <= max(asr.values())


def test_projection(synth):
    _, out = synth
    assert run("project", out / "badsad", "--n-per-group", 50, "--svg") == 0
    first = (out / "badsad" / "projection.csv").read_bytes()
    rows = read_csv(out / "badsad" / "projection.csv")
    assert len(rows) == 200
    assert {r["group"] for r in rows} == {"normal", "poisoned", "abnormal", "triggered_abnormal"}
    assert (out / "badsad" / "projection.svg").exists()
    assert run("project", out / "badsad", "--n-per-group", 50) == 0
    assert (out / "badsad" / "projection.csv").read_bytes() == first

    pts = {g: np.array([[float(r["x"]), float(r["y"])] for r in rows if r["group"] == g]) for g in ("normal", "abnormal", "triggered_abnormal")}
    centroid = pts["normal"].mean(axis=0)
    dist = {g: np.linalg.norm(p - centroid, axis=1).mean() for g, p in pts.items()}
    assert dist["triggered_abnormal"] < dist["abnormal"]


def test_projection_too_many_requested(synth):
    _, out = synth
    assert run("project", out / "badsad", "--n-per-group", 100000) == 2


def test_exit_codes(tmp_path, monkeypatch, capsys):
    assert run("show-config", "--set", "train.bogus=1") == 2
    assert run("show-config", "--set", "nonsense") == 2
    with pytest.raises(SystemExit) as exc:
        run("train", "--mode", "weird")
    assert exc.value.code == 2
    assert run("train", "--set", "data.dataset=synth", "--out", tmp_path) == 3  # no pretrained checkpoint

    def explode(*a, **k):
        raise TrainingError("loss became non-finite at step 3")

    monkeypatch.setattr(cli, "cmd_pretrain", explode)
    assert run("pretrain", "--set", "data.dataset=synth") == 4
    assert "step 3" in capsys.readouterr().err


def test_show_config_round_trips(tmp_path, capsys):
    assert run("show-config", "--set", "data.dataset=synth", "--set", "train.beta=0.5") == 0
    text = capsys.readouterr().out
    path = tmp_path / "echo.ini"
    path.write_text(text)
    from badsad.config import load_config

    cfg = load_config(path)
    assert cfg["train"]["beta"] == 0.5 and cfg["data"]["dataset"] == "synth"


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "badsad.cli", "show-config", "--set", "train.alpha=x"], capture_output=True, text=True
    )
    assert proc.returncode == 2 and "alpha" in proc.stderr


def test_reproduce_table1_single_class(tmp_path):
    ini = tmp_path / "t.ini"
    ini.write_text("[data]\ndataset = synth\nsynth_n_per_group = 60\n[trigger]\ncount = 60\n[pretrain]\nepochs = 1\n[train]\nepochs = 1\n")
    assert run("reproduce-table1", "-c", ini, "--out", tmp_path / "t", "--classes", "0") == 0
    rows = read_csv(tmp_path / "t" / "table1.csv")
    assert [(r["normal_class"], r["mode"]) for r in rows] == [
        ("0", "clean"),
        ("0", "poison_only"),
        ("0", "badsad"),
        ("mean", "clean"),
        ("mean", "poison_only"),
        ("mean", "badsad"),
    ]
