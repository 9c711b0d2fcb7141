import json
import subprocess
import sys

import numpy as np
import pytest

from care_lab import config as C
from care_lab import evalkit as EK
from care_lab.cli import main
from care_lab.stats import welch_ttest

from helpers import replace, tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.toml"
    C.save(tiny_config("care", steps=40), cfg_path)
    assert main(["train", "--config", str(cfg_path), "--out", str(root / "care")]) == 0
    return root


def write_runs(root, name, per_seed):
    """Hand-made run directories: per_seed[s] = list of (step, success) for one task."""
    for s, rows in enumerate(per_seed):
        d = root / name / f"seed_{s}"
        d.mkdir(parents=True)
        EK.write_eval_jsonl(d / "eval.jsonl", [EK.EvalRecord(st, "t", v, s) for st, v in rows])
    return root / name


def test_train_layout(trained):
    run = trained / "care" / "seed_0"
    assert (run / "config.snapshot").is_file()
    assert (run / "checkpoints" / "step_40.ckpt").is_file()
    assert len((run / "eval.jsonl").read_text().splitlines()) == 2 * 3


def test_train_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_train_bad_key_is_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[sac]\nlearning_rate = 1\n")
    assert main(["train", "--config", str(path)]) == 2
    assert "sac.learning_rate" in capsys.readouterr().err


def test_train_refuses_existing_run(trained, capsys):
    cfg_path = trained / "tiny.toml"
    assert main(["train", "--config", str(cfg_path), "--out", str(trained / "care")]) == 1
    assert "refusing" in capsys.readouterr().err


def test_eval_writes_fresh_files(trained, capsys):
    run = trained / "care" / "seed_0"
    assert main(["eval", "--run", str(run)]) == 0
    assert main(["eval", "--run", str(run), "--checkpoint", "step_20"]) == 0
    assert main(["eval", "--run", str(run)]) == 0
    assert (run / "eval_step_40_train.jsonl").is_file()
    assert (run / "eval_step_40_train.1.jsonl").is_file()
    assert (run / "eval_step_20_train.jsonl").is_file()
    a = (run / "eval_step_40_train.jsonl").read_text()
    assert a == (run / "eval_step_40_train.1.jsonl").read_text()
    # evaluating the final checkpoint reproduces the in-training evaluation
    final = [r for r in EK.read_eval_jsonl(run / "eval.jsonl") if r["step"] == 40]
    assert EK.read_eval_jsonl(run / "eval_step_40_train.jsonl") == final


def test_eval_held_out(trained):
    run = trained / "care" / "seed_0"
    assert main(["eval", "--run", str(run), "--held-out", "--episodes", "2"]) == 0
    rows = EK.read_eval_jsonl(run / "eval_step_40_held-out.jsonl")
    assert [r["task"] for r in rows] == ["open-window"]


def test_eval_errors(trained, tmp_path, capsys):
    run = trained / "care" / "seed_0"
    assert main(["eval", "--run", str(run), "--checkpoint", "step_999"]) == 2
    assert main(["eval", "--run", str(tmp_path)]) == 2
    raw = (run / "checkpoints" / "step_40.ckpt").read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(raw[:-64])
    assert main(["eval", "--run", str(run), "--checkpoint", str(cut)]) == 2
    assert "error" in capsys.readouterr().err


def test_analyze_runs_and_self_compare(trained, tmp_path, capsys):
    assert main(["analyze", "--runs", str(trained / "care")]) == 0
    assert "±" in capsys.readouterr().out
    care = str(trained / "care")
    # one seed per group cannot carry a t-test
    assert main(["analyze", "--compare", care, care]) == 2
    two = str(write_runs(tmp_path, "two", [[(10, 0.2), (20, 0.6)], [(10, 0.4), (20, 0.4)]]))
    assert main(["analyze", "--compare", two, two]) == 0
    out = capsys.readouterr().out
    assert "p=1.000000" in out and "*" not in out


def test_analyze_compare_hand_fixture(tmp_path, capsys):
    a = write_runs(tmp_path, "a", [[(10, 0.9), (20, 1.0)], [(10, 0.8), (20, 1.0)], [(10, 0.7), (20, 0.9)]])
    b = write_runs(tmp_path, "b", [[(10, 0.1), (20, 0.2)], [(10, 0.3), (20, 0.1)], [(10, 0.0), (20, 0.0)]])
    assert main(["analyze", "--compare", str(a), str(b)]) == 0
    out = capsys.readouterr().out.splitlines()
    # a peaks at step 20 (mean 0.9667), b at step 10 (mean 0.1333)
    expected = welch_ttest([1.0, 1.0, 0.9], [0.1, 0.3, 0.0])
    assert out[0].endswith(f"0.967 ± {np.std([1, 1, 0.9], ddof=1) / np.sqrt(3):.3f}*")
    assert out[1].endswith("0.133 ± 0.088")
    assert f"p={expected.p:.6f} *" in out[2]


def test_analyze_grid_mismatch_and_missing(tmp_path):
    a = write_runs(tmp_path, "a", [[(10, 0.5)], [(10, 0.5)]])
    b = write_runs(tmp_path, "b", [[(10, 0.5), (20, 0.6)], [(10, 0.4), (20, 0.6)]])
    write_runs(tmp_path, "c", [[(10, 0.5)], [(15, 0.5)]])
    assert main(["analyze", "--compare", str(a), str(b)]) == 0  # grids may differ between groups
    assert main(["analyze", "--runs", str(tmp_path / "c")]) == 2
    assert main(["analyze", "--runs", str(tmp_path / "nothing")]) == 2
    assert main(["analyze"]) == 2


def test_analyze_similarity(trained, tmp_path):
    run = trained / "care" / "seed_0"
    out = tmp_path / "sim.csv"
    assert main(["analyze", "--similarity", str(run), "--output", str(out)]) == 0
    names, mat = EK.read_similarity_csv(out)
    assert names == ["open-drawer", "close-window", "close-drawer", "open-window"]
    assert np.array_equal(mat, mat.T)
    assert np.all(np.diag(mat) == 1.0)
    assert np.all(np.abs(mat) <= 1.0 + 1e-12)


def test_similarity_needs_context(tmp_path):
    cfg_path = tmp_path / "mtsac.toml"
    C.save(tiny_config("mtsac", steps=0), cfg_path)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 0
    assert main(["analyze", "--similarity", str(tmp_path / "m" / "seed_0")]) == 2


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "care_lab.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train" in res.stdout
    res = subprocess.run([sys.executable, "-m", "care_lab.cli", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2


def test_parallel_training_matches_serial(tmp_path, monkeypatch):
    cfg = replace(tiny_config("single", steps=12), "run", seeds=[0, 1])
    C.save(cfg, tmp_path / "c.toml")
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("CARE_LAB_THREADS", "2")
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--out", str(tmp_path / "par")]) == 0
    for s in (0, 1):
        for name in ("metrics.jsonl", "eval.jsonl"):
            assert (tmp_path / "serial" / f"seed_{s}" / name).read_bytes() == \
                (tmp_path / "par" / f"seed_{s}" / name).read_bytes()
    snap = json.dumps(C.to_dict(C.load(tmp_path / "par" / "seed_1" / "config.snapshot")))
    assert '"seeds": [1]' in snap
