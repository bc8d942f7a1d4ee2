import json
import subprocess
import sys

import pytest
import yaml

from feccm.cli import main


@pytest.fixture
def synth_dir(tmp_path):
    gen = tmp_path / "gen.yaml"
    gen.write_text(yaml.safe_dump({"label_spaces": [3, 2, "regression"], "train_per_task": 40,
                                   "test_per_task": 30, "feature_dim": 4}))
    out = tmp_path / "data"
    assert main(["synth", "--config", str(gen), "--seed", "3", "--out", str(out)]) == 0
    return out


def test_synth_writes_files(synth_dir):
    assert {p.name for p in synth_dir.iterdir()} == {"train.csv", "test.csv", "specs.json"}
    assert len(json.loads((synth_dir / "specs.json").read_text())) == 3


@pytest.mark.parametrize("method", ["base", "all_features_direct", "ccm", "feccm_unified"])
def test_train_predict_evaluate(synth_dir, tmp_path, method):
    model = tmp_path / f"{method}.json"
    args = ["train", "--method", method, "--train", str(synth_dir / "train.csv"),
            "--specs", str(synth_dir / "specs.json"), "--out", str(model), "--seed", "1", "--iters", "1"]
    assert main(args + ["--trace", str(tmp_path / "trace.csv")]) == 0
    preds = tmp_path / "preds.csv"
    assert main(["predict", "--model", str(model), "--data", str(synth_dir / "test.csv"), "--out", str(preds)]) == 0
    lines = preds.read_text().splitlines()
    assert len(lines) == 1 + 90 and lines[0].startswith("sample_id,")
    rep = tmp_path / "rep.json"
    assert main(["evaluate", "--model", str(model), "--data", str(synth_dir / "test.csv"), "--bootstrap", "50",
                 "--out", str(rep)]) == 0
    doc = json.loads(rep.read_text())
    assert set(doc["tasks"]) == {"1", "2", "3"}
    # identical reruns give identical model files
    again = tmp_path / "again.json"
    main(args[:-6] + ["--out", str(again), "--seed", "1", "--iters", "1"])
    assert again.read_bytes() == model.read_bytes()


def test_train_one_goal_and_modes(synth_dir, tmp_path):
    base = ["train", "--train", str(synth_dir / "train.csv"), "--specs", str(synth_dir / "specs.json"),
            "--iters", "1"]
    assert main(base + ["--pi", "onegoal:2", "--out", str(tmp_path / "a.json")]) == 0
    assert main(base + ["--mode", "surrogate", "--beta", "0.5", "--out", str(tmp_path / "b.json")]) == 0


def test_config_errors_exit_2(synth_dir, tmp_path):
    base = ["train", "--train", str(synth_dir / "train.csv"), "--specs", str(synth_dir / "specs.json"),
            "--out", str(tmp_path / "m.json")]
    assert main(base + ["--pi", "twogoal"]) == 2
    assert main(base + ["--beta", "-1"]) == 2
    assert main(base + ["--method", "feccm_one_goal"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"methods": ["ccm", "svm"]}))
    assert main(["experiment", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()


def test_data_errors_exit_3(synth_dir, tmp_path):
    assert main(["train", "--train", str(tmp_path / "missing.csv"), "--specs", str(synth_dir / "specs.json"),
                 "--out", str(tmp_path / "m.json")]) == 3
    broken = tmp_path / "broken.csv"
    text = (synth_dir / "train.csv").read_text().splitlines()
    broken.write_text("\n".join(text[:3] + ["1,2,3"]) + "\n")
    assert main(["train", "--train", str(broken), "--specs", str(synth_dir / "specs.json"),
                 "--out", str(tmp_path / "m.json")]) == 3


def test_experiment_and_xval(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({
        "methods": ["base", "ccm"], "seeds": [0],
        "generator": {"label_spaces": [3, 2], "train_per_task": 30, "test_per_task": 30, "feature_dim": 3},
        "n_boot": 10, "table2": False,
    }))
    assert main(["experiment", str(cfg), "--out", str(tmp_path / "rep"), "--iters", "1"]) == 0
    assert (tmp_path / "rep" / "comparison.csv").exists()

    gen = tmp_path / "gen.yaml"
    gen.write_text(yaml.safe_dump({"label_spaces": [3, 2], "train_per_task": 45, "feature_dim": 3}))
    main(["synth", "--config", str(gen), "--out", str(tmp_path / "d")])
    code = main(["xval-pi", "--train", str(tmp_path / "d" / "train.csv"), "--specs", str(tmp_path / "d" / "specs.json"),
                 "--target", "2", "--iters", "1"])
    assert code == 0


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "feccm.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "xval-pi" in res.stdout
