import hashlib
import json
import os

import pytest

from broach import cli


def _config(tmp_path, **sections):
    doc = {"seed": 11, "out": str(tmp_path / "run"), "synth": {"regions": {"HotHumid": 2, "MixedHumid": 2}}}
    doc.update(sections)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def _digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_synth_rerun_is_identical(tmp_path):
    cfg = _config(tmp_path)
    assert cli.main(["synth", "--config", cfg]) == 0
    first = _digest(tmp_path / "run" / "data")
    assert cli.main(["synth", "--config", cfg]) == 0
    assert _digest(tmp_path / "run" / "data") == first
    assert cli.main(["synth", "--config", cfg, "--seed", "12"]) == 0
    assert _digest(tmp_path / "run" / "data") != first


def test_invalid_region_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, synth={"regions": {"Atlantis": 3}})
    assert cli.main(["synth", "--config", cfg]) == 2
    assert "Atlantis" in capsys.readouterr().err


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert cli.main(["fit-rewards", "--config", _config(tmp_path)]) == 2
    assert "dataset file missing" in capsys.readouterr().err


def test_algo_typo_exits_2(tmp_path, capsys):
    cfg = _config(tmp_path, train={"algos": ["DQM"]})
    assert cli.main(["synth", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg]) == 2
    assert "valid algos: DQN, A2C" in capsys.readouterr().err


def test_missing_checkpoints_exit_2(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert cli.main(["synth", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg]) == 2
    assert "rewards checkpoint missing" in capsys.readouterr().err
    cfg = _config(tmp_path, evaluate={"coefficients": "truth", "n_episodes": 3})
    assert cli.main(["evaluate", "--config", cfg]) == 2
    assert "missing policy checkpoint" in capsys.readouterr().err
    assert cli.main(["explain", "--config", cfg]) == 2


def test_seed_required(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"out": str(tmp_path)}))
    assert cli.main(["synth", "--config", str(path)]) == 2
    assert cli.main(["synth", "--config", str(path), "--seed", "1"]) == 0


def test_bad_flags_and_config(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["launch", "--config", "x.json"])
    assert exc.value.code == 2
    assert cli.main(["synth", "--config", str(tmp_path / "nope.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["synth", "--config", str(bad)]) == 2
    assert cli.main(["synth", "--config", _config(tmp_path, extras={})]) == 2
    assert cli.main(["synth", "--config", _config(tmp_path, train_years=[2006, 2007],
                                                 eval_years=[2007])]) == 2


def test_threshold_outside_grid_exits_2(tmp_path):
    cfg = _config(tmp_path, train={"coefficients": "truth", "grid": [0.72]})
    assert cli.main(["synth", "--config", cfg]) == 0
    assert cli.main(["train", "--config", cfg]) == 2


@pytest.mark.filterwarnings("ignore:rewards model did not meet")
def test_small_pipeline_end_to_end(tmp_path):
    cfg = _config(
        tmp_path,
        rewards={"epochs": 2, "eval_draws": 4},
        train={"counties": ["10001", "12001"], "grid": [0.6, 0.8], "val_episodes": 4,
               "agent": {"train_episodes": 6, "eval_every": 3, "checkpoint_episodes": 2}},
        evaluate={"counties": ["10001", "12001"], "n_episodes": 5},
        explain={"policy": "a2c.qhi", "candidates": ["a2c.qhi", "aa.qhi", "nws"],
                 "min_leaf_regression": 1, "min_leaf_classification": 1},
    )
    for cmd in cli.COMMANDS:
        assert cli.main([cmd, "--config", cfg]) == 0, cmd
    run = tmp_path / "run"
    for rel in ("rewards/checkpoint.json", "rewards/elbo_trace.csv", "policies/thresholds.csv",
                "policies/10001_dqn.qhi.json", "policies/12001_a2c.json", "policies/10001_aa.qhi.json",
                "eval/results.csv", "eval/ci.csv", "eval/returns_topk.csv",
                "explain/tree_regression.txt", "explain/tree_classification.csv", "explain/features.csv"):
        assert (run / rel).exists(), rel
    policies = [line.split(",")[0] for line in (run / "eval/results.csv").read_text().splitlines()[1:]]
    assert policies == ["zero", "random", "topk", "basic_nws", "nws", "aa.qhi", "dqn.qhi", "dqn",
                        "a2c.qhi", "a2c"]
    assert len((run / "policies/thresholds.csv").read_text().splitlines()) == 1 + 2 * 3
