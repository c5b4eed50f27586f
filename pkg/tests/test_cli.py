"""End-to-end command line workflow plus exit-code and config-file contracts."""

import json
import subprocess

import pytest

from dialoquery.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    JOBS_ENV_VAR,
    _default_jobs,
    main,
)
from dialoquery.dialog import load_corpus

SYNTH_ARGS = ["--dialogs", "20", "--val-dialogs", "5", "--test-dialogs", "5", "--seed", "1"]


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "bench"
    assert main(["synth", "--out", str(out), *SYNTH_ARGS]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(bench_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-train") / "run"
    code = main([
        "train", "--kb", str(bench_dir / "kb.json"),
        "--train", str(bench_dir / "train.json"), "--val", str(bench_dir / "val.json"),
        "--out", str(out), "--epochs", "2", "--feature-dim", "4096",
        "--train-position",
    ])
    assert code == EXIT_OK
    return out


def test_synth_writes_a_complete_benchmark(bench_dir):
    for name in ("kb.json", "train.json", "val.json", "test.json",
                 "manifest.json", "gold_report.json", "run_manifest.json"):
        assert (bench_dir / name).exists()
    assert len(load_corpus(bench_dir / "train.json")) == 20
    report = json.loads((bench_dir / "gold_report.json").read_text())
    assert report["n_dialogs"] == 30
    assert report["min_gold_reward"] > 0.0
    manifest = json.loads((bench_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["config"]["n_train"] == 20
    assert "kb.json" in manifest["outputs"]


def test_synth_parallelism_does_not_change_the_data(bench_dir, tmp_path):
    out = tmp_path / "bench2"
    assert main(["synth", "--out", str(out), *SYNTH_ARGS, "--jobs", "2"]) == EXIT_OK
    for name in ("kb.json", "train.json", "val.json", "test.json"):
        assert (out / name).read_bytes() == (bench_dir / name).read_bytes()


def test_label_positions_reports_gold_agreement(bench_dir, tmp_path, capsys):
    out = tmp_path / "labeled.json"
    code = main(["label-positions", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "train.json"), "--out", str(out)])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out
    assert "labeled 20 dialogs" in stdout
    assert "heuristic matches gold on" in stdout
    assert (tmp_path / "labeled.json.manifest.json").exists()
    assert all(d.heuristic_position is not None for d in load_corpus(out))


def test_explore_is_parallel_safe(bench_dir, tmp_path, capsys):
    base = ["explore", "--kb", str(bench_dir / "kb.json"),
            "--corpus", str(bench_dir / "train.json")]
    one, two = tmp_path / "e1.json", tmp_path / "e2.json"
    assert main([*base, "--out", str(one)]) == EXIT_OK
    assert "explored 20 dialogs" in capsys.readouterr().out
    assert main([*base, "--out", str(two), "--jobs", "2"]) == EXIT_OK
    assert one.read_bytes() == two.read_bytes()
    payload = json.loads(one.read_text())
    assert set(payload) == {"summary", "contexts"}
    assert len(payload["contexts"]) == 20


def test_train_writes_all_artifacts(run_dir):
    for name in ("checkpoint.json", "metrics.csv", "history.json",
                 "position_model.json", "run_manifest.json"):
        assert (run_dir / name).exists()
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,metric,value"
    assert any(line.startswith("1,val,") for line in lines)
    history = json.loads((run_dir / "history.json").read_text())
    assert history["n_train_items"] == 20
    assert history["buffer_dynamics"]  # default estimator keeps two buffers
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    assert manifest["config"]["estimator"] == "mbmapo"
    assert "position_model.json" in manifest["outputs"]


def test_same_seed_runs_produce_identical_metrics(bench_dir, tmp_path):
    base = ["train", "--kb", str(bench_dir / "kb.json"),
            "--train", str(bench_dir / "train.json"), "--val", str(bench_dir / "val.json"),
            "--epochs", "2", "--feature-dim", "4096"]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main([*base, "--out", str(a)]) == EXIT_OK
    assert main([*base, "--out", str(b)]) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()
    assert main([*base, "--out", str(c), "--seed", "7"]) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() != (c / "metrics.csv").read_bytes()


def test_eval_scores_a_checkpoint(bench_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["eval", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "test.json"),
                 "--checkpoint", str(run_dir / "checkpoint.json"), "--out", str(out)])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["split"] == "test" and report["mode"] == "query"
    assert 0.0 <= report["query_accuracy"] <= 1.0
    assert report["n_dialogs"] == 5
    lines = (out / "metrics.csv").read_text().splitlines()
    assert any(line.startswith("0,test,query_accuracy,") for line in lines)
    assert "test query_accuracy" in capsys.readouterr().out


def test_eval_position_mode(bench_dir, run_dir, tmp_path):
    out = tmp_path / "poseval"
    code = main(["eval", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "test.json"),
                 "--checkpoint", str(run_dir / "position_model.json"),
                 "--out", str(out), "--mode", "position", "--format", "json"])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert {"strict_accuracy", "avg_turn_distance", "n_dialogs"} <= set(report)
    assert not (out / "metrics.csv").exists()  # json-only format


def test_train_position_standalone(bench_dir, tmp_path, capsys):
    out = tmp_path / "position.json"
    code = main(["train-position", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "train.json"), "--out", str(out),
                 "--eval-corpus", str(bench_dir / "val.json")])
    assert code == EXIT_OK
    assert "strict accuracy" in capsys.readouterr().out
    assert (tmp_path / "position.json.manifest.json").exists()

    explored = tmp_path / "pred.json"
    code = main(["explore", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "val.json"), "--out", str(explored),
                 "--positions", "predicted", "--position-model", str(out)])
    assert code == EXIT_OK


def test_predicted_positions_require_a_model(bench_dir, tmp_path, capsys):
    code = main(["explore", "--kb", str(bench_dir / "kb.json"),
                 "--corpus", str(bench_dir / "val.json"),
                 "--out", str(tmp_path / "x.json"), "--positions", "predicted"])
    assert code == EXIT_CONFIG
    assert "needs --position-model" in capsys.readouterr().err


def test_missing_required_flags_fail_with_usage_errors(capsys):
    assert main(["synth"]) == EXIT_CONFIG
    assert "synth needs --out" in capsys.readouterr().err
    assert main(["train"]) == EXIT_CONFIG
    assert "--kb, --train, --val, --out" in capsys.readouterr().err


def test_exit_codes_distinguish_failure_kinds(bench_dir, tmp_path, capsys):
    kb = str(bench_dir / "kb.json")
    corpus = str(bench_dir / "train.json")

    code = main(["train", "--kb", kb, "--train", corpus,
                 "--val", str(bench_dir / "val.json"),
                 "--out", str(tmp_path / "run"), "--learning-rate", "0"])
    assert code == EXIT_CONFIG
    assert "learning_rate must be positive" in capsys.readouterr().err

    code = main(["eval", "--kb", kb, "--corpus", corpus,
                 "--checkpoint", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "eval")])
    assert code == EXIT_CHECKPOINT
    assert "cannot read checkpoint" in capsys.readouterr().err

    broken = tmp_path / "broken.json"
    broken.write_text("not json at all")
    code = main(["label-positions", "--kb", kb, "--corpus", str(broken),
                 "--out", str(tmp_path / "out.json")])
    assert code == EXIT_DATA


def test_config_file_supplies_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps({
        "out": str(tmp_path / "a"), "dialogs": 8, "val_dialogs": 3,
        "test_dialogs": 3, "seed": 5,
    }))
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["config"]["n_train"] == 8

    code = main(["synth", "--config", str(cfg), "--dialogs", "10",
                 "--out", str(tmp_path / "b")])
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "b" / "run_manifest.json").read_text())
    assert manifest["config"]["n_train"] == 10
    capsys.readouterr()


def test_config_file_failure_modes(tmp_path, capsys):
    bad_key = tmp_path / "bad_key.json"
    bad_key.write_text(json.dumps({"out": "x", "frobnicate": 1}))
    assert main(["synth", "--config", str(bad_key)]) == EXIT_CONFIG
    assert "unknown keys: frobnicate" in capsys.readouterr().err

    not_object = tmp_path / "list.json"
    not_object.write_text("[1, 2]")
    assert main(["synth", "--config", str(not_object)]) == EXIT_CONFIG
    assert "must hold a JSON object" in capsys.readouterr().err

    bad_json = tmp_path / "bad.json"
    bad_json.write_text("{nope")
    assert main(["synth", "--config", str(bad_json)]) == EXIT_CONFIG
    assert "not valid JSON" in capsys.readouterr().err

    assert main(["synth", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert "cannot read config file" in capsys.readouterr().err

    assert main(["synth", "--config"]) == EXIT_CONFIG
    assert "--config needs a path" in capsys.readouterr().err

    assert main(["--config", str(bad_json)]) == EXIT_CONFIG
    assert "recognized subcommand" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "dialoquery" in capsys.readouterr().out


def test_console_script_is_installed():
    proc = subprocess.run(["dialoquery", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "dialoquery" in proc.stdout


def test_jobs_come_from_the_environment(monkeypatch):
    monkeypatch.setenv(JOBS_ENV_VAR, "3")
    assert _default_jobs() == 3
    monkeypatch.setenv(JOBS_ENV_VAR, "junk")
    assert _default_jobs() == 1
    monkeypatch.setenv(JOBS_ENV_VAR, "-5")
    assert _default_jobs() == 1
    monkeypatch.delenv(JOBS_ENV_VAR)
    assert _default_jobs() == 1
