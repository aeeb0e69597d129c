import json
import subprocess
import sys

import pytest

from elfua.cli import build_parser, main


def run(*args):
    return main([str(a) for a in args])


def test_help_exits_zero_and_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--help")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--source", "--persons", "--out", "--alpha", "--beta", "--gamma",
                 "--inner-steps", "--shots", "--n-tasks", "--seed", "--jobs", "--second-order"):
        assert flag in out


def test_every_flag_has_help():
    parser = build_parser()
    for sub in parser._subparsers._group_actions[0].choices.values():
        for action in sub._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{sub.prog} {action.option_strings} lacks help"


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        run("train", "--persons", "p.jsonl", "--out", "o")
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run("eval", "--ckpt", "c", "--persons", "p", "--bogus")
    assert exc.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "elfua.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-synth" in proc.stdout


def test_runtime_failure_exits_one(tmp_path, capsys):
    assert run("train", "--source", tmp_path / "missing.jsonl", "--persons", tmp_path / "p.jsonl",
               "--out", tmp_path / "o", "--steps", 1) == 1
    assert "missing.jsonl" in capsys.readouterr().err


def test_train_requires_step_count(small_world, tmp_path, capsys):
    assert run("train", "--source", small_world / "source.jsonl", "--persons", small_world / "persons_train.jsonl",
               "--out", tmp_path, "--backbone", "tiny", "--image-size", 32) == 1
    assert "steps" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(small_world, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    (out / "cfg.toml").write_text('[model]\nbackbone_depth = "tiny"\nimage_size = 32\n\n'
                                  "[train]\ntotal_outer_steps = 2\nn_tasks = 2\nsource_batch = 6\nshots = 3\n"
                                  "query_size = 3\nbeta = 0.003\n")
    code = run("train", "--config", out / "cfg.toml", "--source", small_world / "source.jsonl",
               "--persons", small_world / "persons_train.jsonl", "--out", out, "--seed", 4)
    assert code == 0
    return out


def test_train_outputs_and_manifest(trained):
    for name in ("final.ckpt", "train_log.jsonl", "metrics.csv", "run_manifest.json"):
        assert (trained / name).exists()
    man = json.loads((trained / "run_manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 4
    assert man["config"]["train"]["total_outer_steps"] == 2 and man["config"]["model"]["backbone_depth"] == "tiny"
    assert man["started"] and man["finished"] and len(man["artifacts"]) == 3


def test_seed_flag_beats_env(small_world, tmp_path, monkeypatch):
    monkeypatch.setenv("ELFUA_SEED", "9")
    common = ["--source", small_world / "source.jsonl", "--persons", small_world / "persons_train.jsonl",
              "--backbone", "tiny", "--image-size", 32, "--steps", 1, "--n-tasks", 1, "--source-batch", 4,
              "--shots", 2, "--query-size", 2]
    assert run("train", *common, "--out", tmp_path / "env") == 0
    assert json.loads((tmp_path / "env" / "run_manifest.json").read_text())["seed"] == 9
    assert run("train", *common, "--out", tmp_path / "flag", "--seed", 1) == 0
    assert json.loads((tmp_path / "flag" / "run_manifest.json").read_text())["seed"] == 1


def test_eval_sections_and_reports(trained, small_world, tmp_path, capsys):
    code = run("eval", "--ckpt", trained / "final.ckpt", "--persons", small_world / "persons_test.jsonl",
               "--mode", "ours", "--mode", "no-adapt", "--out", tmp_path)
    assert code == 0
    out = capsys.readouterr().out
    assert "== ours ==" in out and "== no-adapt ==" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report) == {"ours", "no-adapt"} and report["ours"]["support_size"] == 5
    man = json.loads((tmp_path / "run_manifest.json").read_text())
    assert man["command"] == "eval" and man["config"]["modes"] == ["ours", "no-adapt"]


def test_eval_oracle_on_unlabeled_names_fields(trained, small_world, tmp_path, capsys):
    code = run("eval", "--ckpt", trained / "final.ckpt", "--persons", small_world / "persons_train.jsonl",
               "--mode", "oracle", "--out", tmp_path)
    assert code == 1
    err = capsys.readouterr().err
    assert "yaw" in err and "pitch" in err


def test_adapt_writes_checkpoint(trained, small_world, tmp_path):
    out = tmp_path / "a.ckpt"
    assert run("adapt", "--ckpt", trained / "final.ckpt", "--persons", small_world / "persons_train.jsonl",
               "--person-id", "train000", "--out", out) == 0
    assert out.exists() and (tmp_path / "a.ckpt.run_manifest.json").exists()
    assert run("adapt", "--ckpt", trained / "final.ckpt", "--persons", small_world / "persons_train.jsonl",
               "--person-id", "nobody", "--out", out) == 1


def test_gen_synth_deterministic(tmp_path, monkeypatch):
    monkeypatch.delenv("ELFUA_SEED", raising=False)
    args = ["--train-persons", 3, "--test-persons", 2, "--samples-per-person", 4, "--source-persons", 2,
            "--source-samples-per-person", 2]
    assert run("gen-synth", "--out", tmp_path / "a", *args) == 0
    assert run("gen-synth", "--out", tmp_path / "b", *args) == 0
    for name in ("source.jsonl", "persons_train.jsonl", "persons_test.jsonl", "world.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "persons_train.jsonl").read_text().splitlines()
    assert len(rows) == 12
    assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["command"] == "gen-synth"


def test_gen_synth_zero_bias(tmp_path):
    assert run("gen-synth", "--out", tmp_path, "--bias-scale", 0, "--train-persons", 2, "--test-persons", 1,
               "--samples-per-person", 2, "--source-persons", 1, "--source-samples-per-person", 1) == 0
    world = json.loads((tmp_path / "world.json").read_text())
    assert world["config"]["bias_scale"] == 0.0
    assert all(p["gaze_bias"] == [0.0, 0.0] for p in world["persons"]["train"])


def test_ablate_cross_product_and_rerun(tmp_path):
    args = ["--G", 1, 2, "--K", 1, 3, "--steps", 1, "--n-tasks", 1, "--source-batch", 4,
            "--train-persons", 2, "--test-persons", 2, "--samples-per-person", 8, "--seeds", 0]
    assert run("ablate", "--out", tmp_path / "a", *args) == 0
    csv_a = (tmp_path / "a" / "sweep.csv").read_text().splitlines()
    assert csv_a[0].startswith("G,K,mean_error_deg") and len(csv_a) == 5
    assert len((tmp_path / "a" / "sweep.txt").read_text().splitlines()) == 5
    assert run("ablate", "--out", tmp_path / "b", *args) == 0
    assert (tmp_path / "b" / "sweep.csv").read_text().splitlines() == csv_a


def test_ablate_gamma_sweep(tmp_path):
    assert run("ablate", "--out", tmp_path, "--gammas", 0.01, 0.1, 1.0, "--steps", 1, "--n-tasks", 1,
               "--source-batch", 4, "--train-persons", 2, "--test-persons", 2, "--samples-per-person", 11,
               "--seeds", 0) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("gamma,") and len(lines) == 4
