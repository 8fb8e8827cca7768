import json
import os
import subprocess
import sys

import pytest

from icloco import tensor as T
from icloco.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from icloco.morph import from_json, validate
from test_ppo import tiny_run


@pytest.fixture(autouse=True)
def _restore_finite_check():
    saved = T.CHECK_FINITE
    yield
    T.CHECK_FINITE = saved


def _config(tmp_path, iterations=10, **policy):
    run = tiny_run(iterations=iterations)
    run.policy.update(policy)
    path = tmp_path / "run.json"
    path.write_text(run.to_json())
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_run")
    cfg = _config(d, iterations=2)
    assert main(["train", "--config", cfg, "--out-dir", str(d / "run")]) == EXIT_OK
    return d


# -- gen ---------------------------------------------------------------------------------

def test_gen_zero(tmp_path):
    assert main(["gen", "--count", "0", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert json.load(open(tmp_path / "index.json")) == {"count": 0, "robots": []}


def test_gen_is_byte_identical(tmp_path):
    args = ["gen", "--seed", "7", "--category", "biped_wheeled", "--count", "5"]
    main(args + ["--out-dir", str(tmp_path / "a")])
    main(args + ["--out-dir", str(tmp_path / "b")])
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b")) and len(names) == 6
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_gen_hundred_valid(tmp_path):
    assert main(["gen", "--count", "100", "--category", "quadruped", "--out-dir", str(tmp_path)]) == EXIT_OK
    index = json.load(open(tmp_path / "index.json"))
    assert index["count"] == 100
    for entry in index["robots"]:
        assert validate(from_json((tmp_path / entry["file"]).read_text())) == []


def test_gen_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--count", "1", "--out-dir", str(blocker / "sub")]) == EXIT_DATA
    assert "cannot create" in capsys.readouterr().err


def test_gen_bad_category(tmp_path):
    assert main(["gen", "--category", "hexapod", "--out-dir", str(tmp_path)]) == EXIT_USAGE


# -- train -------------------------------------------------------------------------------

def test_missing_config(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err


def test_no_config_or_preset(tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_bad_override(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "r"), "--set", "ppo.lrr=1"]) == EXIT_DATA
    assert "lrr" in capsys.readouterr().err


def test_manifest_written_before_first_iteration(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "r"
    assert main(["train", "--config", cfg, "--out-dir", str(out), "--stop-after", "0"]) == EXIT_OK
    man = json.load(open(out / "manifest.json"))
    assert man["seed"] == 0 and man["checkpoints"] == [] and "config" in man
    assert not (out / "metrics.jsonl").exists() or (out / "metrics.jsonl").read_text() == ""


def test_resume_matches_straight_run(tmp_path):
    cfg = _config(tmp_path)
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "full")]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "cut"), "--stop-after", "5"]) == EXIT_OK
    assert main(["train", "--config", cfg, "--out-dir", str(tmp_path / "cut"), "--resume"]) == EXIT_OK
    a = (tmp_path / "full" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "cut" / "metrics.jsonl").read_bytes()
    assert len(a.splitlines()) == 10
    pa = (tmp_path / "full" / "checkpoints" / "iter_000010" / "params.npz").read_bytes()
    assert pa == (tmp_path / "cut" / "checkpoints" / "iter_000010" / "params.npz").read_bytes()


def test_corrupt_checkpoint_refused(tmp_path, capsys):
    cfg = _config(tmp_path, iterations=6)
    out = tmp_path / "r"
    main(["train", "--config", cfg, "--out-dir", str(out), "--stop-after", "5"])
    (out / "checkpoints" / "iter_000005" / "params.npz").write_bytes(b"not a checkpoint")
    assert main(["train", "--config", cfg, "--out-dir", str(out), "--resume"]) == EXIT_DATA
    assert "iter_000005" in capsys.readouterr().err


def test_lock_blocks_second_command(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "r"
    out.mkdir()
    (out / ".lock").write_text("123")
    assert main(["train", "--config", cfg, "--out-dir", str(out)]) == EXIT_DATA
    assert "locked" in capsys.readouterr().err


# -- eval / sweep / trace -----------------------------------------------------------------------

def test_eval_single_env(trained, tmp_path):
    out = tmp_path / "rep"
    assert main(["eval", str(trained / "run"), "--robots", "2", "--n-envs", "1", "--out-dir", str(out)]) == EXIT_OK
    rows = (out / "eval.csv").read_text().splitlines()
    assert rows[0] == "robot_id,mode,score_mean,score_std,n"
    assert [r.split(",")[-1] for r in rows[1:]] == ["1", "1"]


def test_eval_is_byte_identical(trained, tmp_path):
    for name in ("a", "b"):
        main(["eval", str(trained / "run"), "--robots", "2", "--n-envs", "2", "--seed", "3", "--out-dir",
              str(tmp_path / name)])
    for f in ("eval.csv", "eval.json", "eval.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sweep_four_budgets(trained, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(trained / "run"), "--budgets", "0,0.1,0.2,0.5", "--n-episodes", "4",
                 "--out-dir", str(out)]) == EXIT_OK
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "budget,survival_mean,survival_std,n" and len(rows) == 5


def test_sweep_bad_budgets(trained, tmp_path):
    assert main(["sweep", str(trained / "run"), "--budgets", "0,x", "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["sweep", str(trained / "run"), "--budgets", "2,1", "--out-dir", str(tmp_path)]) == EXIT_DATA


def test_trace(trained, tmp_path):
    out = tmp_path / "tr"
    assert main(["trace", str(trained / "run"), "--variants", "2", "--n-rollouts", "2", "--seconds", "0.6",
                 "--out-dir", str(out)]) == EXIT_OK
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "time_s,inter_variant_distance,alive_0,alive_1" and len(lines) == 32


def test_config_checkpoint_mismatch_names_dimension(trained, tmp_path, capsys):
    other = _config(tmp_path, d_model=32)
    assert main(["eval", str(trained / "run"), "--config", other, "--out-dir", str(tmp_path / "x")]) == EXIT_DATA
    assert "d_model" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path / "nothing"), "--out-dir", str(tmp_path / "x")]) == EXIT_DATA


# -- misc ----------------------------------------------------------------------------------------

def test_show_config_round_trips(capsys):
    assert main(["show-config", "--preset", "smoke"]) == EXIT_OK
    d = json.loads(capsys.readouterr().out)
    assert d["policy"]["n_layers"] == 4 and d["policy"]["segment_len"] == 32
    assert d["env"]["command_range"] == [0.5, 0.5]


def test_no_command_is_usage_error():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "icloco.cli", "show-config"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["schema_version"] >= 1
