"""Command-line behavior: train/eval/report flows, exit codes, file outputs.

Training invocations here use prior-only (no learning) so the tests stay
fast; the full training path is exercised by the acceptance suite.
"""

import csv
import json
import math

import numpy as np
import pytest

from propel import cli
from propel.dsl import ProgramPolicy, parse
from propel.envs import episode_score, make_env
from propel.loop import EVAL_SEED_BASE

PRIOR = "PID<1, 0.0, -1.2, 0.0, 0.0>"

FAST_TRAIN = """
[experiment]
env = "mountaincar"
methods = ["prior-only"]
seeds = [0, 1]
output_dir = "{out}"

[ippg]
eval_episodes = 3
"""


def write_config(tmp_path, body, name="exp.toml"):
    path = tmp_path / name
    path.write_text(body)
    return path


def read_results(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- argument handling ---------------------------------------------------


def test_no_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_eval_rejects_unknown_env():
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--policy", "x.txt", "--env", "torcs"])
    assert exc.value.code == 2


# -- train -----------------------------------------------------------------


def test_train_unknown_env_exits_2(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        '[experiment]\nenv = "torcs"\nmethods = ["prior-only"]\nseeds = [0]\n',
    )
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "torcs" in capsys.readouterr().err


def test_train_prior_only_rows(tmp_path):
    out = tmp_path / "runs"
    cfg = write_config(tmp_path, FAST_TRAIN.format(out=out))
    assert cli.main(["train", "--config", str(cfg)]) == 0

    rows = read_results(out / "results.csv")
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert all(r["iteration"] == "0" for r in rows)
    assert all(r["method"] == "prior-only" and r["env"] == "mountaincar" for r in rows)

    env = make_env("mountaincar")
    prior = ProgramPolicy(parse(PRIOR), env.spec)
    want, _ = episode_score(prior, env, 3, EVAL_SEED_BASE)
    assert float(rows[0]["score"]) == pytest.approx(want)
    # run artifacts land next to the table
    assert (out / "prior-only.mountaincar.0.run.json").exists()
    assert (out / "prior-only.mountaincar.0.pi_00.txt").read_text().strip() == PRIOR


def test_train_is_byte_deterministic(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, FAST_TRAIN.format(out=tmp_path / "a"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    monkeypatch.setenv("PROPEL_OUT", str(tmp_path / "b"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    first = (tmp_path / "a" / "results.csv").read_bytes()
    second = (tmp_path / "b" / "results.csv").read_bytes()
    assert first == second


def test_train_parallel_jobs_match_serial(tmp_path):
    cfg = write_config(tmp_path, FAST_TRAIN.format(out=tmp_path / "serial"))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    cfg2 = write_config(
        tmp_path, FAST_TRAIN.format(out=tmp_path / "par"), name="exp2.toml"
    )
    assert cli.main(["train", "--config", str(cfg2), "--jobs", "2"]) == 0
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (
        tmp_path / "par" / "results.csv"
    ).read_bytes()


def test_train_records_failed_jobs(tmp_path, monkeypatch, capsys):
    real = cli._train_history

    def sometimes(method, cfg, prior):
        if method == "ndps":
            raise RuntimeError("synthetic failure")
        return real(method, cfg, prior)

    monkeypatch.setattr(cli, "_train_history", sometimes)
    body = FAST_TRAIN.format(out=tmp_path / "out").replace(
        '["prior-only"]', '["prior-only", "ndps"]'
    )
    cfg = write_config(tmp_path, body)
    # one method failed, one succeeded -> still exit 0, failure recorded
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert "FAILED" in capsys.readouterr().err
    rows = read_results(tmp_path / "out" / "results.csv")
    bad = [r for r in rows if r["method"] == "ndps"]
    assert len(bad) == 2
    assert all(r["iteration"] == "-1" and math.isnan(float(r["score"])) for r in bad)

    body = FAST_TRAIN.format(out=tmp_path / "out2").replace(
        '["prior-only"]', '["ndps"]'
    )
    cfg = write_config(tmp_path, body, name="allfail.toml")
    assert cli.main(["train", "--config", str(cfg)]) == 1


# -- eval ------------------------------------------------------------------


def test_eval_dsl_text_report(tmp_path, capsys):
    policy_path = tmp_path / "pi.txt"
    policy_path.write_text(PRIOR)
    rc = cli.main(
        [
            "eval",
            "--policy",
            str(policy_path),
            "--env",
            "mountaincar",
            "--episodes",
            "3",
            "--seed-base",
            "5",
        ]
    )
    assert rc == 0
    assert "±" in capsys.readouterr().out

    env = make_env("mountaincar")
    want_mean, want_std = episode_score(ProgramPolicy(parse(PRIOR), env.spec), env, 3, 5)
    report = json.loads((tmp_path / "pi.txt.eval.json").read_text())
    assert report["mean"] == pytest.approx(want_mean)
    assert report["std"] == pytest.approx(want_std)
    assert report["episodes"] == 3 and report["seed_base"] == 5


def test_eval_named_sensor_program(tmp_path):
    # a program written against symbolic sensor names runs once the names
    # are mapped onto observation indices
    text = (
        "if (s[TrackPos] < 0.011 and s[TrackPos] > -0.011)\n"
        "then PID<RPM, 0.45, 3.54, 0.03, 53.39>\n"
        "else PID<RPM, 0.39, 3.54, 0.03, 53.39>\n"
    )
    policy_path = tmp_path / "cruise.txt"
    policy_path.write_text(text)
    rc = cli.main(
        [
            "eval",
            "--policy",
            str(policy_path),
            "--env",
            "mountaincar",
            "--episodes",
            "2",
            "--sensor-map",
            "TrackPos=0",
            "--sensor-map",
            "RPM=1",
        ]
    )
    assert rc == 0
    report = json.loads((tmp_path / "cruise.txt.eval.json").read_text())
    assert np.isfinite(report["mean"])


def test_eval_single_episode_has_zero_std(tmp_path):
    policy_path = tmp_path / "pi.txt"
    policy_path.write_text(PRIOR)
    rc = cli.main(
        ["eval", "--policy", str(policy_path), "--env", "mountaincar", "--episodes", "1"]
    )
    assert rc == 0
    assert json.loads((tmp_path / "pi.txt.eval.json").read_text())["std"] == 0.0


def test_eval_zero_torque_matches_independent_simulation(tmp_path):
    """A do-nothing program scores exactly what hand-rolled pendulum
    dynamics predict for the same seed set."""
    policy_path = tmp_path / "zero.txt"
    policy_path.write_text("[0.0]")
    rc = cli.main(
        [
            "eval",
            "--policy",
            str(policy_path),
            "--env",
            "pendulum",
            "--episodes",
            "5",
            "--seed-base",
            "11",
        ]
    )
    assert rc == 0

    def wrap(x):
        return (x + math.pi) % (2 * math.pi) - math.pi

    def free_swing(seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        th = rng.uniform(-math.pi, math.pi)
        thdot = rng.uniform(-1.0, 1.0)
        total = 0.0
        for _ in range(200):
            total -= wrap(th) ** 2 + 0.1 * thdot**2
            thdot = float(np.clip(thdot + 15.0 * math.sin(th) * 0.05, -8.0, 8.0))
            th = wrap(th + thdot * 0.05)
        return total

    want = np.mean([free_swing(11 + i) for i in range(5)])
    report = json.loads((tmp_path / "zero.txt.eval.json").read_text())
    assert report["mean"] == pytest.approx(float(want), abs=1e-9)


@pytest.mark.parametrize(
    "content",
    [
        "PID<1, 0.0, -1.2",  # truncated DSL
        '{"format": "onnx"}',  # unknown checkpoint tag
        "PID<9, 0.0, 1.0, 0.0, 0.0>",  # sensor index out of range for the env
    ],
)
def test_eval_malformed_checkpoint_exits_2(tmp_path, capsys, content):
    policy_path = tmp_path / "bad.txt"
    policy_path.write_text(content)
    rc = cli.main(["eval", "--policy", str(policy_path), "--env", "mountaincar"])
    assert rc == 2
    assert "does not parse" in capsys.readouterr().err


def test_eval_missing_file_exits_2(tmp_path, capsys):
    rc = cli.main(["eval", "--policy", str(tmp_path / "nope.txt"), "--env", "pendulum"])
    assert rc == 2
    assert "cannot read" in capsys.readouterr().err


# -- report ------------------------------------------------------------------


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cli.CSV_COLUMNS)
        writer.writerows(rows)
    return path


def test_report_single_row(tmp_path, capsys):
    path = write_results(
        tmp_path / "results.csv",
        [["propel-prog", "mountaincar", 0, 0, 91.5, 0.0, 0.0]],
    )
    assert cli.main(["report", str(path)]) == 0
    out = capsys.readouterr().out
    assert "propel-prog" in out and "91.50" in out

    summary = read_summary(tmp_path / "summary.csv")
    assert summary == [
        {
            "method": "propel-prog",
            "env": "mountaincar",
            "n_seeds": "1",
            "median": "91.5",
            "mean": "91.5",
            "std": "0.0",
        }
    ]


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_report_median_is_robust_to_outliers(tmp_path):
    # three seeds; each seed's final score is its highest-iteration row
    rows = []
    for seed, finals in [(0, (50.0, 1.0)), (1, (50.0, 2.0)), (2, (50.0, 100.0))]:
        rows.append(["ndps", "pendulum", seed, 0, finals[0], 0.1, 0.1])
        rows.append(["ndps", "pendulum", seed, 1, finals[1], 0.1, 0.1])
    path = write_results(tmp_path / "results.csv", rows)
    assert cli.main(["report", str(path)]) == 0
    summary = read_summary(tmp_path / "summary.csv")
    assert float(summary[0]["median"]) == 2.0
    assert float(summary[0]["mean"]) == pytest.approx(103.0 / 3)


def test_report_drops_failed_jobs_and_merges_files(tmp_path):
    a = write_results(
        tmp_path / "a.csv",
        [
            ["viper", "pendulum", 0, 0, -300.0, 0.0, 0.0],
            ["viper", "pendulum", 1, -1, float("nan"), float("nan"), float("nan")],
        ],
    )
    b = write_results(
        tmp_path / "b.csv", [["viper", "mountaincar", 0, 0, 80.0, 0.0, 0.0]]
    )
    assert cli.main(["report", str(a), str(b), "--out", str(tmp_path / "s.csv")]) == 0
    summary = read_summary(tmp_path / "s.csv")
    assert [(r["method"], r["env"], r["n_seeds"]) for r in summary] == [
        ("viper", "mountaincar", "1"),
        ("viper", "pendulum", "1"),
    ]


def test_report_schema_mismatch_names_column(tmp_path, capsys):
    path = tmp_path / "results.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "env", "seed", "iteration", "score"])
        writer.writerow(["ndps", "pendulum", 0, 0, -300.0])
    assert cli.main(["report", str(path)]) == 2
    assert "epsilon_hat" in capsys.readouterr().err


def test_report_missing_file_exits_2(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "nope.csv")]) == 2


def test_train_output_feeds_report(tmp_path, capsys):
    out = tmp_path / "runs"
    cfg = write_config(tmp_path, FAST_TRAIN.format(out=out))
    assert cli.main(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert cli.main(["report", str(out / "results.csv")]) == 0
    text = capsys.readouterr().out
    assert "prior-only" in text and "n_seeds" in text
