"""Command-line front end: train experiment matrices, evaluate checkpoints,
aggregate result tables.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
arguments. The PROPEL_OUT environment variable overrides the configured
output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import METHODS, ConfigError, load_config
from .dsl import DslTypeError, ParseError, ProgramPolicy, parse
from .envs import ENV_IDS, episode_score, make_env
from .loop import (
    policy_from_checkpoint,
    run_ddpg_only,
    run_ippg,
    run_ndps_baseline,
    run_prior_only,
    run_viper_baseline,
    save_run,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["method", "env", "seed", "iteration", "score", "epsilon_hat", "sigma2_hat"]
SUMMARY_COLUMNS = ["method", "env", "n_seeds", "median", "mean", "std"]


# -- train -------------------------------------------------------------------


def _train_history(method: str, cfg, prior):
    if method in ("propel-prog", "propel-tree"):
        return run_ippg(cfg, prior)
    if method == "ndps":
        return run_ndps_baseline(cfg)
    if method == "viper":
        return run_viper_baseline(cfg)
    if method == "ddpg-only":
        return run_ddpg_only(cfg)
    if method == "prior-only":
        return run_prior_only(cfg, prior)
    raise ValueError(f"unknown method {method!r}")


def _run_job(args):
    """One (method, seed) training job; runs in a worker process under --jobs.

    Returns (method, seed, rows, error). Row order inside a job is by
    iteration; global ordering is imposed when the CSV is written.
    """
    method, env_id, seed, cfg, prior, out_dir = args
    try:
        hist = _train_history(method, cfg, prior)
    except Exception as exc:  # job-level failure: record, don't kill the run
        log.exception("job %s seed %d failed", method, seed)
        row = [method, env_id, seed, -1, float("nan"), float("nan"), float("nan")]
        return method, seed, [row], f"{type(exc).__name__}: {exc}"
    save_run(hist, out_dir, f"{method}.{env_id}.{seed}")
    rows = [
        [method, env_id, seed, d.t, d.score_pi, d.epsilon_hat, d.sigma2_hat]
        for d in hist.diagnostics
    ]
    return method, seed, rows, None


def cmd_train(args) -> int:
    try:
        exp = load_config(args.config)
    except ConfigError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(os.environ.get("PROPEL_OUT", exp.output_dir))
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [
        (method, exp.env_id, seed, exp.job_config(method, seed), exp.prior, out_dir)
        for method, seed in exp.jobs()
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]

    all_rows, failures = [], []
    for method, seed, rows, error in results:
        all_rows.extend(rows)
        if error is not None:
            failures.append((method, seed, error))
            print(f"train: job {method} seed {seed} FAILED: {error}", file=sys.stderr)
    all_rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))

    results_path = out_dir / "results.csv"
    with open(results_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(all_rows)
    print(f"wrote {results_path} ({len(all_rows)} rows, {len(failures)} failed jobs)")
    return 0 if len(failures) < len(jobs) else 1


# -- eval --------------------------------------------------------------------


def _parse_sensor_map(pairs):
    mapping = {}
    for pair in pairs or ():
        name, _, idx = pair.partition("=")
        if not name or not idx.lstrip("-").isdigit():
            raise ConfigError(f"--sensor-map: expected NAME=INDEX, got {pair!r}")
        mapping[name] = int(idx)
    return mapping or None


def cmd_eval(args) -> int:
    env = make_env(args.env)
    try:
        text = Path(args.policy).read_text()
    except OSError as exc:
        print(f"eval: cannot read policy file: {exc}", file=sys.stderr)
        return 2
    try:
        sensor_map = _parse_sensor_map(args.sensor_map)
        if text.lstrip().startswith("{"):
            policy = policy_from_checkpoint(text, env.spec)
        else:
            policy = ProgramPolicy(parse(text, sensor_names=sensor_map), env.spec)
    except (ConfigError, ParseError, DslTypeError, ValueError, AssertionError, KeyError) as exc:
        print(
            "eval: checkpoint does not parse as DSL text, tree JSON, or MLP JSON: "
            f"{exc}",
            file=sys.stderr,
        )
        return 2

    mean, std = episode_score(policy, env, args.episodes, args.seed_base)
    print(f"{mean:.2f} ± {std:.2f} over {args.episodes} episodes")
    report = {
        "policy": str(args.policy),
        "env": args.env,
        "episodes": args.episodes,
        "seed_base": args.seed_base,
        "mean": mean,
        "std": std,
    }
    report_path = Path(f"{args.policy}.eval.json")
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    return 0


# -- report ------------------------------------------------------------------


def _read_results(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            missing = [c for c in CSV_COLUMNS if header is None or c not in header]
            bad = missing[0] if missing else (header or ["<empty>"])[0]
            raise ConfigError(f"{path}: results schema mismatch at column {bad!r}")
        for line in reader:
            yield {
                "method": line[0],
                "env": line[1],
                "seed": int(line[2]),
                "iteration": int(line[3]),
                "score": float(line[4]),
            }


def aggregate(rows):
    """Final score per (method, env, seed) is the highest-iteration row;
    aggregates are over seeds. Non-finite finals (failed jobs) are dropped."""
    finals = {}
    for row in rows:
        key = (row["method"], row["env"], row["seed"])
        if key not in finals or row["iteration"] > finals[key][0]:
            finals[key] = (row["iteration"], row["score"])
    grouped = {}
    for (method, env, _seed), (_t, score) in sorted(finals.items()):
        if np.isfinite(score):
            grouped.setdefault((method, env), []).append(score)
    out = []
    for (method, env), scores in sorted(grouped.items()):
        arr = np.asarray(scores)
        out.append(
            {
                "method": method,
                "env": env,
                "n_seeds": len(arr),
                "median": float(np.median(arr)),
                "mean": float(arr.mean()),
                "std": float(arr.std()),
            }
        )
    return out


def cmd_report(args) -> int:
    try:
        rows = [row for path in args.results for row in _read_results(path)]
    except OSError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return 2
    table = aggregate(rows)

    widths = [12, 12, 7, 10, 10, 10]
    header = "".join(f"{c:<{w}}" for c, w in zip(SUMMARY_COLUMNS, widths))
    print(header.rstrip())
    for entry in table:
        line = (
            f"{entry['method']:<12}{entry['env']:<12}{entry['n_seeds']:<7}"
            f"{entry['median']:<10.2f}{entry['mean']:<10.2f}{entry['std']:<10.2f}"
        )
        print(line.rstrip())

    out_path = Path(args.out) if args.out else Path(args.results[0]).parent / "summary.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for entry in table:
            writer.writerow([entry[c] for c in SUMMARY_COLUMNS])
    print(f"wrote {out_path}")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propel",
        description="Train, evaluate, and report on programmatic policies.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run an experiment config")
    train.add_argument("--config", required=True, help="TOML experiment file")
    train.add_argument("--jobs", type=int, default=1, help="parallel jobs")

    ev = sub.add_parser("eval", help="score a policy checkpoint")
    ev.add_argument("--policy", required=True, help="DSL text, tree JSON, or MLP JSON file")
    ev.add_argument("--env", required=True, choices=ENV_IDS)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed-base", type=int, default=0)
    ev.add_argument(
        "--sensor-map",
        action="append",
        metavar="NAME=INDEX",
        help="map a sensor name used by the program text to an observation index",
    )

    rep = sub.add_parser("report", help="aggregate results.csv files")
    rep.add_argument("results", nargs="+", help="one or more results.csv paths")
    rep.add_argument("--out", help="summary CSV path (default: beside the first input)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_report(args)
    except Exception as exc:  # unexpected runtime failure
        log.exception("command failed")
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
