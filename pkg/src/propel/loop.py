"""Lift-and-project training loop.

Each iteration lifts the current program into the mixed neural space (a DDPG
residual trained around the frozen program) and projects the result back onto
the programmatic family by imitation, carrying all demonstrations forward.
The residual search is volatile; the loop is not allowed to be: a failed
iteration keeps the previous program and the run continues.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .ddpg import DdpgConfig, LiftConfig, update_f
from .dsl import ProgramPolicy, parse, print_program
from .envs import episode_score, make_env
from .imitation import project
from .mlp import MlpPolicy, mlp_from_json, mlp_to_json
from .policies import Policy, zero_policy
from .trees import TreePolicy, tree_from_json, tree_to_json

log = logging.getLogger(__name__)

# fixed seed base for the noise-free 100-episode evaluations, shared by every
# method and iteration so scores stay comparable across a whole experiment
EVAL_SEED_BASE = 1_000_000

DEFAULT_PRIORS = {
    "mountaincar": "PID<1, 0.0, -1.2, 0.0, 0.0>",
    "pendulum": "PID<1, 0.0, 5.0, 0.0, 0.5>",
}


@dataclass
class IppgConfig:
    """Everything one training run needs besides the prior itself."""

    env_id: str = "mountaincar"
    family: str = "dsl"  # projection family: guarded-PID programs or trees
    T: int = 5  # lift-and-project iterations
    eta: float | None = None  # residual actor step size; None = ddpg.actor_lr
    lam: float = 0.3  # residual mixing weight
    m: int = 20  # residual training episodes per lift
    M: int = 5  # imitation rounds per projection
    seed: int = 0
    eval_episodes: int = 100
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)
    # projection sub-hyperparameters, passed through to project()
    episodes_per_round: int = 10
    program_depth: int = 3
    budget: int = 1000
    tree_depth: int = 6
    tree_min_leaf: int = 8
    max_fit_rows: int = 12_000

    def __post_init__(self):
        assert self.T >= 1, "need at least one iteration"
        assert self.family in ("dsl", "tree"), f"unknown family {self.family!r}"
        assert self.m >= 0 and self.M >= 1
        assert self.lam > 0, "mixing weight must be positive"
        assert self.eta is None or self.eta > 0, "step size must be positive"
        assert self.eval_episodes >= 1


def default_config(env_id: str, family: str = "dsl", seed: int = 0) -> IppgConfig:
    """Per-environment tuned defaults.

    Both environments want full residual authority (lam=1): a clipped prior
    saturates the actuator, and a small residual cannot flip its sign where
    the oracle must. Mountaincar additionally needs a loud, slowly
    mean-reverting exploration process to ever reach the goal. Pendulum's
    oracle is much harder to imitate, so it gets longer lifts and more
    aggregation rounds per projection.
    """
    if env_id == "mountaincar":
        return IppgConfig(
            env_id=env_id,
            family=family,
            seed=seed,
            lam=1.0,
            m=40,
            ddpg=DdpgConfig(tau=0.01, ou_theta=0.05, ou_sigma=1.0, updates_per_step=4),
        )
    if env_id == "pendulum":
        return IppgConfig(
            env_id=env_id,
            family=family,
            seed=seed,
            lam=1.0,
            m=150,
            M=8,
            episodes_per_round=15,
            ddpg=DdpgConfig(tau=0.005, updates_per_step=2),
        )
    raise ValueError(f"no defaults for env {env_id!r}")


@dataclass
class IterationDiagnostics:
    t: int
    score_pi: float  # 100-episode noise-free mean of the projected program
    score_h: float  # same protocol for the mixed oracle
    epsilon_hat: float  # held-out projection residual
    sigma2_hat: float  # variance of actor-gradient norms during the lift
    wall_time_s: float
    failed: bool = False


@dataclass
class RunHistory:
    diagnostics: list
    best_policy: Policy
    best_score: float  # running max of the per-iteration program scores
    final_policy: Policy
    checkpoints: list  # serialized program per iteration, parallel to diagnostics

    def scores(self):
        return [d.score_pi for d in self.diagnostics]


# -- checkpoint format ------------------------------------------------------


def policy_to_checkpoint(policy: Policy) -> str:
    """Serialize a policy: DSL text for programs, tagged JSON otherwise."""
    if isinstance(policy, ProgramPolicy):
        return print_program(policy.ast)
    if isinstance(policy, TreePolicy):
        return tree_to_json(policy.tree)
    if isinstance(policy, MlpPolicy):
        return mlp_to_json(policy.net)
    raise TypeError(f"cannot checkpoint a {type(policy).__name__}")


def policy_from_checkpoint(text: str, env_spec) -> Policy:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        kind = json.loads(stripped).get("format")
        if kind == "tree":
            return TreePolicy(tree_from_json(stripped), env_spec)
        if kind == "mlp":
            return MlpPolicy(mlp_from_json(stripped))
        raise ValueError(f"checkpoint JSON has unknown format tag {kind!r}")
    return ProgramPolicy(parse(stripped), env_spec)


# -- the loop ---------------------------------------------------------------


def _as_policy(prior, spec) -> Policy:
    if isinstance(prior, str):
        return ProgramPolicy(parse(prior), spec)
    if isinstance(prior, Policy):
        return prior
    return ProgramPolicy(prior, spec)  # a bare AST node


def _in_family(policy: Policy, family: str) -> bool:
    cls = ProgramPolicy if family == "dsl" else TreePolicy
    return isinstance(policy, cls)


def _proj_kwargs(cfg: IppgConfig) -> dict:
    return dict(
        episodes_per_round=cfg.episodes_per_round,
        program_depth=cfg.program_depth,
        budget=cfg.budget,
        tree_depth=cfg.tree_depth,
        tree_min_leaf=cfg.tree_min_leaf,
        max_fit_rows=cfg.max_fit_rows,
    )


def _score(policy, env, cfg) -> float:
    mean, _ = episode_score(policy, env, cfg.eval_episodes, EVAL_SEED_BASE)
    return mean


def run_ippg(cfg: IppgConfig, prior=None) -> RunHistory:
    """Train for cfg.T lift-and-project iterations from a prior.

    The prior may be DSL text, a program AST, or any Policy. A prior already
    in the projection family is adopted as pi_0 directly; anything else (a
    neural policy, or a program when the family is trees) is first projected.
    Returns the full history; the final policy is pi_T, not the best-scoring
    iterate — the best is tracked separately.
    """
    env = make_env(cfg.env_id)
    if prior is None:
        prior = DEFAULT_PRIORS[cfg.env_id]
    start = _as_policy(prior, env.spec)

    ss = np.random.SeedSequence(cfg.seed)
    kids = ss.spawn(2 * cfg.T + 1)  # [init projection, (lift_t, project_t)...]

    t0 = time.perf_counter()
    demos = None
    if _in_family(start, cfg.family):
        pi, eps0 = start, 0.0
    else:
        rng0 = np.random.Generator(np.random.PCG64(kids[0]))
        rep = project(start, env, cfg.family, cfg.M, None, rng0, **_proj_kwargs(cfg))
        pi, demos, eps0 = rep.policy, rep.demos, rep.epsilon_hat
    score_pi = _score(pi, env, cfg)
    diags = [IterationDiagnostics(0, score_pi, score_pi, eps0, 0.0, time.perf_counter() - t0)]
    checkpoints = [policy_to_checkpoint(pi)]
    best_policy, best_score = pi, score_pi
    log.info("%s t=0 score %.2f", cfg.env_id, score_pi)

    for t in range(1, cfg.T + 1):
        t0 = time.perf_counter()
        if cfg.m == 0:
            # no-op lift: h == pi, and pi is its own projection
            diags.append(
                IterationDiagnostics(t, score_pi, score_pi, 0.0, 0.0, time.perf_counter() - t0)
            )
            checkpoints.append(policy_to_checkpoint(pi))
            continue
        try:
            lift_cfg = LiftConfig(lam=cfg.lam, episodes=cfg.m, eta=cfg.eta, ddpg=cfg.ddpg)
            h, stats = update_f(pi, env, lift_cfg, kids[2 * t - 1])
            rng_t = np.random.Generator(np.random.PCG64(kids[2 * t]))
            # seed the projection's local search with the current program:
            # the projected iterate should move only when the data says so
            warm = pi.ast if cfg.family == "dsl" else None
            rep = project(
                h, env, cfg.family, cfg.M, demos, rng_t, init=warm, **_proj_kwargs(cfg)
            )
            demos = rep.demos
            score_h = _score(h, env, cfg)
            pi, score_pi = rep.policy, _score(rep.policy, env, cfg)
            diags.append(
                IterationDiagnostics(
                    t,
                    score_pi,
                    score_h,
                    rep.epsilon_hat,
                    stats.sigma2,
                    time.perf_counter() - t0,
                )
            )
            log.info(
                "%s t=%d h %.2f -> pi %.2f eps %.3f sigma2 %.2e",
                cfg.env_id, t, score_h, score_pi, rep.epsilon_hat, stats.sigma2,
            )
        except Exception:
            # conservative fallback: keep pi_{t-1} and move on
            log.exception("iteration %d failed; keeping previous program", t)
            diags.append(
                IterationDiagnostics(
                    t, score_pi, score_pi, 0.0, 0.0, time.perf_counter() - t0, failed=True
                )
            )
        checkpoints.append(policy_to_checkpoint(pi))
        if score_pi > best_score:
            best_policy, best_score = pi, score_pi

    return RunHistory(diags, best_policy, best_score, pi, checkpoints)


# -- degenerate baselines ----------------------------------------------------


def _neural_then_project(cfg: IppgConfig, family: str) -> RunHistory:
    """Pure neural training followed by exactly one projection.

    The neural phase is the same residual learner with the program pinned to
    zero and lam=1, run for the whole T*m episode budget, so the baseline
    sees as much environment interaction as the full loop.
    """
    env = make_env(cfg.env_id)
    ss = np.random.SeedSequence(cfg.seed)
    lift_kid, proj_kid = ss.spawn(2)

    t0 = time.perf_counter()
    lift_cfg = LiftConfig(
        lam=1.0, episodes=cfg.T * cfg.m, eta=cfg.eta, ddpg=cfg.ddpg
    )
    h, stats = update_f(zero_policy(env.spec.action_dim), env, lift_cfg, lift_kid)
    rng = np.random.Generator(np.random.PCG64(proj_kid))
    rep = project(h, env, family, cfg.M, None, rng, **_proj_kwargs(cfg))
    score_h = _score(h, env, cfg)
    score_pi = _score(rep.policy, env, cfg)
    diag = IterationDiagnostics(
        1, score_pi, score_h, rep.epsilon_hat, stats.sigma2, time.perf_counter() - t0
    )
    log.info("%s %s baseline h %.2f -> pi %.2f", cfg.env_id, family, score_h, score_pi)
    checkpoint = policy_to_checkpoint(rep.policy)
    return RunHistory([diag], rep.policy, score_pi, rep.policy, [checkpoint])


def run_ndps_baseline(cfg: IppgConfig) -> RunHistory:
    return _neural_then_project(cfg, "dsl")


def run_viper_baseline(cfg: IppgConfig) -> RunHistory:
    return _neural_then_project(cfg, "tree")


def run_ddpg_only(cfg: IppgConfig) -> RunHistory:
    """The neural phase alone; the checkpoint is the raw actor network."""
    env = make_env(cfg.env_id)
    lift_kid = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    t0 = time.perf_counter()
    lift_cfg = LiftConfig(lam=1.0, episodes=cfg.T * cfg.m, eta=cfg.eta, ddpg=cfg.ddpg)
    h, stats = update_f(zero_policy(env.spec.action_dim), env, lift_cfg, lift_kid)
    actor = h.f  # lam=1 around a zero program: the residual is the policy
    score = _score(actor, env, cfg)
    diag = IterationDiagnostics(1, score, score, 0.0, stats.sigma2, time.perf_counter() - t0)
    return RunHistory([diag], actor, score, actor, [policy_to_checkpoint(actor)])


def run_prior_only(cfg: IppgConfig, prior=None) -> RunHistory:
    env = make_env(cfg.env_id)
    if prior is None:
        prior = DEFAULT_PRIORS[cfg.env_id]
    policy = _as_policy(prior, env.spec)
    t0 = time.perf_counter()
    score = _score(policy, env, cfg)
    diag = IterationDiagnostics(0, score, score, 0.0, 0.0, time.perf_counter() - t0)
    return RunHistory([diag], policy, score, policy, [policy_to_checkpoint(policy)])


# -- persistence -------------------------------------------------------------


def history_to_json(hist: RunHistory) -> str:
    return json.dumps(
        {
            "format": "run-history",
            "diagnostics": [asdict(d) for d in hist.diagnostics],
            "best_score": hist.best_score,
            "best_checkpoint": policy_to_checkpoint(hist.best_policy),
            "final_checkpoint": policy_to_checkpoint(hist.final_policy),
            "checkpoints": list(hist.checkpoints),
        },
        indent=2,
    )


def history_from_json(text: str, env_spec) -> RunHistory:
    blob = json.loads(text)
    assert blob.get("format") == "run-history", "not a run-history file"
    diags = [IterationDiagnostics(**d) for d in blob["diagnostics"]]
    return RunHistory(
        diags,
        policy_from_checkpoint(blob["best_checkpoint"], env_spec),
        blob["best_score"],
        policy_from_checkpoint(blob["final_checkpoint"], env_spec),
        list(blob["checkpoints"]),
    )


def save_run(hist: RunHistory, out_dir, stem: str) -> None:
    """Write run JSON plus per-iteration policy checkpoint files."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.run.json").write_text(history_to_json(hist))
    for d, text in zip(hist.diagnostics, hist.checkpoints):
        ext = "json" if text.lstrip().startswith("{") else "txt"
        (out / f"{stem}.pi_{d.t:02d}.{ext}").write_text(text)
