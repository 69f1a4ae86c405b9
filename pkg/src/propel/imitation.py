"""Projection onto the programmatic families.

DAgger-style imitation against an oracle policy: round 0 rolls the oracle
out and fits the family to its labels; every later round rolls out the
current fit, labels the visited states with the oracle, aggregates, and
refits. Squared-loss imitation makes the result the (approximate) nearest
point of the family under the empirical L2 norm, and the residual distance
is always reported on held-out trajectories the fits never saw.

The DSL backend synthesizes guarded PID programs in two stages: a greedy
structure search (single PID/constant leaf versus the best atomic-predicate
split, recursing to a depth cap), then coordinate refinement of the winning
structure's parameters. Predicate thresholds admit an exact 1-D refit: with
every other parameter frozen, the program is evaluated once with the
predicate forced true and once forced false, and a prefix scan over the
sorted sensor values yields the loss of every candidate threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .dsl import (
    AtomicPredicate,
    And,
    ConstAction,
    IfThenElse,
    LibCall,
    Not,
    Or,
    PidConfig,
    ProgramPolicy,
    eval_bool_batch,
    eval_program_batch,
    extract_params,
    inject_params,
    pid_response_batch,
)
from .envs import Env, rollout
from .policies import Policy, StateSampleSet, empirical_distance
from .trees import TreePolicy, fit_tree

log = logging.getLogger(__name__)

HOLDOUT_EVERY = 5  # trajectory ids with id % 5 == 4 are never fitted
_MIN_SIDE = 8  # fewest demos a predicate may route to one side
_N_QUANTILES = 21
_GOLDEN_ITERS = 14


class DemoSet:
    """Aggregated (window, oracle action) pairs with per-pair provenance.

    Append-only: rounds only ever add rows. Labels are rewritten in place by
    relabel() when a later projection reuses old states under a new oracle.
    """

    def __init__(self, k: int, obs_dim: int, action_dim: int, dt: float):
        self.k = int(k)
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.dt = float(dt)
        self.windows = np.zeros((0, k, obs_dim))
        self.actions = np.zeros((0, action_dim))
        self.traj_ids = np.zeros(0, dtype=np.int64)
        self.rounds = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def next_traj_id(self) -> int:
        return int(self.traj_ids.max()) + 1 if len(self.traj_ids) else 0

    def append(self, windows, actions, traj_id: int, round_idx: int) -> None:
        windows = np.asarray(windows, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        assert windows.shape[1:] == (self.k, self.obs_dim), "window shape mismatch"
        assert actions.shape == (len(windows), self.action_dim)
        self.windows = np.concatenate([self.windows, windows])
        self.actions = np.concatenate([self.actions, actions])
        self.traj_ids = np.concatenate(
            [self.traj_ids, np.full(len(windows), traj_id, dtype=np.int64)]
        )
        self.rounds = np.concatenate(
            [self.rounds, np.full(len(windows), round_idx, dtype=np.int64)]
        )

    def relabel(self, oracle: Policy) -> None:
        """Overwrite every label with the oracle's action on the stored window."""
        if len(self):
            self.actions = np.asarray(
                oracle.act_batch(self.windows, self.dt), dtype=np.float64
            )

    def train_mask(self) -> np.ndarray:
        return self.traj_ids % HOLDOUT_EVERY != HOLDOUT_EVERY - 1

    def subset(self, mask) -> "DemoSet":
        out = DemoSet(self.k, self.obs_dim, self.action_dim, self.dt)
        out.windows = self.windows[mask]
        out.actions = self.actions[mask]
        out.traj_ids = self.traj_ids[mask]
        out.rounds = self.rounds[mask]
        return out

    def heldout_samples(self) -> StateSampleSet:
        mask = ~self.train_mask()
        return StateSampleSet(self.windows[mask], self.traj_ids[mask], self.dt)


def save_demos(demos: DemoSet, path) -> None:
    """JSON lines: a metadata header, then one (window, action) pair per line."""
    with open(path, "w") as fh:
        meta = {
            "k": demos.k,
            "obs_dim": demos.obs_dim,
            "action_dim": demos.action_dim,
            "dt": demos.dt,
        }
        fh.write(json.dumps(meta) + "\n")
        for w, a, tid, rnd in zip(
            demos.windows, demos.actions, demos.traj_ids, demos.rounds
        ):
            row = {
                "trajectory": int(tid),
                "round": int(rnd),
                "window": w.tolist(),
                "action": a.tolist(),
            }
            fh.write(json.dumps(row) + "\n")


def load_demos(path) -> DemoSet:
    with open(path) as fh:
        meta = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    out = DemoSet(meta["k"], meta["obs_dim"], meta["action_dim"], meta["dt"])
    if rows:
        out.windows = np.array([r["window"] for r in rows], dtype=np.float64)
        out.actions = np.array([r["action"] for r in rows], dtype=np.float64)
        out.traj_ids = np.array([r["trajectory"] for r in rows], dtype=np.int64)
        out.rounds = np.array([r["round"] for r in rows], dtype=np.int64)
    return out


def measure_residual(pi: Policy, h: Policy, heldout: StateSampleSet) -> float:
    """Projection residual: distance between the projected policy and the
    oracle it imitated, on states no fit ever saw."""
    return empirical_distance(pi, h, heldout)


# -- the projection operator ---------------------------------------------


@dataclass
class ProjectionReport:
    policy: Policy
    round_rmse: list  # fit RMSE on the training split after each refit
    epsilon_hat: float  # held-out distance of the returned policy to the oracle
    sizes: list  # aggregated dataset size after each round
    fallback_constant: bool  # nothing beat the constant predictor
    demos: DemoSet  # the aggregated set, reusable by the next projection


def project(
    h: Policy,
    env: Env,
    family: str,
    M: int,
    carried: DemoSet | None,
    rng,
    *,
    episodes_per_round: int = 10,
    program_depth: int = 3,
    budget: int = 1000,
    tree_depth: int = 6,
    tree_min_leaf: int = 8,
    max_fit_rows: int = 12_000,
    init=None,
) -> ProjectionReport:
    """Project the oracle h onto a programmatic family by DAgger.

    Carried demos from earlier projections are re-labeled by the current h
    before reuse, then M+1 fits are interleaved with rollouts: the oracle's
    own in round 0, the current fit's in rounds 1..M. Returns the final fit
    (not the best round), with per-round diagnostics. For the dsl family an
    `init` program seeds round 0's structure search, and each later round is
    seeded with its predecessor's fit.
    """
    assert M >= 1, "projection needs at least one learner round"
    assert family in ("dsl", "tree"), f"unknown family {family!r}"
    assert episodes_per_round >= 1
    assert (M + 1) * episodes_per_round >= HOLDOUT_EVERY, (
        "too few rollouts to reserve a held-out trajectory"
    )
    spec = env.spec
    demos = carried
    if demos is None:
        from .envs import K_WINDOW

        demos = DemoSet(K_WINDOW, spec.obs_dim, spec.action_dim, spec.dt)
    demos.relabel(h)

    sizes, rmses = [], []
    pi, fallback = None, False
    prev = init if family == "dsl" else None
    for rnd in range(M + 1):
        behavior = h if rnd == 0 else pi
        for _ in range(episodes_per_round):
            traj = rollout(env, behavior, int(rng.integers(2**63)))
            windows = np.stack([tr.window.samples for tr in traj.transitions])
            labels = np.asarray(h.act_batch(windows, spec.dt), dtype=np.float64)
            demos.append(windows, labels, demos.next_traj_id, rnd)
        sizes.append(len(demos))
        pi, fallback = _fit_family(
            family,
            demos,
            spec,
            rng,
            program_depth=program_depth,
            budget=budget,
            tree_depth=tree_depth,
            tree_min_leaf=tree_min_leaf,
            max_fit_rows=max_fit_rows,
            init=prev,
        )
        rmses.append(_train_rmse(pi, demos))
        if family == "dsl":
            prev = pi.ast
    eps = measure_residual(pi, h, demos.heldout_samples())
    return ProjectionReport(pi, rmses, eps, sizes, fallback, demos)


def _fit_family(
    family,
    demos,
    spec,
    rng,
    *,
    program_depth,
    budget,
    tree_depth,
    tree_min_leaf,
    max_fit_rows,
    init=None,
):
    train = demos.subset(demos.train_mask())
    if len(train) > max_fit_rows:
        keep = np.sort(rng.choice(len(train), size=max_fit_rows, replace=False))
        train = train.subset(keep)
    if family == "tree":
        tree = fit_tree(
            train.windows[:, -1, :],
            train.actions,
            max_depth=tree_depth,
            min_leaf=tree_min_leaf,
        )
        return TreePolicy(tree, spec), tree.n_leaves == 1
    ast = synthesize_dsl(
        train, max_depth=program_depth, budget=budget, rng=rng, init=init
    )
    return ProgramPolicy(ast, spec), isinstance(ast, ConstAction)


def _train_rmse(pi: Policy, demos: DemoSet) -> float:
    mask = demos.train_mask()
    pred = pi.act_batch(demos.windows[mask], demos.dt)
    d = pred - demos.actions[mask]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


# -- DSL synthesis: structure stage --------------------------------------


def _quantile_grid(vals: np.ndarray) -> np.ndarray:
    return np.unique(np.quantile(vals, np.linspace(0.0, 1.0, _N_QUANTILES)))


def _const_sse(Y: np.ndarray) -> float:
    m = Y.mean(axis=0)
    return float(np.sum((Y - m) ** 2))


def _fit_const_leaf(Y):
    c = Y.mean(axis=0)
    return ConstAction(tuple(float(v) for v in c)), _const_sse(Y)


def _pid_design(X: np.ndarray, sensor: int, target: float, dt: float) -> np.ndarray:
    """Regressors multiplying (kp, ki, kd) for a fixed sensor and setpoint."""
    e = target - X[:, :, sensor]
    return np.stack(
        [e[:, -1], dt * e.sum(axis=1), (e[:, -1] - e[:, -2]) / dt], axis=1
    )


def _fit_pid_exact(X, y, dt, sensor, output_index=0):
    """Closed-form joint fit of setpoint and gains for one sensor.

    The response is linear in (1, x_last, sum x, slope) with intercept
    c * (kp + ki*dt*k), so one least-squares solve recovers everything; the
    setpoint only needs back-division. When the gain combination in front
    of c vanishes (a pure-derivative controller) the setpoint is pinned to
    the sensor median and the gains are refit with it fixed.
    """
    x = X[:, :, sensor]
    k = x.shape[1]
    ones = np.ones(len(x))
    A = np.stack([ones, -x[:, -1], -x.sum(axis=1), (x[:, -2] - x[:, -1]) / dt], axis=1)
    w, *_ = np.linalg.lstsq(A, y, rcond=None)
    kp, ki, kd = float(w[1]), float(w[2]) / dt, float(w[3])
    denom = kp + ki * dt * k
    span = max(float(x.max() - x.min()), 1.0)
    if abs(denom) > 1e-9 * max(abs(kp), abs(ki * dt * k), 1.0):
        c = float(w[0]) / denom
    else:
        c = np.inf
    if not abs(c - float(x[:, -1].mean())) <= 10.0 * span:
        c = float(np.median(x[:, -1]))
        A2 = _pid_design(X, sensor, c, dt)
        g, *_ = np.linalg.lstsq(A2, y, rcond=None)
        kp, ki, kd = float(g[0]), float(g[1]), float(g[2])
    cfg = PidConfig(sensor, c, kp, ki, kd, output_index)
    r = pid_response_batch(cfg, X, dt) - y
    return cfg, float(r @ r)


def _fit_pid_leaf(X, Y, dt):
    # scalar controller; every sensor gets an exact joint fit
    y = Y[:, 0]
    best = None
    for j in range(X.shape[2]):
        cfg, sse = _fit_pid_exact(X, y, dt, j)
        if best is None or sse < best[1] - 1e-12:
            best = (cfg, sse)
    return LibCall(best[0]), best[1]


def _best_leaf(X, Y, dt):
    leaf, sse = _fit_const_leaf(Y)
    if Y.shape[1] == 1:  # PID leaves drive a single actuator
        pid, pid_sse = _fit_pid_leaf(X, Y, dt)
        if pid_sse < sse - 1e-12:
            return pid, pid_sse
    return leaf, sse


def _best_split(newest, Y):
    """Best atomic predicate by summed constant-fit SSE of the two sides."""
    n = len(newest)
    best = None
    for j in range(newest.shape[1]):
        vals = newest[:, j]
        for thr in _quantile_grid(vals):
            mask = vals < thr
            nl = int(mask.sum())
            if nl < _MIN_SIDE or n - nl < _MIN_SIDE:
                continue
            sse = _const_sse(Y[mask]) + _const_sse(Y[~mask])
            if best is None or sse < best[0] - 1e-12:
                best = (sse, j, float(thr))
    return best


def _grow_program(X, Y, dt, depth, max_depth):
    leaf, leaf_sse = _best_leaf(X, Y, dt)
    if depth >= max_depth or len(X) < 2 * _MIN_SIDE:
        return leaf, leaf_sse
    split = _best_split(X[:, -1, :], Y)
    if split is None:
        return leaf, leaf_sse
    _, j, thr = split
    mask = X[:, -1, j] < thr
    then, sse_t = _grow_program(X[mask], Y[mask], dt, depth + 1, max_depth)
    other, sse_o = _grow_program(X[~mask], Y[~mask], dt, depth + 1, max_depth)
    if sse_t + sse_o < leaf_sse - 1e-12:
        node = IfThenElse(AtomicPredicate(j, "<", thr), then, other)
        return node, sse_t + sse_o
    return leaf, leaf_sse


# -- DSL synthesis: parameter stage --------------------------------------


def _param_meta(ast, newest, Y):
    """Per-parameter (kind, lo, hi, sensor, op) in extract_params order."""
    lows = newest.min(axis=0)
    highs = newest.max(axis=0)
    y_lo, y_hi = float(Y.min()), float(Y.max())
    y_pad = 0.5 * max(y_hi - y_lo, 1.0)
    out = []

    def sensor_range(j):
        lo, hi = float(lows[j]), float(highs[j])
        if hi - lo < 1e-9:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    def walk_bool(b):
        if isinstance(b, AtomicPredicate):
            lo, hi = sensor_range(b.sensor)
            out.append(("threshold", lo, hi, b.sensor, b.op))
        elif isinstance(b, (And, Or)):
            for t in b.terms:
                walk_bool(t)
        elif isinstance(b, Not):
            walk_bool(b.term)

    def walk(node):
        if isinstance(node, ConstAction):
            for _ in node.values:
                out.append(("const", y_lo - y_pad, y_hi + y_pad, None, None))
        elif isinstance(node, IfThenElse):
            walk_bool(node.cond)
            walk(node.then)
            walk(node.other)
        elif isinstance(node, LibCall):
            lo, hi = sensor_range(node.pid.sensor)
            span = 0.25 * (hi - lo)
            out.append(("target", lo - span, hi + span, node.pid.sensor, None))
            for g in (node.pid.kp, node.pid.ki, node.pid.kd):
                s = max(2.0, 2.0 * abs(g))
                out.append(("gain", g - s, g + s, None, None))
        else:  # Combine
            if node.op == "scale":
                s = max(1.0, 2.0 * abs(node.factor))
                out.append(("scale", node.factor - s, node.factor + s, None, None))
            for c in node.children:
                walk(c)

    walk(ast)
    return out


def _golden_min(fun, lo, hi):
    """Golden-section probe of a 1-D slice; returns the best point seen."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for _ in range(_GOLDEN_ITERS - 2):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
            x, f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
            x, f = d, fd
        if f < best_f:
            best_x, best_f = x, f
    return best_x, best_f


def _refit_threshold(values, idx, sensor, op, X, row_sse):
    """Exact 1-D threshold refit.

    Freezing every other parameter, force the predicate true and false once
    each; a prefix scan over the sorted sensor column then scores every
    candidate midpoint in one pass.
    """
    big = 1e18
    v_true = values.copy()
    v_false = values.copy()
    v_true[idx] = big if op == "<" else -big
    v_false[idx] = -big if op == "<" else big
    err_t = row_sse(v_true)
    err_f = row_sse(v_false)
    vals = X[:, -1, sensor]
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    # cut after position i: rows 0..i on the low side, the rest high
    pre_t = np.cumsum(err_t[order])
    pre_f = np.cumsum(err_f[order])
    distinct = np.flatnonzero(sv[:-1] < sv[1:])
    if len(distinct) == 0:
        return None
    if op == "<":
        sse = pre_t[distinct] + (pre_f[-1] - pre_f[distinct])
    else:
        sse = pre_f[distinct] + (pre_t[-1] - pre_t[distinct])
    i = int(np.argmin(sse))
    thr = 0.5 * (sv[distinct[i]] + sv[distinct[i] + 1])
    return float(thr), float(sse[i])


def _polish_leaves(ast, X, Y, dt):
    """Closed-form refit under the final routing.

    Each region gets the better of an exact constant or exact PID leaf, and
    a guard collapses to a single leaf when one matches its two sides —
    guards grown under a stale threshold otherwise survive as dead weight.
    """
    newest = X[:, -1, :]

    def walk(node, mask):
        rows = np.flatnonzero(mask)
        if isinstance(node, IfThenElse):
            m = eval_bool_batch(node.cond, newest)
            then, sse_t = walk(node.then, mask & m)
            other, sse_o = walk(node.other, mask & ~m)
            kept = IfThenElse(node.cond, then, other)
            if len(rows) == 0:
                return kept, 0.0
            leaf, leaf_sse = _best_leaf(X[rows], Y[rows], dt)
            if leaf_sse <= sse_t + sse_o + 1e-12:
                return leaf, leaf_sse
            return kept, sse_t + sse_o
        if len(rows) == 0:
            return node, 0.0
        if isinstance(node, (ConstAction, LibCall)) and (
            isinstance(node, ConstAction) or Y.shape[1] == 1
        ):
            return _best_leaf(X[rows], Y[rows], dt)
        pred = eval_program_batch(node, X[rows], dt, Y.shape[1])
        return node, float(np.sum((pred - Y[rows]) ** 2))

    out, _ = walk(ast, np.ones(len(X), dtype=bool))
    return out


def synthesize_dsl(
    data: DemoSet, max_depth: int = 3, budget: int = 1000, rng=None, init=None
):
    """Fit a guarded-PID program to the demo set.

    Stage 1 grows a structure greedily: each node takes the better of its
    best single leaf (constant, or a per-sensor closed-form PID fit) and
    its best atomic split, recursing to max_depth. Stage 2 runs coordinate refinement over the structure's
    parameter vector — exact scans for thresholds, golden-section steps for
    the smooth parameters, one jittered restart — and finishes with a
    closed-form leaf polish. `budget` caps the number of full-program loss
    evaluations in stage 2; exhausting it returns the best program so far.

    `init` seeds the search with an existing structure (typically the
    previous fit over a smaller aggregate). It is refined under the same
    budget and competes with the freshly grown candidate on training SSE,
    winning ties — greedy growth redraws the guard skeleton from scratch
    every call, and on data a small program cannot fully explain that
    lottery is the dominant source of fit-to-fit variance.
    """
    assert len(data) > 0, "cannot synthesize from an empty demo set"
    if rng is None:
        rng = np.random.default_rng(0)
    X, Y, dt = data.windows, data.actions, data.dt
    ast, _ = _grow_program(X, Y, dt, 0, max_depth)
    best, best_l = _refine(ast, X, Y, dt, budget, rng)
    if init is not None:
        warm, warm_l = _refine(init, X, Y, dt, budget, rng)
        if warm_l <= best_l:
            best = warm
    return best


def _refine(ast, X, Y, dt, budget, rng):
    """Parameter refinement + leaf polish of a fixed structure; returns the
    best program found and its training SSE."""
    evals = [0]

    def row_sse(values):
        evals[0] += 1
        p = eval_program_batch(inject_params(ast, values), X, dt, Y.shape[1])
        return np.sum((p - Y) ** 2, axis=1)

    def loss(values):
        return float(np.sum(row_sse(values)))

    meta = _param_meta(ast, X[:, -1, :], Y)
    params = extract_params(ast)
    assert len(meta) == len(params.values), "bounds walk out of step with extract"
    best_v = params.values.copy()
    best_l = loss(best_v)
    out_of_budget = False
    for restart in range(2):
        if out_of_budget:
            break
        v = best_v.copy()
        if restart:
            for i, (kind, lo, hi, _, _) in enumerate(meta):
                if kind != "threshold":
                    v[i] = float(
                        np.clip(v[i] + 0.05 * (hi - lo) * rng.standard_normal(), lo, hi)
                    )
        cur_l = loss(v)
        for _ in range(2):  # coordinate sweeps
            improved = False
            for i, (kind, lo, hi, sensor, op) in enumerate(meta):
                if evals[0] + _GOLDEN_ITERS > budget:
                    log.warning(
                        "synthesis budget exhausted after %d evaluations", evals[0]
                    )
                    out_of_budget = True
                    break
                if kind == "threshold":
                    hit = _refit_threshold(v, i, sensor, op, X, row_sse)
                    if hit is not None and hit[1] < cur_l - 1e-12:
                        v[i], cur_l = hit[0], hit[1]
                        improved = True
                else:

                    def slice_loss(x, i=i):
                        vv = v.copy()
                        vv[i] = x
                        return loss(vv)

                    x, l = _golden_min(slice_loss, lo, hi)
                    if l < cur_l - 1e-12:
                        v[i], cur_l = x, l
                        improved = True
            if out_of_budget or not improved:
                break
        if cur_l < best_l:
            best_v, best_l = v.copy(), cur_l
    best = inject_params(ast, best_v)
    # alternate exact leaf refits with exact threshold rescans: thresholds
    # chosen under stale leaf params can strand rows on the wrong side, and
    # one polish pass is not a fixed point
    for _ in range(3):
        polished = _polish_leaves(best, X, Y, dt)
        p_pred = eval_program_batch(polished, X, dt, Y.shape[1])
        p_l = float(np.sum((p_pred - Y) ** 2))
        if p_l <= best_l:
            best, best_l = polished, p_l
        v = extract_params(best).values.copy()
        meta = _param_meta(best, X[:, -1, :], Y)

        def row_sse(values, node=best):
            p = eval_program_batch(inject_params(node, values), X, dt, Y.shape[1])
            return np.sum((p - Y) ** 2, axis=1)

        moved = False
        for i, (kind, _lo, _hi, sensor, op) in enumerate(meta):
            if kind != "threshold":
                continue
            hit = _refit_threshold(v, i, sensor, op, X, row_sse)
            if hit is not None and hit[1] < best_l - 1e-12:
                v[i], best_l = hit[0], hit[1]
                moved = True
        if moved:
            best = inject_params(best, v)
        else:
            break
    return best, best_l
