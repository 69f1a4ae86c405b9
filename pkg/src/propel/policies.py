"""Policy-space primitives: observation windows, policy handles, mixed policies.

Everything downstream (environments, DSL programs, trees, neural nets, the
lift-project loop) speaks one protocol: a policy maps an ObservationWindow to
a flat float64 action vector and exposes a reset hook for episode boundaries.
Mixed policies live in the same vector space as their parts, h = pi + lam * f,
with no clipping anywhere inside the policy; only environments clip.

Distances between policies are empirical L2 norms over windows sampled from
rollouts, which is the measurable surrogate used for the projection residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ObservationWindow:
    """Fixed-length history of raw observations, oldest first.

    samples has shape (k, obs_dim) with k >= 2 so that discrete derivatives
    are defined. dt is the control period in seconds used by integral and
    derivative terms downstream.
    """

    samples: np.ndarray
    dt: float

    def __post_init__(self):
        assert self.samples.ndim == 2, "window samples must be (k, obs_dim)"
        assert self.samples.shape[0] >= 2, "window needs at least 2 samples"
        assert self.dt > 0.0, "dt must be positive"

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def newest(self) -> np.ndarray:
        return self.samples[-1]

    @staticmethod
    def initial(obs: np.ndarray, k: int, dt: float) -> "ObservationWindow":
        """Window at episode start: the initial observation repeated k times."""
        obs = np.asarray(obs, dtype=np.float64).reshape(-1)
        return ObservationWindow(np.tile(obs, (k, 1)), dt)

    def advanced(self, obs: np.ndarray) -> "ObservationWindow":
        """New window with obs appended and the oldest sample dropped."""
        obs = np.asarray(obs, dtype=np.float64).reshape(1, -1)
        assert obs.shape[1] == self.obs_dim
        return ObservationWindow(np.vstack([self.samples[1:], obs]), self.dt)


class Policy:
    """Evaluable map ObservationWindow -> action vector, plus a reset hook."""

    def act(self, window: ObservationWindow) -> np.ndarray:
        raise NotImplementedError

    def reset(self) -> None:
        """Episode-boundary hook. No-op for stateless policies."""

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        """Vectorized evaluation over stacked windows (n, k, obs_dim).

        Fallback loops over act(); subclasses override with array code where
        fitting performance matters. Only valid for stateless policies.
        """
        return np.stack([self.act(ObservationWindow(w, dt)) for w in samples])


class ConstantPolicy(Policy):
    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64).reshape(-1)

    def act(self, window: ObservationWindow) -> np.ndarray:
        return self.action.copy()

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        return np.tile(self.action, (samples.shape[0], 1))


def zero_policy(action_dim: int) -> ConstantPolicy:
    return ConstantPolicy(np.zeros(action_dim))


class MixedPolicy(Policy):
    """h = pi + lam * f in the shared function space. Unclipped by design."""

    def __init__(self, pi: Policy, f: Policy, lam: float):
        assert np.isfinite(lam), "lam must be finite"
        self.pi = pi
        self.f = f
        self.lam = float(lam)

    def act(self, window: ObservationWindow) -> np.ndarray:
        return evaluate_mixed(self, window)

    def reset(self) -> None:
        self.pi.reset()
        self.f.reset()

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        return self.pi.act_batch(samples, dt) + self.lam * self.f.act_batch(samples, dt)


def evaluate_mixed(h: MixedPolicy, window: ObservationWindow) -> np.ndarray:
    """Evaluate h(w) = pi(w) + lam * f(w), rejecting non-finite parts by name."""
    a_pi = np.asarray(h.pi.act(window), dtype=np.float64)
    if not np.all(np.isfinite(a_pi)):
        raise ValueError("mixed policy: pi produced a non-finite action")
    a_f = np.asarray(h.f.act(window), dtype=np.float64)
    if not np.all(np.isfinite(a_f)):
        raise ValueError("mixed policy: f produced a non-finite action")
    return a_pi + h.lam * a_f


@dataclass
class StateSampleSet:
    """Windows collected from rollouts, tagged by source trajectory.

    samples has shape (n, k, obs_dim); trajectory_ids has shape (n,) and is
    non-decreasing, marking boundaries at which stateful policies are reset
    during sequential evaluation.
    """

    samples: np.ndarray
    trajectory_ids: np.ndarray
    dt: float

    def __post_init__(self):
        assert self.samples.ndim == 3
        assert len(self.trajectory_ids) == len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


def _eval_sequential(policy: Policy, s: StateSampleSet) -> np.ndarray:
    out = []
    prev_tid = None
    for window, tid in zip(s.samples, s.trajectory_ids):
        if tid != prev_tid:
            policy.reset()
            prev_tid = tid
        out.append(policy.act(ObservationWindow(window, s.dt)))
    return np.stack(out)


def empirical_distance(a: Policy, b: Policy, s: StateSampleSet) -> float:
    """Empirical L2 distance sqrt(mean_w |a(w) - b(w)|^2) over the sample set.

    Both policies are reset at each trajectory boundary and evaluated in
    recorded order, so the estimate is well-defined for stateful policies.
    """
    assert len(s) > 0, "empirical distance needs a non-empty sample set"
    va = _eval_sequential(a, s)
    vb = _eval_sequential(b, s)
    return float(np.sqrt(np.mean(np.sum((va - vb) ** 2, axis=1))))
