"""Built-in classic-control environments with deterministic seeding.

Two continuous-action tasks in their standard formulations:

  mountaincar  obs (position, velocity), action in [-1, 1]
               v' = v + 0.0015*a - 0.0025*cos(3p), p' = p + v'
               p in [-1.2, 0.6], v in [-0.07, 0.07], goal at p >= 0.45
               reward -0.1*a^2 per step, +100 on reaching the goal
               start p ~ U(-0.6, -0.4), v = 0; dt is a unit control period
  pendulum     obs (cos th, sin th, thdot), torque in [-2, 2]
               thdd = (3g/2l) sin th + 3u/(m l^2), g=10, m=1, l=1, dt=0.05
               thdot clipped to [-8, 8], th normalized to [-pi, pi]
               reward -(th^2 + 0.1*thdot^2 + 0.001*u^2) on the pre-step state
               start th ~ U(-pi, pi), thdot ~ U(-1, 1)

Both run a 200-step horizon. All randomness flows through numpy's PCG64
generator seeded explicitly at reset, so trajectories are bit-reproducible
across machines. Policies see fixed-length observation windows (k = 10,
padded with the initial observation), never bare states.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .policies import ObservationWindow, Policy

K_WINDOW = 10
HORIZON = 200


def make_rng(seed: int) -> np.random.Generator:
    """The project-wide PRNG: PCG64. One named generator everywhere."""
    assert 0 <= int(seed) < 2**64, f"seed out of uint64 range: {seed}"
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    dt: float
    horizon: int = HORIZON
    discount: float = 0.99
    k_window: int = K_WINDOW


@dataclass
class Transition:
    """One step: the window seen, the action pre- and post-clip, the outcome.

    policy_action is the noise-free policy output when exploration noise was
    injected during collection (equal to action otherwise); it is kept
    in-memory only and is not part of the serialized schema.
    """

    t: int
    window: ObservationWindow
    action: np.ndarray
    applied_action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    policy_action: np.ndarray | None = None


@dataclass
class Trajectory:
    transitions: list[Transition]
    seed: int
    total_reward: float

    def __len__(self) -> int:
        return len(self.transitions)


class Env:
    """Episode protocol: reset(seed) -> window, then step(action) until done.

    Stepping an inactive episode (before reset or after done) is a protocol
    error. Dynamics are deterministic; randomness enters only at reset.
    """

    spec: EnvSpec

    def __init__(self):
        self._state: np.ndarray | None = None
        self._window: ObservationWindow | None = None
        self._steps = 0
        self._active = False
        self._terminal = False

    # -- subclass hooks -------------------------------------------------
    def _draw_start(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _observe(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, applied: np.ndarray) -> tuple[float, bool]:
        """Update self._state; return (reward, reached_terminal_state)."""
        raise NotImplementedError

    # -- protocol --------------------------------------------------------
    @property
    def state(self) -> np.ndarray:
        assert self._state is not None, "env has not been reset"
        return self._state.copy()

    @property
    def steps(self) -> int:
        return self._steps

    @property
    def active(self) -> bool:
        return self._active

    @property
    def last_terminal(self) -> bool:
        """True when the episode ended in a terminal state rather than at the
        horizon; value bootstrapping cuts off only at true terminals."""
        return self._terminal

    def reset(self, seed: int) -> ObservationWindow:
        return self.reset_to(self._draw_start(make_rng(seed)))

    def reset_to(self, state) -> ObservationWindow:
        """Start an episode at an exact state (debugging and oracle tests)."""
        self._state = np.asarray(state, dtype=np.float64).copy()
        self._steps = 0
        self._active = True
        self._terminal = False
        self._window = ObservationWindow.initial(
            self._observe(), self.spec.k_window, self.spec.dt
        )
        return self._window

    def step(self, action) -> tuple[ObservationWindow, float, bool]:
        if not self._active:
            raise RuntimeError(f"{self.spec.env_id}: step on an inactive episode")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        assert action.shape == (self.spec.action_dim,), "bad action shape"
        if not np.all(np.isfinite(action)):
            raise ValueError(f"{self.spec.env_id}: non-finite action {action}")
        applied = np.clip(action, self.spec.action_low, self.spec.action_high)
        reward, terminal = self._advance(applied)
        self._steps += 1
        self._terminal = terminal
        done = terminal or self._steps >= self.spec.horizon
        self._active = not done
        self._window = self._window.advanced(self._observe())
        return self._window, float(reward), done


class MountainCar(Env):
    POWER = 0.0015
    GRAVITY = 0.0025
    P_MIN, P_MAX = -1.2, 0.6
    V_MIN, V_MAX = -0.07, 0.07
    GOAL = 0.45

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec(
            env_id="mountaincar",
            obs_dim=2,
            action_dim=1,
            action_low=np.array([-1.0]),
            action_high=np.array([1.0]),
            dt=1.0,
        )

    def _draw_start(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def _observe(self):
        return self._state.copy()

    def _advance(self, applied):
        p, v = self._state
        a = float(applied[0])
        v = v + self.POWER * a - self.GRAVITY * math.cos(3.0 * p)
        v = min(max(v, self.V_MIN), self.V_MAX)
        p = p + v
        p = min(max(p, self.P_MIN), self.P_MAX)
        if p <= self.P_MIN and v < 0.0:
            v = 0.0  # inelastic left wall
        self._state = np.array([p, v])
        goal = p >= self.GOAL
        reward = -0.1 * a * a + (100.0 if goal else 0.0)
        return reward, goal


def angle_normalize(x: float) -> float:
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


class Pendulum(Env):
    G = 10.0
    M = 1.0
    L = 1.0
    DT = 0.05
    MAX_SPEED = 8.0
    MAX_TORQUE = 2.0

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec(
            env_id="pendulum",
            obs_dim=3,
            action_dim=1,
            action_low=np.array([-2.0]),
            action_high=np.array([2.0]),
            dt=self.DT,
        )

    def _draw_start(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def _observe(self):
        th, thdot = self._state
        return np.array([math.cos(th), math.sin(th), thdot])

    def _advance(self, applied):
        th, thdot = self._state
        u = float(applied[0])
        # cost is charged on the pre-step state, standard formulation
        cost = angle_normalize(th) ** 2 + 0.1 * thdot**2 + 0.001 * u * u
        thdot = thdot + (
            3.0 * self.G / (2.0 * self.L) * math.sin(th)
            + 3.0 / (self.M * self.L**2) * u
        ) * self.DT
        thdot = min(max(thdot, -self.MAX_SPEED), self.MAX_SPEED)
        th = angle_normalize(th + thdot * self.DT)
        self._state = np.array([th, thdot])
        return -cost, False


ENV_IDS = ("mountaincar", "pendulum")


def make_env(env_id: str) -> Env:
    if env_id == "mountaincar":
        return MountainCar()
    if env_id == "pendulum":
        return Pendulum()
    raise ValueError(f"unknown env {env_id!r}: expected one of {ENV_IDS}")


def rollout(env: Env, policy: Policy, seed: int, noise=None) -> Trajectory:
    """Run one episode. Exploration noise, if given, is added to the policy
    action before the env clips it; both the noisy and the noise-free actions
    are recorded on each transition."""
    window = env.reset(seed)
    policy.reset()
    transitions = []
    total = 0.0
    done = False
    t = 0
    while not done:
        a_pol = np.asarray(policy.act(window), dtype=np.float64).reshape(-1)
        a = a_pol + noise.sample() if noise is not None else a_pol
        next_window, reward, done = env.step(a)
        applied = np.clip(a, env.spec.action_low, env.spec.action_high)
        transitions.append(
            Transition(
                t=t,
                window=window,
                action=a,
                applied_action=applied,
                reward=reward,
                next_obs=next_window.newest.copy(),
                done=done,
                policy_action=a_pol,
            )
        )
        total += reward
        window = next_window
        t += 1
    return Trajectory(transitions=transitions, seed=seed, total_reward=total)


def episode_score(
    policy: Policy, env: Env, n_episodes: int, seed_base: int
) -> tuple[float, float]:
    """Mean and std of total reward over noise-free episodes with seeds
    seed_base .. seed_base + n_episodes - 1."""
    assert n_episodes >= 1
    totals = [
        rollout(env, policy, seed_base + i).total_reward for i in range(n_episodes)
    ]
    return float(np.mean(totals)), float(np.std(totals))


# -- trajectory serialization (JSON lines) ------------------------------


def save_trajectories(trajectories, path) -> None:
    """One transition per line: t, obs (the newest observation the action
    responded to), action, applied_action, reward, done. Episodes are
    separated implicitly by t restarting at 0."""
    with open(path, "w") as fh:
        for traj in trajectories:
            for tr in traj.transitions:
                fh.write(
                    json.dumps(
                        {
                            "t": tr.t,
                            "obs": tr.window.newest.tolist(),
                            "action": tr.action.tolist(),
                            "applied_action": tr.applied_action.tolist(),
                            "reward": tr.reward,
                            "done": tr.done,
                        }
                    )
                    + "\n"
                )


def load_transition_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
