"""The neural lift: DDPG on a residual actor around a frozen program.

update_f holds the programmatic policy pi fixed and trains a residual f so
that the mixed policy h = pi + lam * f improves the true return. The critic
models the mixed policy's value but is fed only the residual action along
with the observation; pi's contribution is a deterministic function of the
observation, so nothing is lost. The lam factor multiplies the actor
gradient explicitly, matching the chain rule through the mixed action.

Exploration is an Ornstein-Uhlenbeck process on the residual action. A
divergence guard aborts the update when any parameter passes 1e6 in
magnitude and returns the best intermediate residual by training return.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import Env, make_rng
from .mlp import Adam, Mlp, MlpPolicy, grad_norm, soft_update
from .policies import MixedPolicy, Policy

PARAM_ABS_LIMIT = 1e6


@dataclass
class DdpgConfig:
    hidden: tuple = (64, 64)
    buffer_size: int = 100_000
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    ou_theta: float = 0.15
    ou_sigma: float = 0.2
    warmup: int = 500  # env steps collected before updates begin
    updates_per_step: int = 1  # gradient steps per env step


@dataclass
class LiftConfig:
    lam: float = 0.3
    episodes: int = 20  # m, episodes of residual training per lift
    eta: float | None = None  # mirror step size; defaults to ddpg.actor_lr
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)


class OuNoise:
    """x' = x + theta * (mu - x) + sigma * N(0, 1), reset to mu per episode."""

    def __init__(self, dim: int, theta: float, sigma: float, rng):
        self.mu = np.zeros(dim)
        self.theta = theta
        self.sigma = sigma
        self.rng = rng
        self.x = self.mu.copy()

    def reset(self) -> None:
        self.x = self.mu.copy()

    def sample(self) -> np.ndarray:
        self.x = (
            self.x
            + self.theta * (self.mu - self.x)
            + self.sigma * self.rng.standard_normal(len(self.x))
        )
        return self.x.copy()


class ReplayBuffer:
    """Fixed-capacity ring of (obs, residual action, reward, next obs,
    terminal). Minibatches are drawn uniformly without replacement."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, action_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity)
        self._n = 0
        self._head = 0

    def __len__(self) -> int:
        return self._n

    def push(self, obs, act, rew, next_obs, terminal) -> None:
        i = self._head
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.terminal[i] = 1.0 if terminal else 0.0
        self._head = (i + 1) % self.capacity
        self._n = min(self._n + 1, self.capacity)

    def sample(self, batch_size: int, rng) -> dict:
        assert batch_size <= self._n, "not enough transitions buffered"
        idx = rng.choice(self._n, size=batch_size, replace=False)
        return {
            "obs": self.obs[idx],
            "act": self.act[idx],
            "rew": self.rew[idx],
            "next_obs": self.next_obs[idx],
            "terminal": self.terminal[idx],
        }


@dataclass
class DdpgState:
    actor: Mlp
    critic: Mlp
    target_actor: Mlp
    target_critic: Mlp
    actor_opt: Adam
    critic_opt: Adam
    buffer: ReplayBuffer
    noise: OuNoise

    def param_max_abs(self) -> float:
        return max(self.actor.param_max_abs(), self.critic.param_max_abs())


@dataclass
class LiftStats:
    """Per-lift diagnostics; sigma2 is the sample variance of the actor
    gradient norms over the lift's minibatch updates."""

    actor_grad_norms: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    diverged: bool = False
    steps: int = 0

    @property
    def sigma2(self) -> float:
        if len(self.actor_grad_norms) < 2:
            return 0.0
        return float(np.var(np.asarray(self.actor_grad_norms), ddof=1))


def residual_range(env: Env) -> float:
    lo, hi = env.spec.action_low, env.spec.action_high
    assert np.allclose(hi, -lo) and np.allclose(hi, hi[0]), "expect symmetric range"
    return float(hi[0])


def init_ddpg(env: Env, cfg: DdpgConfig, seed) -> DdpgState:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, noise_ss = ss.spawn(2)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    obs_dim, act_dim = env.spec.obs_dim, env.spec.action_dim
    # zero final layer: a fresh residual is exactly the zero function
    actor = Mlp.init(
        init_rng,
        [obs_dim, *cfg.hidden, act_dim],
        output_scale=residual_range(env),
        final_scale=0.0,
    )
    critic = Mlp.init(
        init_rng, [obs_dim + act_dim, *cfg.hidden, 1], output_scale=None, final_scale=3e-3
    )
    return DdpgState(
        actor=actor,
        critic=critic,
        target_actor=actor.copy(),
        target_critic=critic.copy(),
        actor_opt=Adam(actor, cfg.actor_lr),
        critic_opt=Adam(critic, cfg.critic_lr),
        buffer=ReplayBuffer(cfg.buffer_size, obs_dim, act_dim),
        noise=OuNoise(act_dim, cfg.ou_theta, cfg.ou_sigma, np.random.Generator(np.random.PCG64(noise_ss))),
    )


def critic_gradients(state: DdpgState, batch: dict, gamma: float):
    """TD-target regression gradients for the critic."""
    a_next = state.target_actor.forward(batch["next_obs"])
    q_next = state.target_critic.forward(
        np.hstack([batch["next_obs"], a_next])
    )[:, 0]
    y = batch["rew"] + gamma * (1.0 - batch["terminal"]) * q_next
    q, cache = state.critic.forward_cache(np.hstack([batch["obs"], batch["act"]]))
    diff = q[:, 0] - y
    dq = (2.0 * diff / len(diff))[:, None]
    grads, _ = state.critic.backward(cache, dq)
    return grads, float(np.mean(diff**2))


def actor_gradients(state: DdpgState, obs: np.ndarray, lam: float):
    """Gradient of -lam * mean Q(s, f(s)) with respect to the actor: ascend Q
    through the critic's input gradient, scaled by the mixing weight."""
    a, a_cache = state.actor.forward_cache(obs)
    _, q_cache = state.critic.forward_cache(np.hstack([obs, a]))
    dout = np.full((len(obs), 1), -1.0 / len(obs))
    _, din = state.critic.backward(q_cache, dout)
    da = din[:, obs.shape[1] :]
    grads, _ = state.actor.backward(a_cache, da)
    return [lam * g for g in grads]


def train_step(state: DdpgState, cfg: DdpgConfig, lam: float, replay_rng, stats):
    batch = state.buffer.sample(cfg.batch_size, replay_rng)
    cgrads, _ = critic_gradients(state, batch, cfg.gamma)
    state.critic_opt.step(state.critic, cgrads)
    agrads = actor_gradients(state, batch["obs"], lam)
    state.actor_opt.step(state.actor, agrads)
    stats.actor_grad_norms.append(grad_norm(agrads))
    soft_update(state.target_actor, state.actor, cfg.tau)
    soft_update(state.target_critic, state.critic, cfg.tau)


def update_f(pi: Policy, env: Env, cfg: LiftConfig, seed):
    """One lift: train a residual actor with DDPG while pi stays frozen.

    Returns (MixedPolicy(pi, f, lam), LiftStats). On divergence the best
    intermediate residual by training return is returned instead of the
    final one.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ddpg_ss, replay_ss, ep_ss = ss.spawn(3)
    state = init_ddpg(env, cfg.ddpg, ddpg_ss)
    if cfg.eta is not None:
        state.actor_opt.lr = cfg.eta
    replay_rng = np.random.Generator(np.random.PCG64(replay_ss))
    ep_rng = np.random.Generator(np.random.PCG64(ep_ss))
    stats = LiftStats()
    # the fresh residual (exactly zero) backstops the divergence guard
    snapshots = [(-np.inf, state.actor.copy())]
    min_buffer = max(cfg.ddpg.batch_size, cfg.ddpg.warmup)
    for _ in range(cfg.episodes):
        window = env.reset(int(ep_rng.integers(2**63)))
        pi.reset()
        state.noise.reset()
        ep_return = 0.0
        done = False
        while not done:
            obs = window.newest
            a_f = state.actor.forward(obs[None, :])[0] + state.noise.sample()
            a_env = pi.act(window) + cfg.lam * a_f
            window, reward, done = env.step(a_env)
            terminal = env.last_terminal
            state.buffer.push(obs, a_f, reward, window.newest, terminal)
            ep_return += reward
            stats.steps += 1
            if len(state.buffer) >= min_buffer:
                for _ in range(cfg.ddpg.updates_per_step):
                    train_step(state, cfg.ddpg, cfg.lam, replay_rng, stats)
                if state.param_max_abs() > PARAM_ABS_LIMIT:
                    stats.diverged = True
                    break
        stats.episode_returns.append(ep_return)
        if stats.diverged:
            break
        snapshots.append((ep_return, state.actor.copy()))
    if stats.diverged:
        _, actor = max(snapshots, key=lambda s: s[0])
    else:
        actor = state.actor
    return MixedPolicy(pi, MlpPolicy(actor), cfg.lam), stats
