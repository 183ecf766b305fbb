"""Channel-adaptive step selection: a DDPG actor/critic over timestep plans.

State is (t_d, t_plus, snr_db); actions are bounded integer nudges of the
two step counts. The environment runs the attacked pipeline at the updated
plan and pays the combined similarity/attack-rate reward. Training follows
the usual off-policy recipe: replay buffer, target nets, one critic and
one actor step per environment step, soft target updates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Protocol

import numpy as np

from .ddpm import PlanBounds, TimestepPlan
from .errors import ConfigError, DivergenceError, ShapeError
from .metrics import BatchOutcome, RewardConfig, adv_rate, err_rate, reward, ssim_avg
from .nn import (DenseNet, apply_update, backprop, build_net, clone_net,
                 forward, make_optimizer, read_net, write_net, OptimizerState)
from .tensor import Rng

ACTION_SCALE = 25  # largest step nudge in either direction


@dataclass(frozen=True)
class AgentState:
    t_d: int
    t_plus: int
    snr_db: float


@dataclass(frozen=True)
class AgentAction:
    raw: tuple[float, float]      # actor output in [-1, 1]^2
    mapped: tuple[int, int]       # integer deltas for (t_d, t_plus)


@dataclass(frozen=True)
class Transition:
    s: AgentState
    a: AgentAction
    r: float
    s_next: AgentState


class ReplayBuffer:
    """Fixed-capacity ring; once full, the oldest record is overwritten."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def push(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._cursor] = tr
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, n: int, rng: Rng) -> list[Transition]:
        if n > len(self._items):
            raise ConfigError("not enough stored transitions to sample")
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class DdpgNets:
    actor: DenseNet
    critic: DenseNet
    actor_target: DenseNet
    critic_target: DenseNet


def make_ddpg_nets(rng: Rng, hidden: int = 256, state_dim: int = 3,
                   action_dim: int = 2) -> DdpgNets:
    """Actor and critic with two relu hidden layers; the actor ends in tanh."""
    actor = build_net([state_dim, hidden, hidden, action_dim],
                      ["relu", "relu", "tanh"], rng)
    critic = build_net([state_dim + action_dim, hidden, hidden, 1],
                       ["relu", "relu", "linear"], rng)
    return DdpgNets(actor=actor, critic=critic,
                    actor_target=clone_net(actor), critic_target=clone_net(critic))


def normalize_state(s: AgentState, bounds: PlanBounds = PlanBounds()) -> np.ndarray:
    """Scale the state into roughly [-1, 1] for the nets."""
    return np.array([s.t_d / bounds.t_d_max,
                     s.t_plus / bounds.t_d_max,
                     (s.snr_db - 6.0) / 12.0], dtype=np.float32)


def _round_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def action_from_raw(raw: np.ndarray, action_scale: int = ACTION_SCALE) -> AgentAction:
    raw = np.clip(np.asarray(raw, dtype=np.float32), -1.0, 1.0)
    if raw.shape != (2,):
        raise ShapeError("action needs exactly two components")
    mapped = _round_away(raw * action_scale).astype(int)
    return AgentAction(raw=(float(raw[0]), float(raw[1])),
                       mapped=(int(mapped[0]), int(mapped[1])))


def act(s: AgentState, nets: DdpgNets, noise_sigma: float, rng: Rng,
        action_scale: int = ACTION_SCALE,
        bounds: PlanBounds = PlanBounds()) -> AgentAction:
    """Actor output plus exploration noise, clipped and mapped to deltas."""
    raw = forward(nets.actor, normalize_state(s, bounds))
    if noise_sigma > 0:
        raw = raw + noise_sigma * rng.standard_normal(2)
    return action_from_raw(raw, action_scale)


def apply_action(s: AgentState, a: AgentAction,
                 bounds: PlanBounds = PlanBounds()) -> tuple[int, int]:
    """Clamp chain keeping every state inside the step budget: t_d first,
    then t_plus against what is left of the budget."""
    t_d = int(np.clip(s.t_d + a.mapped[0], 1, bounds.t_d_max - 1))
    plus_cap = min(bounds.t_plus_max, bounds.t_d_max - 1 - t_d)
    t_plus = int(np.clip(s.t_plus + a.mapped[1], 0, plus_cap))
    return t_d, t_plus


def random_state(snr_db: float, rng: Rng,
                 bounds: PlanBounds = PlanBounds()) -> AgentState:
    t_d = int(rng.integers(1, bounds.t_d_max))          # 1 .. t_d_max-1
    t_plus = int(rng.integers(0, bounds.t_d_max - t_d))  # keeps the sum in budget
    return AgentState(t_d=t_d, t_plus=t_plus, snr_db=snr_db)


class PipelineHandles(Protocol):
    """What step_env needs from the surrounding system."""

    bounds: PlanBounds
    reward_cfg: RewardConfig

    def run(self, images: np.ndarray, labels: np.ndarray, plan: TimestepPlan,
            snr_db: float, rng: Rng) -> BatchOutcome: ...


def step_env(s: AgentState, a: AgentAction, pipeline: PipelineHandles,
             batch: tuple[np.ndarray, np.ndarray], rng: Rng) -> tuple[AgentState, float]:
    s_next, r, _ = step_env_detailed(s, a, pipeline, batch, rng)
    return s_next, r


def step_env_detailed(s: AgentState, a: AgentAction, pipeline: PipelineHandles,
                      batch: tuple[np.ndarray, np.ndarray],
                      rng: Rng) -> tuple[AgentState, float, dict]:
    """Apply the action, run the attacked pipeline at the new plan, and pay
    the reward; also returns the per-step metric breakdown."""
    for name in ("bounds", "reward_cfg", "run"):
        if not hasattr(pipeline, name):
            raise ConfigError(f"pipeline handles are missing {name!r}")
    t_d, t_plus = apply_action(s, a, pipeline.bounds)
    plan = TimestepPlan(t_d, t_plus, pipeline.bounds)
    images, labels = batch
    outcome = pipeline.run(images, labels, plan, s.snr_db, rng)
    r = reward(outcome, pipeline.reward_cfg)
    info = {
        "ssim_avg": ssim_avg(outcome.x, outcome.x_final),
        "adv_rate": adv_rate(outcome),
        "err_rate": err_rate(outcome),
    }
    s_next = AgentState(t_d=t_d, t_plus=t_plus, snr_db=s.snr_db)
    return s_next, r, info


# ---------------------------------------------------------------------------
# Learning updates


def _state_matrix(states, bounds: PlanBounds) -> np.ndarray:
    return np.stack([normalize_state(s, bounds) for s in states])


def td_target(batch: list[Transition], nets: DdpgNets, gamma: float,
              bounds: PlanBounds = PlanBounds()) -> np.ndarray:
    """Bootstrapped target r + gamma * Q'(s', mu'(s')); no terminal masking,
    episodes are fixed length."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError("gamma must lie in [0, 1]")
    ns = _state_matrix([tr.s_next for tr in batch], bounds)
    a_next = forward(nets.actor_target, ns)
    q_next = forward(nets.critic_target, np.concatenate([ns, a_next], axis=1))[:, 0]
    r = np.array([tr.r for tr in batch], dtype=np.float32)
    return r + np.float32(gamma) * q_next


def update_critic(batch: list[Transition], targets: np.ndarray, nets: DdpgNets,
                  opt: OptimizerState, bounds: PlanBounds = PlanBounds()) -> float:
    """One squared-error step of the online critic; returns the pre-step loss."""
    ns = _state_matrix([tr.s for tr in batch], bounds)
    actions = np.array([tr.a.raw for tr in batch], dtype=np.float32)
    sa = np.concatenate([ns, actions], axis=1)
    q = forward(nets.critic, sa)[:, 0]
    diff = q - targets
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        raise DivergenceError("critic loss is not finite")
    grad_out = ((2.0 / diff.size) * diff)[:, None].astype(np.float32)
    apply_update(nets.critic, backprop(nets.critic, sa, grad_out), opt)
    return loss


def update_actor(batch: list[Transition], nets: DdpgNets, opt: OptimizerState,
                 bounds: PlanBounds = PlanBounds()) -> float:
    """Ascent on mean Q(s, mu(s)) with the critic frozen; returns the
    pre-step objective."""
    ns = _state_matrix([tr.s for tr in batch], bounds)
    mu = forward(nets.actor, ns)
    sa = np.concatenate([ns, mu], axis=1)
    q = forward(nets.critic, sa)
    objective = float(q.mean())
    if not np.isfinite(objective):
        raise DivergenceError("actor objective is not finite")
    ones = np.full((ns.shape[0], 1), 1.0 / ns.shape[0], dtype=np.float32)
    dq_dsa = backprop(nets.critic, sa, ones).wrt_input
    dq_da = dq_dsa[:, ns.shape[1]:]
    apply_update(nets.actor, backprop(nets.actor, ns, -dq_da), opt)
    return objective


def soft_update(nets: DdpgNets, tau: float) -> None:
    """Blend both target nets toward the online nets in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError("tau must lie in [0, 1]")
    for online, target in ((nets.actor, nets.actor_target),
                           (nets.critic, nets.critic_target)):
        for p_on, p_tg in zip(online.parameters(), target.parameters()):
            p_tg *= 1.0 - tau
            p_tg += tau * p_on


# ---------------------------------------------------------------------------
# Training loop


class Environment(Protocol):
    def reset(self, rng: Rng) -> AgentState: ...

    def step(self, s: AgentState, a: AgentAction,
             rng: Rng) -> tuple[AgentState, float, dict]: ...


@dataclass
class DdpgHyper:
    epochs: int
    episodes: int = 3                 # environment steps per reset
    buffer_capacity: int = 1_000_000
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-5
    lr_critic: float = 1e-4
    optimizer: str = "sgd"
    hidden: int = 256
    warmup_random: int = 2500
    noise_sigma_start: float = 0.3
    noise_sigma_end: float = 0.05
    action_scale: int = ACTION_SCALE
    bounds: PlanBounds = field(default_factory=PlanBounds)


def _noise_sigma(step: int, total: int, hyper: DdpgHyper) -> float:
    half = max(1, total // 2)
    frac = min(1.0, step / half)
    return hyper.noise_sigma_start + frac * (hyper.noise_sigma_end - hyper.noise_sigma_start)


def train_agent(env: Environment, hyper: DdpgHyper, rng: Rng,
                nets: DdpgNets | None = None) -> tuple[DdpgNets, list[dict]]:
    """Run the step-selection training loop and return the nets plus a
    per-step log (epoch, episode, state, reward, metric breakdown).

    Each epoch resets the environment (fresh plan and channel draw); within
    it the agent takes `episodes` steps. Learning starts once the buffer
    holds one full mini-batch: sample, form targets, one critic and one
    actor step, then soft target updates.
    """
    nets = nets or make_ddpg_nets(rng, hidden=hyper.hidden)
    buffer = ReplayBuffer(hyper.buffer_capacity)
    opt_actor = make_optimizer(nets.actor, hyper.optimizer, hyper.lr_actor)
    opt_critic = make_optimizer(nets.critic, hyper.optimizer, hyper.lr_critic)
    total = hyper.epochs * hyper.episodes
    log: list[dict] = []
    step = 0
    for epoch in range(hyper.epochs):
        s = env.reset(rng)
        for episode in range(hyper.episodes):
            if step < hyper.warmup_random:
                a = action_from_raw(rng.uniform(-1.0, 1.0, size=2), hyper.action_scale)
            else:
                sigma = _noise_sigma(step, total, hyper)
                a = act(s, nets, sigma, rng, hyper.action_scale, hyper.bounds)
            s_next, r, info = env.step(s, a, rng)
            buffer.push(Transition(s, a, r, s_next))
            critic_loss = float("nan")
            if len(buffer) >= hyper.batch_size:
                sample = buffer.sample(hyper.batch_size, rng)
                targets = td_target(sample, nets, hyper.gamma, hyper.bounds)
                critic_loss = update_critic(sample, targets, nets, opt_critic, hyper.bounds)
                update_actor(sample, nets, opt_actor, hyper.bounds)
                soft_update(nets, hyper.tau)
            log.append({"epoch": epoch, "episode": episode, "step": step,
                        "snr_db": s.snr_db, "t_d": s_next.t_d,
                        "t_plus": s_next.t_plus, "reward": r,
                        "critic_loss": critic_loss, **info})
            s = s_next
            step += 1
    return nets, log


def greedy_rollout(s0: AgentState, nets: DdpgNets, steps: int,
                   bounds: PlanBounds = PlanBounds(),
                   action_scale: int = ACTION_SCALE) -> list[AgentState]:
    """Noise-free policy rollout through the clamp chain (no environment);
    returns the successive states after each step."""
    states = []
    s = s0
    for _ in range(steps):
        raw = forward(nets.actor, normalize_state(s, bounds))
        t_d, t_plus = apply_action(s, action_from_raw(raw, action_scale), bounds)
        s = AgentState(t_d=t_d, t_plus=t_plus, snr_db=s.snr_db)
        states.append(s)
    return states


# ---------------------------------------------------------------------------
# Checkpoints: hyperparameter manifest then the four nets as DNET blocks.

_AGENT_MAGIC = b"DAGT"
_AGENT_VERSION = 1


def write_agent(stream: BinaryIO, nets: DdpgNets, hyper: DdpgHyper) -> None:
    stream.write(_AGENT_MAGIC)
    stream.write(struct.pack("<Bffff", _AGENT_VERSION, hyper.gamma, hyper.tau,
                             hyper.lr_actor, hyper.lr_critic))
    for net in (nets.actor, nets.critic, nets.actor_target, nets.critic_target):
        write_net(stream, net)


def read_agent(stream: BinaryIO) -> tuple[DdpgNets, dict]:
    if stream.read(4) != _AGENT_MAGIC:
        raise ConfigError("not an agent checkpoint")
    version, gamma, tau, lr_a, lr_c = struct.unpack("<Bffff", stream.read(17))
    if version != _AGENT_VERSION:
        raise ConfigError(f"unsupported agent checkpoint version {version}")
    nets = DdpgNets(read_net(stream), read_net(stream), read_net(stream), read_net(stream))
    return nets, {"gamma": gamma, "tau": tau, "lr_actor": lr_a, "lr_critic": lr_c}


def save_agent(path, nets: DdpgNets, hyper: DdpgHyper) -> None:
    with open(path, "wb") as f:
        write_agent(f, nets, hyper)


def load_agent(path) -> tuple[DdpgNets, dict]:
    with open(path, "rb") as f:
        return read_agent(f)
