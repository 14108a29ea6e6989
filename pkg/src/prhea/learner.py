"""Offline plan/learn loop that trains the policy and value priors.

Each cycle plans from the current real state, executes part of the optimum,
stores ``(s*_t, a*_t, R*_t)`` for the executed steps and, once the replay
buffer holds ``replay_start`` samples, runs ``trains_per_cycle`` RMSProp
steps on uniformly drawn minibatches. Until the buffer reaches that size the
value network is not consulted at all during planning.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .env import Environment, make_env
from .nn import GaussianPolicy, RmsPropState, ValueNet, joint_loss, rmsprop_step
from .planner import PlanConfig, plan, run_episode

log = logging.getLogger(__name__)

HALF_L = "half-L"
FIXED_1 = "fixed-1"
CURVE_HEADER = ("steps", "episode", "return")


@dataclass(frozen=True)
class LearnConfig:
    minibatch: int = 32
    buffer_capacity: int = 20000
    replay_start: int = 5000
    trains_per_cycle: int = 50
    total_steps: int = 200_000
    execution_rule: str = HALF_L
    checkpoint_every: int = 50
    learning_rate: float = 3e-3
    rms_decay: float = 0.99
    grad_clip: float = 0.5

    def __post_init__(self):
        if self.execution_rule not in (HALF_L, FIXED_1):
            raise ValueError(f"execution_rule must be {HALF_L!r} or {FIXED_1!r}, got {self.execution_rule!r}")
        if not 1 <= self.replay_start <= self.buffer_capacity:
            raise ValueError("replay_start must lie in [1, buffer_capacity]")
        if not 1 <= self.minibatch <= self.replay_start:
            raise ValueError("minibatch must lie in [1, replay_start]")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.trains_per_cycle < 0:
            raise ValueError("trains_per_cycle must be non-negative")

    def steps_to_execute(self, plan_length: int) -> int:
        if self.execution_rule == HALF_L:
            return max(1, plan_length // 2)
        return 1


@dataclass(frozen=True)
class Sample:
    state: np.ndarray
    action: np.ndarray
    ret: float


class ReplayBuffer:
    """Fixed-capacity FIFO of ``(state, action, return)`` samples."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.returns = np.zeros(capacity)
        self.inserted = 0  # total pushes ever; the next slot is inserted % capacity

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, states, actions, returns) -> None:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        returns = np.atleast_1d(returns)
        if not (len(states) == len(actions) == len(returns)):
            raise ValueError("states, actions and returns must have equal length")
        for s, a, r in zip(states, actions, returns):
            i = self.inserted % self.capacity
            self.states[i] = s
            self.actions[i] = a
            self.returns[i] = r
            self.inserted += 1

    def push_samples(self, samples: Sequence[Sample]) -> None:
        if samples:
            self.push([s.state for s in samples], [s.action for s in samples], [s.ret for s in samples])

    def _order(self) -> np.ndarray:
        n = len(self)
        if self.inserted <= self.capacity:
            return np.arange(n)
        start = self.inserted % self.capacity
        return (start + np.arange(n)) % self.capacity

    def contents(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Oldest-first copies of the stored arrays."""
        idx = self._order()
        return self.states[idx], self.actions[idx], self.returns[idx]

    def sample(self, k: int, rng: np.random.Generator):
        """Uniform draw with replacement of ``k`` samples."""
        n = len(self)
        if n < k:
            raise ValueError(f"cannot draw {k} samples from a buffer holding {n}")
        idx = rng.integers(0, n, size=k)
        if self.inserted > self.capacity:
            idx = (self.inserted + idx) % self.capacity
        return self.states[idx], self.actions[idx], self.returns[idx]


@dataclass
class Learner:
    """Everything the training loop mutates: networks, optimizers, buffer, rng."""

    env_id: str
    policy: GaussianPolicy
    value: ValueNet
    policy_opt: RmsPropState
    value_opt: RmsPropState
    buffer: ReplayBuffer
    rng: np.random.Generator
    steps: int = 0
    episodes: int = 0
    value_active: bool = False
    curve: List[Tuple[int, int, float]] = field(default_factory=list)

    @classmethod
    def create(cls, env: Environment, learn: LearnConfig, seed: int) -> "Learner":
        rng = np.random.default_rng(seed)
        spec = env.spec
        policy = GaussianPolicy.build(spec.state_dim, spec.action_dim, rng)
        value = ValueNet.build(spec.state_dim, rng)
        opt_kw = dict(learning_rate=learn.learning_rate, decay=learn.rms_decay, clip_norm=learn.grad_clip)
        return cls(
            env_id=env.env_id,
            policy=policy,
            value=value,
            policy_opt=RmsPropState.like(policy.flat, **opt_kw),
            value_opt=RmsPropState.like(value.flat, **opt_kw),
            buffer=ReplayBuffer(learn.buffer_capacity, spec.state_dim, spec.action_dim),
            rng=rng,
        )

    def gate_open(self, learn: LearnConfig) -> bool:
        return len(self.buffer) >= learn.replay_start

    def train_step(self, learn: LearnConfig) -> float:
        s, a, r = self.buffer.sample(learn.minibatch, self.rng)
        loss, g_policy, g_value = joint_loss(self.policy, self.value, s, a, r)
        rmsprop_step(self.policy.flat, g_policy, self.policy_opt)
        rmsprop_step(self.value.flat, g_value, self.value_opt)
        return loss


@dataclass
class CycleStats:
    steps: int
    plan_length: int
    value_bootstrap: bool
    bootstrap: float
    pushed: int
    gradient_steps: int = 0
    minibatch_sizes: List[int] = field(default_factory=list)
    mean_loss: Optional[float] = None
    rewards: Optional[np.ndarray] = None
    terminal: bool = False


def training_cycle(env: Environment, learner: Learner, plan_config: PlanConfig, learn: LearnConfig,
                   prev_tail: Optional[np.ndarray] = None) -> Tuple[CycleStats, np.ndarray]:
    """Plan, act, store, learn. Returns the stats and the remaining optimum.

    The replay-start gate is read once, before planning: it decides both
    whether the value network bootstraps fitness and whether this cycle
    trains.
    """
    gate = learner.gate_open(learn)
    learner.value_active = learner.value_active or gate
    result = plan(env, env.snapshot(), plan_config, learner.policy,
                  learner.value if gate else None, prev_tail, learner.rng)
    take = min(learn.steps_to_execute(result.length), result.length)
    rewards = []
    for t in range(take):
        step = env.step(result.sequence[t])
        rewards.append(step.reward)
    learner.buffer.push(result.states[:take], result.actions[:take], result.returns[:take])
    learner.steps += take

    stats = CycleStats(steps=take, plan_length=result.length, value_bootstrap=gate,
                       bootstrap=result.bootstrap, pushed=take, rewards=np.array(rewards),
                       terminal=env.done)
    if gate:
        losses = []
        for _ in range(learn.trains_per_cycle):
            losses.append(learner.train_step(learn))
            stats.minibatch_sizes.append(learn.minibatch)
        stats.gradient_steps = len(losses)
        stats.mean_loss = float(np.mean(losses)) if losses else None
    return stats, result.sequence[take:result.length]


def run_training_episode(env: Environment, learner: Learner, plan_config: PlanConfig, learn: LearnConfig,
                         on_cycle=None) -> float:
    env.reset(int(learner.rng.integers(2**31)))
    tail = None
    total = 0.0
    while not env.done:
        stats, tail = training_cycle(env, learner, plan_config, learn, tail)
        total += float(stats.rewards.sum())
        if on_cycle is not None:
            on_cycle(stats)
    learner.episodes += 1
    learner.curve.append((learner.steps, learner.episodes, total))
    return total


def write_curve(path: Path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for steps, episode, ret in curve:
            w.writerow([steps, episode, repr(float(ret))])


def train(env_id: str, plan_config: PlanConfig, learn: LearnConfig, seed: int = 0,
          out_dir: Optional[os.PathLike] = None, resume=None, on_cycle=None) -> Learner:
    """Alternate planning and learning until ``learn.total_steps`` real steps.

    The budget is checked between episodes. With ``out_dir`` the curve is
    written to ``curve.csv`` and checkpoints to ``checkpoint.ckpt`` every
    ``checkpoint_every`` episodes and at the end. ``resume`` is a
    :class:`~prhea.persistence.Checkpoint` to continue from.
    """
    from . import persistence

    env = make_env(env_id)
    if resume is not None:
        persistence.check_compatible(resume, env)
        learner = persistence.to_learner(resume, learn)
    else:
        learner = Learner.create(env, learn, seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def save():
        if out is None:
            return
        meta = {"plan_config": asdict(plan_config), "learn_config": asdict(learn), "seed": seed}
        persistence.save(persistence.from_learner(learner, meta), out / "checkpoint.ckpt")
        write_curve(out / "curve.csv", learner.curve)

    while learner.steps < learn.total_steps:
        ret = run_training_episode(env, learner, plan_config, learn, on_cycle)
        log.info("episode %d steps %d return %.3f buffer %d", learner.episodes, learner.steps, ret,
                 len(learner.buffer))
        if out is not None:
            write_curve(out / "curve.csv", learner.curve)
        if learn.checkpoint_every and learner.episodes % learn.checkpoint_every == 0:
            save()
    save()
    return learner


@dataclass
class EvalReport:
    returns: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def std(self) -> float:
        return float(np.std(self.returns)) if len(self.returns) > 1 else 0.0


def evaluate(policy: Optional[GaussianPolicy], value: Optional[ValueNet], env_id: str,
             plan_config: PlanConfig, episodes: int = 25, seed: int = 0,
             seeds: Optional[Sequence[int]] = None) -> EvalReport:
    """Real-play protocol: plan every step and execute only the first action."""
    env = make_env(env_id)
    for net, dim in ((policy, env.spec.state_dim), (value, env.spec.state_dim)):
        if net is not None and net.state_dim != dim:
            raise ValueError(f"network expects state_dim {net.state_dim}, {env_id} has {dim}")
    if policy is not None and policy.action_dim != env.spec.action_dim:
        raise ValueError(f"policy has action_dim {policy.action_dim}, {env_id} has {env.spec.action_dim}")
    cfg = PlanConfig(**{**asdict(plan_config), "steps_per_cycle": 1})
    seeds = list(seeds) if seeds is not None else [seed + i for i in range(episodes)]
    returns = []
    for s in seeds:
        ep = run_episode(env, cfg, policy, value, rng=np.random.default_rng(s), seed=s)
        returns.append(ep.total_return)
    return EvalReport(returns)
