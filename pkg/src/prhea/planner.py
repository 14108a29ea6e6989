"""Rolling-horizon planning with CMA-ES and optional learned priors.

An individual is an ``H x action_dim`` action sequence flattened row-wise.
Its fitness is the discounted return of an open-loop rollout from the
current snapshot, optionally bootstrapped with ``gamma^L V(s_L)`` when the
rollout did not hit a terminal state. With both priors switched off this
is plain RHEA with the final-state reward fixed at zero.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import cmaes
from .env import Environment, Snapshot
from .nn import GaussianPolicy, ValueNet, policy_sample, value_forward


@dataclass(frozen=True)
class PlanConfig:
    horizon: int = 20
    generations: int = 5
    population: Optional[int] = None
    discount: float = 0.99
    use_policy_prior: bool = True
    use_value_prior: bool = True
    steps_per_cycle: int = 1
    step_size_scale: float = 0.3
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.generations < 1:
            raise ValueError(f"generations must be positive, got {self.generations}")
        if self.population is not None and self.population < 2:
            raise ValueError(f"population must be at least 2, got {self.population}")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if not 1 <= self.steps_per_cycle <= self.horizon:
            raise ValueError("steps_per_cycle must lie in [1, horizon]")

    def population_for(self, action_dim: int) -> int:
        if self.population is not None:
            return self.population
        return cmaes.default_population_size(self.horizon * action_dim)

    @classmethod
    def plain_rhea(cls, horizon: int = 20, generations: Optional[int] = None, **kw) -> "PlanConfig":
        """Baseline without priors; generations default to the horizon."""
        return cls(horizon=horizon, generations=generations or horizon,
                   use_policy_prior=False, use_value_prior=False, **kw)


@dataclass
class PlanResult:
    states: np.ndarray  # (L+1, state_dim): s*_0 .. s*_L
    actions: np.ndarray  # (L, action_dim): executed part of the optimum
    rewards: np.ndarray  # (L,)
    returns: np.ndarray  # (L,): R*_t, discounted return-to-go
    bootstrap: float  # R*_L used to close the recursion
    terminal: bool
    sequence: np.ndarray  # (H, action_dim): full decoded optimum
    evaluations: int = 0
    best_history: List[float] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def fitness(self) -> float:
        return float(self.returns[0]) if self.length else self.bootstrap


@dataclass
class Rollouts:
    """Batch evaluation outcome, one row per individual."""

    fitness: np.ndarray
    rewards: np.ndarray  # (N, H), zero past each row's length
    lengths: np.ndarray
    terminal: np.ndarray
    bootstrap: np.ndarray


def discounted_returns(rewards, discount: float, bootstrap: float = 0.0) -> np.ndarray:
    """``R_t = r_t + gamma R_{t+1}`` backwards from ``R_L = bootstrap``."""
    out = np.empty(len(rewards))
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


def decode(env: Environment, flat, horizon: int) -> np.ndarray:
    """Flat genes -> clipped ``(..., H, action_dim)`` action array."""
    flat = np.asarray(flat, dtype=np.float64)
    seq = flat.reshape(flat.shape[:-1] + (horizon, env.spec.action_dim))
    return env.spec.clip(seq)


def _rollout_chunk(env: Environment, snapshot: Snapshot, seqs: np.ndarray, discount: float,
                   value: Optional[ValueNet]) -> Rollouts:
    n, horizon, _ = seqs.shape
    phys = env.clones(snapshot, n)
    t0 = snapshot.step_count
    rewards = np.zeros((n, horizon))
    lengths = np.full(n, horizon)
    alive = np.ones(n, dtype=bool)
    hit_terminal = np.zeros(n, dtype=bool)
    if snapshot.done:
        alive[:] = False
        hit_terminal[:] = True
        lengths[:] = 0
    for t in range(horizon):
        if not alive.any():
            break
        nxt, r, term = env.batch_step(phys, t0 + t, seqs[:, t])
        if np.isnan(r[alive]).any():
            raise ValueError(f"NaN reward during rollout at step {t0 + t}")
        rewards[alive, t] = r[alive]
        phys = np.where(alive[:, None], nxt, phys)
        ended = alive & term
        lengths[ended] = t + 1
        hit_terminal |= ended
        alive &= ~term

    bootstrap = np.zeros(n)
    if value is not None:
        for i in np.flatnonzero(~hit_terminal):
            obs = env.observe(phys[i:i + 1], t0 + int(lengths[i]))[0]
            bootstrap[i] = value_forward(value, obs)

    acc = bootstrap.copy()
    for t in range(horizon - 1, -1, -1):
        live = t < lengths
        acc = np.where(live, rewards[:, t] + discount * acc, acc)
    return Rollouts(acc, rewards, lengths, hit_terminal, bootstrap)


def evaluate_population(env: Environment, snapshot: Snapshot, population, horizon: int,
                        discount: float, value: Optional[ValueNet] = None,
                        workers: int = 1) -> Rollouts:
    """Fitness of every individual (rows of ``population``) from ``snapshot``.

    Each row is evaluated on its own clone; results are identical for any
    ``workers`` count because the dynamics act row-wise.
    """
    seqs = decode(env, np.atleast_2d(population), horizon)
    if workers <= 1 or len(seqs) < 2:
        return _rollout_chunk(env, snapshot, seqs, discount, value)
    chunks = np.array_split(np.arange(len(seqs)), min(workers, len(seqs)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: _rollout_chunk(env, snapshot, seqs[idx], discount, value), chunks))
    return Rollouts(*(np.concatenate([getattr(p, f) for p in parts])
                      for f in ("fitness", "rewards", "lengths", "terminal", "bootstrap")))


def evaluate_individual(env: Environment, snapshot: Snapshot, actions, horizon: int, discount: float,
                        value: Optional[ValueNet] = None, value_enabled: bool = True):
    """Fitness ``R_0``, per-step rewards and rollout length of one individual."""
    out = _rollout_chunk(env, snapshot, decode(env, np.atleast_2d(actions), horizon), discount,
                         value if value_enabled else None)
    length = int(out.lengths[0])
    return float(out.fitness[0]), out.rewards[0, :length].copy(), length


def init_population(env: Environment, snapshot: Snapshot, policy: Optional[GaussianPolicy],
                    prev_tail: Optional[np.ndarray], population: int, horizon: int,
                    rng: np.random.Generator) -> np.ndarray:
    """First generation, ``(population, horizon * action_dim)``.

    With a policy every individual is an on-policy rollout from the
    snapshot; otherwise genes are uniform in the action box. Individual 0
    replays ``prev_tail`` (at most ``horizon - 1`` actions) before sampling.
    """
    spec = env.spec
    tail = np.zeros((0, spec.action_dim)) if prev_tail is None else \
        np.asarray(prev_tail, dtype=np.float64).reshape(-1, spec.action_dim)[:horizon - 1]
    if policy is None:
        seqs = rng.uniform(spec.action_low, spec.action_high, size=(population, horizon, spec.action_dim))
        seqs[0, :len(tail)] = spec.clip(tail)
        return seqs.reshape(population, -1)

    seqs = np.empty((population, horizon, spec.action_dim))
    phys = env.clones(snapshot, population)
    alive = np.full(population, not snapshot.done)
    t0 = snapshot.step_count
    for t in range(horizon):
        obs = env.observe(phys, t0 + t)
        acts = spec.clip(policy_sample(policy, obs, rng))
        if t < len(tail):
            acts[0] = spec.clip(tail[t])
        seqs[:, t] = acts
        if t + 1 < horizon and alive.any():
            nxt, _, term = env.batch_step(phys, t0 + t, acts)
            phys = np.where(alive[:, None], nxt, phys)
            alive &= ~term
    return seqs.reshape(population, -1)


def record(env: Environment, snapshot: Snapshot, flat, horizon: int, discount: float,
           value: Optional[ValueNet]) -> PlanResult:
    """Roll one individual forward and keep states, rewards and returns."""
    seq = decode(env, flat, horizon)
    phys = env.clones(snapshot, 1)
    t = snapshot.step_count
    states = [env.observe(phys, t)[0]]
    rewards = []
    terminal = snapshot.done
    while not terminal and len(rewards) < horizon:
        phys, r, term = env.batch_step(phys, t, seq[len(rewards)])
        t += 1
        rewards.append(float(r[0]))
        states.append(env.observe(phys, t)[0])
        terminal = bool(term[0])
    bootstrap = 0.0
    if value is not None and not terminal:
        bootstrap = value_forward(value, states[-1])
    rewards = np.array(rewards)
    return PlanResult(
        states=np.array(states),
        actions=seq[:len(rewards)].copy(),
        rewards=rewards,
        returns=discounted_returns(rewards, discount, bootstrap),
        bootstrap=bootstrap,
        terminal=terminal,
        sequence=seq.copy(),
    )


def plan(env: Environment, snapshot: Snapshot, config: PlanConfig,
         policy: Optional[GaussianPolicy] = None, value: Optional[ValueNet] = None,
         prev_tail: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None) -> PlanResult:
    """Optimize an H-step action sequence from ``snapshot``.

    Generation one is seeded by :func:`init_population`; later generations
    are sampled from the adapted CMA-ES distribution. The best individual
    ever evaluated is returned (ties go to the earliest).
    """
    rng = rng if rng is not None else np.random.default_rng()
    spec = env.spec
    policy = policy if config.use_policy_prior else None
    value = value if config.use_value_prior else None
    horizon = config.horizon
    dim = horizon * spec.action_dim
    pop_size = config.population_for(spec.action_dim)
    half_width = float(np.mean(spec.action_high - spec.action_low)) / 2.0
    center = np.tile((spec.action_high + spec.action_low) / 2.0, horizon)
    cfg = cmaes.CmaConfig(dimension=dim, population_size=pop_size,
                          initial_step_size=config.step_size_scale * half_width,
                          max_generations=config.generations)
    state = cmaes.cma_init(cfg, center)

    best_x, best_f = None, -math.inf
    history = []
    for gen in range(config.generations):
        if gen == 0:
            seeds = init_population(env, snapshot, policy, prev_tail, pop_size, horizon, rng)
            pop = cmaes.cma_seed_generation(state, seeds)
        else:
            pop = cmaes.cma_sample(state, pop_size, rng)
        out = evaluate_population(env, snapshot, pop, horizon, config.discount, value, config.workers)
        i = int(np.argmax(out.fitness))
        if out.fitness[i] > best_f:
            best_x, best_f = pop[i].copy(), float(out.fitness[i])
        history.append(best_f)
        if gen + 1 < config.generations:
            state = cmaes.cma_update(state, pop, out.fitness)

    result = record(env, snapshot, best_x, horizon, config.discount, value)
    result.evaluations = pop_size * config.generations
    result.best_history = history
    return result


@dataclass
class Episode:
    total_return: float
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    planning_evaluations: int = 0

    @property
    def steps(self) -> int:
        return len(self.rewards)


def run_episode(env: Environment, config: PlanConfig, policy: Optional[GaussianPolicy] = None,
                value: Optional[ValueNet] = None, rng: Optional[np.random.Generator] = None,
                seed: Optional[int] = None, max_steps: Optional[int] = None) -> Episode:
    """Plan, execute the first ``steps_per_cycle`` actions, shift, repeat.

    Returns the undiscounted episode return and the real trajectory.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    env.reset(seed)
    limit = max_steps if max_steps is not None else env.spec.max_episode_steps
    states = [env.state]
    actions, rewards = [], []
    tail = None
    evals = 0
    while not env.done and len(rewards) < limit:
        result = plan(env, env.snapshot(), config, policy, value, tail, rng)
        evals += result.evaluations
        take = min(config.steps_per_cycle, max(result.length, 1))
        for a in result.sequence[:take]:
            step = env.step(a)
            actions.append(a)
            rewards.append(step.reward)
            states.append(step.next_state)
            if step.terminal or len(rewards) >= limit:
                break
        tail = result.sequence[take:result.length]
    rewards = np.array(rewards)
    return Episode(float(rewards.sum()), np.array(states), np.array(actions), rewards, evals)
