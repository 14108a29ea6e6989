"""Covariance Matrix Adaptation Evolution Strategy over flat real vectors.

Standard (mu/mu_w, lambda) CMA-ES with rank-one and rank-mu covariance
updates and cumulative step-size adaptation. Fitness is *maximized*.
When the best and the 70th-percentile fitness coincide the step size is
widened by ``exp(0.2 + c_sigma / d_sigma)``, the usual remedy for plateaus.

The functions here are pure with respect to an explicit :class:`CmaState`;
nothing is cached at module level, so independent runs may proceed in
parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

EIGEN_FLOOR = 1e-12


def default_population_size(dimension: int) -> int:
    return 4 + int(math.floor(3.0 * math.log(dimension)))


@dataclass(frozen=True)
class CmaConfig:
    dimension: int
    population_size: Optional[int] = None
    elite_count: Optional[int] = None
    initial_step_size: float = 1.0
    max_generations: int = 100

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError(f"dimension must be positive, got {self.dimension}")
        if self.population_size is None:
            object.__setattr__(self, "population_size", default_population_size(self.dimension))
        if self.population_size < 1:
            raise ValueError(f"population_size must be positive, got {self.population_size}")
        if self.elite_count is None:
            object.__setattr__(self, "elite_count", max(1, self.population_size // 2))
        if not 1 <= self.elite_count <= self.population_size:
            raise ValueError(
                f"elite_count must lie in [1, {self.population_size}], got {self.elite_count}"
            )
        if not self.initial_step_size > 0:
            raise ValueError(f"initial_step_size must be positive, got {self.initial_step_size}")
        if self.max_generations < 1:
            raise ValueError(f"max_generations must be positive, got {self.max_generations}")


@dataclass(frozen=True)
class CmaState:
    config: CmaConfig
    mean: np.ndarray
    covariance: np.ndarray
    step_size: float
    path_sigma: np.ndarray
    path_c: np.ndarray
    weights: np.ndarray
    generation: int = 0
    # eigendecomposition of `covariance`, kept in sync by cma_init/cma_update
    eig_basis: np.ndarray = field(default=None, repr=False)
    eig_values: np.ndarray = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return self.config.dimension

    @property
    def mu_eff(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


@dataclass(frozen=True)
class _Constants:
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float


def _constants(n: int, mu_eff: float) -> _Constants:
    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
    return _Constants(c_sigma, d_sigma, c_c, c_1, c_mu, chi_n)


def recombination_weights(mu: int) -> np.ndarray:
    """Log-rank weights ``ln(mu + 1/2) - ln(i)``, normalized to sum to one."""
    raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1, dtype=np.float64))
    return raw / raw.sum()


def _eig_floor(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cov = 0.5 * (cov + cov.T)
    vals, basis = np.linalg.eigh(cov)
    if vals.min() < EIGEN_FLOOR:
        vals = np.maximum(vals, EIGEN_FLOOR)
        cov = (basis * vals) @ basis.T
        cov = 0.5 * (cov + cov.T)
    return cov, basis, vals


def cma_init(config: CmaConfig, mean: Sequence[float]) -> CmaState:
    mean = np.array(mean, dtype=np.float64)
    if mean.shape != (config.dimension,):
        raise ValueError(f"mean must have length {config.dimension}, got shape {mean.shape}")
    n = config.dimension
    return CmaState(
        config=config,
        mean=mean,
        covariance=np.eye(n),
        step_size=float(config.initial_step_size),
        path_sigma=np.zeros(n),
        path_c=np.zeros(n),
        weights=recombination_weights(config.elite_count),
        generation=0,
        eig_basis=np.eye(n),
        eig_values=np.ones(n),
    )


def cma_sample(state: CmaState, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. vectors from N(mean, sigma^2 C), one per row."""
    z = rng.standard_normal((count, state.dimension))
    y = (z * np.sqrt(state.eig_values)) @ state.eig_basis.T
    return state.mean + state.step_size * y


def cma_seed_generation(state: CmaState, individuals: Sequence[Sequence[float]]) -> np.ndarray:
    """Return externally supplied individuals as the first population.

    The distribution is left untouched; seeds influence the search only
    through the selection in the following :func:`cma_update`.
    """
    if state.generation != 0:
        raise ValueError("seeded populations are only accepted at generation 0")
    pop = np.array(individuals, dtype=np.float64)
    if pop.ndim != 2 or pop.shape[1] != state.dimension:
        raise ValueError(
            f"seed individuals must have length {state.dimension}, got array of shape {pop.shape}"
        )
    return pop


def _rank(vectors: np.ndarray, fitness: np.ndarray) -> np.ndarray:
    # Descending fitness; ties broken by the vectors themselves so the
    # result does not depend on the order candidates were passed in.
    keys = [vectors[:, j] for j in reversed(range(vectors.shape[1]))]
    keys.append(-fitness)
    return np.lexsort(keys)


def cma_update(state: CmaState, vectors, fitness) -> CmaState:
    """One CMA-ES generation update from evaluated candidates (maximization)."""
    x = np.array(vectors, dtype=np.float64)
    f = np.array(fitness, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.dimension:
        raise ValueError(f"candidates must be rows of length {state.dimension}, got {x.shape}")
    if f.shape != (x.shape[0],):
        raise ValueError("need exactly one fitness value per candidate")
    if np.isnan(f).any():
        raise ValueError("NaN fitness passed to cma_update")
    mu = state.config.elite_count
    if x.shape[0] < mu:
        raise ValueError(f"need at least {mu} candidates, got {x.shape[0]}")

    n = state.dimension
    w = state.weights
    mu_eff = state.mu_eff
    k = _constants(n, mu_eff)
    sigma = state.step_size
    old_mean = state.mean

    order = _rank(x, f)
    elite = x[order[:mu]]
    new_mean = w @ elite
    y = (elite - old_mean) / sigma
    y_w = (new_mean - old_mean) / sigma

    # C^{-1/2} y_w through the cached eigendecomposition
    inv_sqrt_y = state.eig_basis @ ((state.eig_basis.T @ y_w) / np.sqrt(state.eig_values))
    p_sigma = (1.0 - k.c_sigma) * state.path_sigma + math.sqrt(
        k.c_sigma * (2.0 - k.c_sigma) * mu_eff
    ) * inv_sqrt_y
    g = state.generation + 1
    norm_ps = float(np.linalg.norm(p_sigma))
    h_sigma = norm_ps / math.sqrt(1.0 - (1.0 - k.c_sigma) ** (2 * g)) < (1.4 + 2.0 / (n + 1.0)) * k.chi_n
    h = 1.0 if h_sigma else 0.0
    p_c = (1.0 - k.c_c) * state.path_c + h * math.sqrt(k.c_c * (2.0 - k.c_c) * mu_eff) * y_w

    rank_mu = (y * w[:, None]).T @ y
    decay = 1.0 - k.c_1 - k.c_mu + (1.0 - h) * k.c_1 * k.c_c * (2.0 - k.c_c)
    cov = decay * state.covariance + k.c_1 * np.outer(p_c, p_c) + k.c_mu * rank_mu
    cov, basis, vals = _eig_floor(cov)

    new_sigma = sigma * math.exp((k.c_sigma / k.d_sigma) * (norm_ps / k.chi_n - 1.0))
    if f[order[0]] == f[order[math.ceil(0.7 * len(f)) - 1]]:
        # flat fitness: widen the search instead of drifting on a plateau
        new_sigma *= math.exp(0.2 + k.c_sigma / k.d_sigma)

    return replace(
        state,
        mean=new_mean,
        covariance=cov,
        step_size=new_sigma,
        path_sigma=p_sigma,
        path_c=p_c,
        generation=g,
        eig_basis=basis,
        eig_values=vals,
    )


def maximize(objective, mean, config: CmaConfig, rng: np.random.Generator):
    """Run ``config.max_generations`` generations maximizing ``objective``.

    Returns ``(best_vector, best_fitness, final_state)``. ``objective``
    receives one candidate vector at a time.
    """
    state = cma_init(config, mean)
    best_x, best_f = None, -math.inf
    for _ in range(config.max_generations):
        pop = cma_sample(state, config.population_size, rng)
        fit = np.array([objective(p) for p in pop])
        i = int(np.argmax(fit))
        if fit[i] > best_f:
            best_x, best_f = pop[i].copy(), float(fit[i])
        state = cma_update(state, pop, fit)
    return best_x, best_f, state
