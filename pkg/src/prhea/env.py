"""Deterministic desk-scale control tasks with an exact forward model.

Every task is a small ODE integrated by semi-implicit Euler with a fixed
step of ``DT`` seconds. The integrator works on a batch of physical states
at once: the single-instance :meth:`Environment.step` is simply the batch
path with one row, so planning rollouts and real steps share one code path
and agree bit for bit.

Observations are built to stay O(1) so the networks need no input
normalization. Every task appends the elapsed fraction of the episode when
the time limit matters for the value of a state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Type

import numpy as np

DT = 0.05

# PointMass: planar double integrator driven to a fixed goal.
PM_GOAL = (2.0, 1.0)
PM_ACCEL = 2.0
PM_DAMPING = 0.5
PM_MAX_STEPS = 200

# TrapSwimmer: a body with one spring-loaded paddle ("leg").
#   Opening the leg works against the spring and the water, costs effort and
#   pushes the body backwards. Releasing it snaps the leg shut and the
#   thrust grows with how far the leg was open, so only wide strokes pay.
#   Drag is strong, so speed follows the stroke and every opening phase
#   briefly drives the body backwards.
SW_MAX_STEPS = 300
SW_TORQUE_SCALE = 100.0  # joint torque u = SW_TORQUE_SCALE * action
SW_EFFORT_COEF = 1e-5
SW_LEG_GAIN = 44.0  # leg angular acceleration per unit action
SW_SPRING = 40.0
SW_LEG_DAMPING = 8.0
SW_LEG_MAX = 1.0
SW_CLOSE_THRUST = 3.0  # forward thrust per unit (opening * closing speed)
SW_OPEN_THRUST = 1.15  # backward thrust per unit opening speed
SW_DRIFT = 0.025  # steady forward thrust from the tail
SW_DRAG = 2.0  # fast decay, so every opening shows up as negative speed

# LeanWalker: torso on a cart. Leaning forward converts into forward speed,
#   but the hip torque can only hold a limited lean; past it the torso
#   falls and the episode ends.
LW_MAX_STEPS = 300
LW_GRAVITY = 4.0  # tilt acceleration per unit sin(tilt)
LW_HIP_GAIN = 1.0  # tilt acceleration per unit action (positive pushes back)
LW_TILT_DAMPING = 0.5
LW_LEAN_THRUST = 2.0
LW_DRAG = 0.5
LW_ALIVE_BONUS = 1.0
LW_TILT_LIMIT = 0.8
LW_INIT_NOISE = 0.01


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_steps: int

    def __post_init__(self):
        if not np.all(np.asarray(self.action_low) < np.asarray(self.action_high)):
            raise ValueError("action_low must be strictly below action_high")

    def clip(self, actions):
        return np.minimum(np.maximum(actions, self.action_low), self.action_high)


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class Snapshot:
    env_id: str
    physics: np.ndarray
    step_count: int
    done: bool

    def to_bytes(self) -> bytes:
        head = f"{self.env_id}|{self.step_count}|{int(self.done)}|".encode()
        return head + self.physics.astype("<f8").tobytes()


class Environment:
    """Forward-model contract shared by all tasks.

    Subclasses define ``env_id``, ``spec``, the physical state layout and
    three batch functions: :meth:`_initial`, :meth:`_advance` and
    :meth:`_observe`.
    """

    env_id: str = ""
    spec: EnvSpec

    def __init__(self):
        self._phys: Optional[np.ndarray] = None
        self._t = 0
        self._done = False

    # -- batch primitives ----------------------------------------------------
    def _initial(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, phys: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(next physics, reward, failed) for every row."""
        raise NotImplementedError

    def _observe(self, phys: np.ndarray, t: int) -> np.ndarray:
        raise NotImplementedError

    def batch_step(self, phys: np.ndarray, t: int, actions) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Advance ``phys`` (one row per clone, all at step ``t``) by one step.

        Returns ``(next_phys, rewards, terminal)``; terminal covers both
        failure and the episode time limit.
        """
        actions = self.spec.clip(np.asarray(actions, dtype=np.float64).reshape(phys.shape[0], -1))
        nxt, reward, failed = self._advance(phys, actions)
        terminal = failed | (t + 1 >= self.spec.max_episode_steps)
        return nxt, reward, terminal

    def observe(self, phys: np.ndarray, t: int) -> np.ndarray:
        return self._observe(phys, t)

    def clones(self, snapshot: Snapshot, count: int) -> np.ndarray:
        self._check_snapshot(snapshot)
        return np.repeat(snapshot.physics[None, :], count, axis=0)

    # -- single-instance API -------------------------------------------------
    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._phys = self._initial(rng)
        self._t = 0
        self._done = False
        return self.state

    @property
    def state(self) -> np.ndarray:
        self._require_reset()
        return self._observe(self._phys[None, :], self._t)[0]

    @property
    def step_count(self) -> int:
        return self._t

    @property
    def done(self) -> bool:
        return self._done

    def step(self, action) -> StepResult:
        self._require_reset()
        if self._done:
            raise EnvError(f"{self.env_id}: step() called on a terminal environment")
        nxt, reward, terminal = self.batch_step(self._phys[None, :], self._t, action)
        r = float(reward[0])
        if math.isnan(r):
            raise EnvError(f"{self.env_id}: NaN reward at step {self._t}")
        self._phys = nxt[0]
        self._t += 1
        self._done = bool(terminal[0])
        return StepResult(r, self.state, self._done)

    def snapshot(self) -> Snapshot:
        self._require_reset()
        return Snapshot(self.env_id, self._phys.copy(), self._t, self._done)

    def restore(self, snapshot: Snapshot) -> None:
        self._check_snapshot(snapshot)
        self._phys = snapshot.physics.copy()
        self._t = snapshot.step_count
        self._done = snapshot.done

    def _check_snapshot(self, snapshot: Snapshot) -> None:
        if snapshot.env_id != self.env_id:
            raise EnvError(f"snapshot from {snapshot.env_id!r} cannot be restored into {self.env_id!r}")

    def _require_reset(self) -> None:
        if self._phys is None:
            raise EnvError(f"{self.env_id}: call reset() first")


class PointMass(Environment):
    """Planar double integrator; reward is the reduction in goal distance.

    An episode's return telescopes to initial minus final distance, so a
    mass left at rest earns exactly zero.

    Physics rows: ``(x, y, vx, vy)``. Observation: offset to the goal and
    velocity.
    """

    env_id = "pointmass"
    spec = EnvSpec(4, 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]), PM_MAX_STEPS)

    def _initial(self, rng):
        return np.zeros(4)

    def _advance(self, phys, actions):
        nxt = np.empty_like(phys)
        vel = phys[:, 2:] + DT * (PM_ACCEL * actions - PM_DAMPING * phys[:, 2:])
        nxt[:, :2] = phys[:, :2] + DT * vel
        nxt[:, 2:] = vel
        reward = self._distance(phys) - self._distance(nxt)
        return nxt, reward, np.zeros(len(phys), dtype=bool)

    @staticmethod
    def _distance(phys):
        dx = phys[:, 0] - PM_GOAL[0]
        dy = phys[:, 1] - PM_GOAL[1]
        return np.sqrt(dx * dx + dy * dy)

    def _observe(self, phys, t):
        goal = np.array(PM_GOAL)
        return np.concatenate([phys[:, :2] - goal, phys[:, 2:]], axis=1)

    def distance_to_goal(self) -> float:
        self._require_reset()
        return float(self._distance(self._phys[None, :])[0])


def swimmer_reward(velocity, torque):
    """Forward velocity minus a quadratic effort penalty on joint torque."""
    torque = np.asarray(torque, dtype=np.float64)
    return velocity - SW_EFFORT_COEF * (torque * torque).sum(axis=-1)


class TrapSwimmer(Environment):
    """One-legged swimmer whose useful stroke starts with a costly phase.

    Physics rows: ``(x, v, leg, leg_rate)`` with ``leg`` in ``[0, 1]``
    (0 = closed). Observation: ``(v, leg, leg_rate / 10, elapsed fraction)``.
    Holding any constant action leaves the leg still, so only the tail
    drift moves the body.
    """

    env_id = "trapswimmer"
    spec = EnvSpec(4, 1, np.array([-1.0]), np.array([1.0]), SW_MAX_STEPS)

    def _initial(self, rng):
        return np.zeros(4)

    def _advance(self, phys, actions):
        x, v, leg, rate = phys.T
        a = actions[:, 0]
        nxt = np.empty_like(phys)
        rate = rate + DT * (SW_LEG_GAIN * a - SW_SPRING * leg - SW_LEG_DAMPING * rate)
        new_leg = leg + DT * rate
        at_stop = (new_leg <= 0.0) | (new_leg >= SW_LEG_MAX)
        new_leg = np.minimum(np.maximum(new_leg, 0.0), SW_LEG_MAX)
        leg_speed = (new_leg - leg) / DT
        thrust = np.where(
            leg_speed < 0.0,
            -SW_CLOSE_THRUST * leg * leg_speed,
            -SW_OPEN_THRUST * leg_speed,
        )
        v = v + DT * (thrust + SW_DRIFT - SW_DRAG * v)
        nxt[:, 0] = x + DT * v
        nxt[:, 1] = v
        nxt[:, 2] = new_leg
        nxt[:, 3] = np.where(at_stop, 0.0, rate)
        reward = swimmer_reward(v, SW_TORQUE_SCALE * actions)
        return nxt, reward, np.zeros(len(phys), dtype=bool)

    def _observe(self, phys, t):
        frac = np.full(len(phys), t / self.spec.max_episode_steps)
        return np.stack([phys[:, 1], phys[:, 2], phys[:, 3] / 10.0, frac], axis=1)


class LeanWalker(Environment):
    """Torso-on-cart walker rewarded for speed plus an alive bonus.

    Physics rows: ``(x, v, tilt, tilt_rate)``; positive tilt leans forward.
    Observation: ``(v, sin tilt, cos tilt, tilt_rate, elapsed fraction)``.
    The episode ends once ``|tilt|`` exceeds ``LW_TILT_LIMIT``.
    """

    env_id = "leanwalker"
    spec = EnvSpec(5, 1, np.array([-1.0]), np.array([1.0]), LW_MAX_STEPS)

    def _initial(self, rng):
        tilt = rng.uniform(-LW_INIT_NOISE, LW_INIT_NOISE)
        return np.array([0.0, 0.0, tilt, 0.0])

    def _advance(self, phys, actions):
        x, v, tilt, rate = phys.T
        a = actions[:, 0]
        nxt = np.empty_like(phys)
        rate = rate + DT * (LW_GRAVITY * np.sin(tilt) - LW_HIP_GAIN * a - LW_TILT_DAMPING * rate)
        tilt = tilt + DT * rate
        v = v + DT * (LW_LEAN_THRUST * np.sin(tilt) - LW_DRAG * v)
        nxt[:, 0] = x + DT * v
        nxt[:, 1] = v
        nxt[:, 2] = tilt
        nxt[:, 3] = rate
        failed = np.abs(tilt) > LW_TILT_LIMIT
        reward = v + LW_ALIVE_BONUS
        return nxt, reward, failed

    def _observe(self, phys, t):
        frac = np.full(len(phys), t / self.spec.max_episode_steps)
        tilt = phys[:, 2]
        return np.stack([phys[:, 1], np.sin(tilt), np.cos(tilt), phys[:, 3], frac], axis=1)


ENVIRONMENTS: Dict[str, Type[Environment]] = {
    cls.env_id: cls for cls in (PointMass, TrapSwimmer, LeanWalker)
}


def make_env(env_id: str) -> Environment:
    try:
        return ENVIRONMENTS[env_id]()
    except KeyError:
        known = ", ".join(sorted(ENVIRONMENTS))
        raise ValueError(f"unknown environment id {env_id!r} (known: {known})") from None
