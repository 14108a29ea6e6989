"""Small environments with brute-force answers, shared by the test modules."""

import itertools

import numpy as np

from prhea.env import EnvSpec, Environment

GAMMA = 0.99


class ChoiceEnv(Environment):
    """Three discrete choices per step encoded as thirds of [-1, 1].

    Physics rows: (last choice,). The reward of choice ``c`` at step ``t``
    after previous choice ``p`` is ``table[t, p, c]``.
    """

    env_id = "choice"

    def __init__(self, table, steps=2):
        super().__init__()
        self.table = np.asarray(table, dtype=np.float64)
        self.spec = EnvSpec(2, 1, np.array([-1.0]), np.array([1.0]), steps)

    @staticmethod
    def choice(a):
        return np.where(a < -1 / 3, 0, np.where(a > 1 / 3, 2, 1))

    def _initial(self, rng):
        return np.array([0.0, 0.0])

    def _advance(self, phys, actions):
        prev = phys[:, 0].astype(int)
        t = phys[:, 1].astype(int)
        c = self.choice(actions[:, 0])
        reward = self.table[t, prev, c]
        nxt = np.stack([c.astype(float), t + 1.0], axis=1)
        return nxt, reward, np.zeros(len(phys), dtype=bool)

    def _observe(self, phys, t):
        return phys.copy()


class DiscreteWrapper(Environment):
    """Two steps of a real task restricted to three fixed actions.

    The single gene picks one of ``levels`` by thirds of [-1, 1]; resets
    draw a random start state so every seed poses a different problem.
    """

    def __init__(self, inner, levels, steps=2):
        super().__init__()
        self.inner = inner
        self.levels = np.asarray(levels, dtype=np.float64)
        self.env_id = "discrete-" + inner.env_id
        self.spec = EnvSpec(inner.spec.state_dim, 1, np.array([-1.0]), np.array([1.0]), steps)

    def _initial(self, rng):
        return rng.uniform(-1.5, 1.5, size=4) * np.array([1.0, 1.0, 0.2, 0.2])

    def _advance(self, phys, actions):
        return self.inner._advance(phys, self.levels[ChoiceEnv.choice(actions[:, 0])])

    def _observe(self, phys, t):
        return self.inner._observe(phys, t)


def enumerate_two_steps(env, snap, gamma=GAMMA):
    values = np.zeros((3, 3))
    for a, b in itertools.product(range(3), repeat=2):
        env.restore(snap)
        r0 = env.step([(-1.0, 0.0, 1.0)[a]]).reward
        r1 = env.step([(-1.0, 0.0, 1.0)[b]]).reward
        values[a, b] = r0 + gamma * r1
    return values


class QuadEnv(Environment):
    env_id = "quad"
    spec = EnvSpec(1, 1, np.array([-1.0]), np.array([1.0]), 1)

    def _initial(self, rng):
        return np.zeros(1)

    def _advance(self, phys, actions):
        return phys + actions, -(actions[:, 0] - 0.3) ** 2, np.zeros(len(phys), dtype=bool)

    def _observe(self, phys, t):
        return phys.copy()
