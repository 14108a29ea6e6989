"""Small feed-forward networks with hand-written backpropagation.

Two priors live here: a diagonal-Gaussian policy whose mean comes from an
MLP and whose log standard deviation is a free, state-independent vector,
and a scalar value network. They share no parameters. Both are trained
with RMSProp on the summed negative log-likelihood and half squared error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
HIDDEN_SIZES = (128, 128)
LOG_2PI = math.log(2.0 * math.pi)


def _param_count(sizes: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """Leaky-rectifier MLP whose parameters are views into one flat vector.

    ``weights[k]`` has shape ``(in, out)``; inputs are rows.
    """

    def __init__(self, sizes: Sequence[int], flat: Optional[np.ndarray] = None,
                 slope: float = LEAKY_SLOPE):
        self.sizes = tuple(int(n) for n in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        n = _param_count(self.sizes)
        if flat is None:
            flat = np.zeros(n)
        if flat.shape != (n,):
            raise ValueError(f"flat parameter vector must have length {n}, got {flat.shape}")
        self.flat = flat
        self.slope = slope
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        pos = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            self.biases.append(flat[pos:pos + fan_out])
            pos += fan_out

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, flat: Optional[np.ndarray] = None,
              slope: float = LEAKY_SLOPE) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        net = cls(sizes, flat, slope)
        for w in net.weights:
            fan_in, fan_out = w.shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        for b in net.biases:
            b[...] = 0.0
        return net

    @classmethod
    def from_arrays(cls, weights, biases, slope: float = LEAKY_SLOPE) -> "Mlp":
        weights = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in weights]
        sizes = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        net = cls(sizes, slope=slope)
        for dst, src in zip(net.weights, weights):
            dst[...] = src
        for dst, src in zip(net.biases, biases):
            dst[...] = np.asarray(src, dtype=np.float64).reshape(dst.shape)
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        return x

    def __call__(self, x) -> np.ndarray:
        h = self._check(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def forward_with_cache(self, x):
        h = self._check(x)
        acts = [h]
        masks = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                mask = np.where(h > 0, 1.0, self.slope)
                masks.append(mask)
                h = h * mask
                acts.append(h)
        return h, (acts, masks)

    def backward(self, cache, grad_out: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
        """Flat gradient (layout of ``self.flat``) for upstream ``grad_out``."""
        acts, masks = cache
        grad = np.empty_like(self.flat) if out is None else out
        view = Mlp(self.sizes, grad, self.slope)
        g = grad_out
        for i in reversed(range(len(self.weights))):
            np.matmul(acts[i].T, g, out=view.weights[i])
            np.sum(g, axis=0, out=view.biases[i])
            if i > 0:
                g = (g @ self.weights[i].T) * masks[i - 1]
        return grad


class GaussianPolicy:
    """Diagonal Gaussian: mean from an MLP, state-independent log std.

    ``flat`` holds the MLP parameters followed by ``log_std``.
    """

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = HIDDEN_SIZES,
                 flat: Optional[np.ndarray] = None):
        sizes = [state_dim, *hidden, action_dim]
        n = _param_count(sizes)
        if flat is None:
            flat = np.zeros(n + action_dim)
        if flat.shape != (n + action_dim,):
            raise ValueError(f"flat parameter vector must have length {n + action_dim}, got {flat.shape}")
        self.flat = flat
        self.mean_net = Mlp(sizes, flat[:n])
        self.log_std = flat[n:]

    @classmethod
    def build(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
              hidden: Sequence[int] = HIDDEN_SIZES) -> "GaussianPolicy":
        policy = cls(state_dim, action_dim, hidden)
        Mlp.build(policy.mean_net.sizes, rng, flat=policy.mean_net.flat)
        return policy

    @property
    def state_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def hidden(self):
        return self.mean_net.sizes[1:-1]

    def params(self) -> List[np.ndarray]:
        return self.mean_net.params() + [self.log_std]


class ValueNet:
    def __init__(self, state_dim: int, hidden: Sequence[int] = HIDDEN_SIZES,
                 flat: Optional[np.ndarray] = None):
        self.net = Mlp([state_dim, *hidden, 1], flat)
        self.flat = self.net.flat

    @classmethod
    def build(cls, state_dim: int, rng: np.random.Generator,
              hidden: Sequence[int] = HIDDEN_SIZES) -> "ValueNet":
        value = cls(state_dim, hidden)
        Mlp.build(value.net.sizes, rng, flat=value.flat)
        return value

    @property
    def state_dim(self) -> int:
        return self.net.in_dim

    @property
    def hidden(self):
        return self.net.sizes[1:-1]

    def params(self) -> List[np.ndarray]:
        return self.net.params()


def policy_forward(policy: GaussianPolicy, state):
    """Mean and standard deviation of the action distribution.

    Works on a single state or a batch (leading axis).
    """
    mean = policy.mean_net(state)
    std = np.broadcast_to(np.exp(policy.log_std), mean.shape).copy()
    return mean, std


def policy_sample(policy: GaussianPolicy, state, rng: np.random.Generator) -> np.ndarray:
    mean, std = policy_forward(policy, state)
    return mean + std * rng.standard_normal(mean.shape)


def policy_log_prob(policy: GaussianPolicy, state, action):
    mean, _ = policy_forward(policy, state)
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != policy.action_dim:
        raise ValueError(f"expected action width {policy.action_dim}, got {action.shape[-1]}")
    return gaussian_log_prob(mean, policy.log_std, action)


def gaussian_log_prob(mean, log_std, action):
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)


def value_forward(value: ValueNet, state):
    """Scalar for a single state, vector for a batch."""
    out = value.net(state)
    return out[..., 0] if np.ndim(state) > 1 else float(out[0])


def joint_loss(policy: GaussianPolicy, value: ValueNet, states, actions, returns):
    """Mean over the batch of ``-log p(a*|s) + 0.5 (R* - V(s))^2``.

    Returns ``(loss, policy_grad, value_grad)``; the gradients are flat
    vectors laid out like ``policy.flat`` and ``value.flat``.
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    r = np.asarray(returns, dtype=np.float64).reshape(-1)
    n = s.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if a.shape[0] != n or r.shape[0] != n:
        raise ValueError("states, actions and returns must have the same length")
    if not (np.isfinite(s).all() and np.isfinite(a).all() and np.isfinite(r).all()):
        raise ValueError("non-finite values in training batch")

    mu, p_cache = policy.mean_net.forward_with_cache(s)
    inv_std = np.exp(-policy.log_std)
    z = (a - mu) * inv_std
    nll = 0.5 * np.sum(z * z + 2.0 * policy.log_std + LOG_2PI, axis=1)

    v, v_cache = value.net.forward_with_cache(s)
    err = v[:, 0] - r
    loss = float(np.mean(nll + 0.5 * err * err))

    d_mu = -(z * inv_std) / n
    policy_grad = np.empty_like(policy.flat)
    k = policy.mean_net.flat.size
    policy.mean_net.backward(p_cache, d_mu, out=policy_grad[:k])
    policy_grad[k:] = np.sum(1.0 - z * z, axis=0) / n
    value_grad = value.net.backward(v_cache, (err / n)[:, None])
    return loss, policy_grad, value_grad


@dataclass
class RmsPropState:
    """Squared-gradient accumulator (one entry per parameter) and settings."""

    accumulator: np.ndarray
    learning_rate: float = 3e-3
    decay: float = 0.99
    clip_norm: float = 0.5
    eps: float = 1e-8
    steps: int = 0

    @classmethod
    def like(cls, params: np.ndarray, **kw) -> "RmsPropState":
        return cls(np.zeros_like(params), **kw)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = math.sqrt(float(grad @ grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def rmsprop_step(params: np.ndarray, grad: np.ndarray, opt: RmsPropState):
    """Clip ``grad`` to the global norm limit, then update ``params`` in place.

    ``params`` and ``grad`` are flat vectors (e.g. ``policy.flat``).
    """
    if params.shape != grad.shape or params.shape != opt.accumulator.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"accumulator {opt.accumulator.shape}"
        )
    if np.isnan(grad).any():
        raise ValueError("NaN gradient")
    g = clip_by_global_norm(grad, opt.clip_norm)
    acc = opt.accumulator
    acc *= opt.decay
    acc += (1.0 - opt.decay) * (g * g)
    params -= opt.learning_rate * g / np.sqrt(acc + opt.eps)
    opt.steps += 1
    return params, opt
