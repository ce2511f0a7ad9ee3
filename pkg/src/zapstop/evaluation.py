"""Monte-Carlo evaluation of the stopping policies ``phi^theta``.

All paths are advanced together, and several parameter vectors can be scored
on the *same* paths (common random numbers), which keeps comparisons between
algorithms free of evaluation noise differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import EVAL_STREAM, FiniteChainModel, GbmRatioChain, make_rng
from .features import FeatureMap

DEFAULT_TRUNCATION = 1e-6


@dataclass
class PolicyValueEstimate:
    """Mean discounted value (reward for reward-form chains, cost otherwise)."""

    mean: float
    se: float
    n_runs: int
    horizon: int
    truncation_bound: float
    n_truncated: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class RunningMoments:
    """Single-pass mean/variance, merged blockwise (Chan et al. update)."""

    def __init__(self, shape=()):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def update(self, block) -> None:
        block = np.asarray(block, dtype=float)
        k = block.shape[0]
        if k == 0:
            return
        b_mean = block.mean(axis=0)
        b_mean = b_mean + (block - b_mean).mean(axis=0)  # one refinement: constant blocks come out exact
        b_m2 = ((block - b_mean) ** 2).sum(axis=0)
        delta = b_mean - self.mean
        tot = self.n + k
        self.mean = self.mean + delta * k / tot
        self.m2 = self.m2 + b_m2 + delta**2 * self.n * k / tot
        self.n = tot

    @property
    def variance(self):
        return self.m2 / (self.n - 1) if self.n > 1 else np.zeros_like(self.m2)


def default_horizon(beta: float, tol: float = DEFAULT_TRUNCATION) -> int:
    """Smallest ``T`` with ``beta**T < tol``."""
    if beta == 0.0:
        return 1
    return max(1, math.floor(math.log(tol) / math.log(beta)) + 1)


class _Paths:
    """``n`` simultaneous paths of a chain, all started at ``x0``."""

    def __init__(self, chain, x0, n: int, rng: np.random.Generator):
        self.chain = chain
        self.rng = rng
        if isinstance(chain, FiniteChainModel):
            self.states = np.full(n, int(x0), dtype=np.int64)
            self._cum = np.cumsum(chain.P, axis=1)
            self._cum[:, -1] = 1.0
        elif isinstance(chain, GbmRatioChain):
            x0 = np.ones(chain.window) if x0 is None else np.asarray(x0, dtype=float)
            lp = np.concatenate([[0.0], np.log(x0)])
            self.log_prices = np.tile(lp, (n, 1))
            self.states = np.tile(x0, (n, 1))
        else:
            raise TypeError(f"unsupported chain type {type(chain).__name__}")

    def step(self, alive: np.ndarray) -> np.ndarray:
        """Advance the paths listed in ``alive``; returns their new states.

        Randomness is drawn for every path so that a path's noise never
        depends on which other paths are still running.
        """
        chain = self.chain
        n = self.states.shape[0]
        if isinstance(chain, FiniteChainModel):
            u = self.rng.random(n)[alive]
            y = (u[:, None] >= self._cum[self.states[alive]]).sum(axis=1)
            self.states[alive] = np.minimum(y, chain.n_states - 1)
        else:
            inc = chain.increments(self.rng, n)[alive]
            lp = self.log_prices[alive]
            lp[:, :-1] = lp[:, 1:]
            lp[:, -1] = lp[:, -2] + inc
            lp -= lp[:, :1]
            self.log_prices[alive] = lp
            self.states[alive] = np.exp(lp[:, 1:])
        return self.states[alive]


def evaluate_policies(chain, thetas, features: FeatureMap, x0, n_runs: int, seed: int,
                      horizon: int | None = None, beta: float | None = None,
                      block: int = 4096) -> list[PolicyValueEstimate]:
    """Estimate ``h_{phi^theta}(x0)`` for each ``theta`` on common random paths.

    Each path stops at ``tau = min{n : c_s(X_n) <= Q^theta(X_n)}``. Reward-form
    chains score ``beta**tau r(X_tau)``; cost-form chains score the running
    cost up to ``tau`` plus ``beta**tau c_s(X_tau)``. Paths still running at
    the horizon get terminal value 0 and are counted as truncated. ``beta``
    overrides the chain's discount factor for evaluation only.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != features.d:
        raise ValueError("theta dimension does not match the basis")
    beta = chain.beta if beta is None else float(beta)
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must lie in [0, 1)")
    H = default_horizon(beta) if horizon is None else int(horizon)
    reward = getattr(chain, "reward_convention", False)
    rng = make_rng(seed, EVAL_STREAM)
    K = thetas.shape[0]
    moments = RunningMoments((K,))
    truncated = np.zeros(K, dtype=np.int64)
    tail_scale = np.zeros(K)
    done_runs = 0
    while done_runs < n_runs:
        m = min(block, n_runs - done_runs)
        paths = _Paths(chain, x0, m, rng)
        values = np.zeros((m, K))
        active = np.ones((m, K), dtype=bool)
        disc = 1.0
        alive = np.arange(m)
        states = paths.states
        for t in range(H + 1):
            psi = features.evaluate_batch(states)
            q = psi @ thetas.T
            cs = np.asarray(chain.stopping_cost(states), dtype=float)
            act = active[alive]
            stop = act & (cs[:, None] <= q)
            payoff = -cs if reward else cs
            act &= ~stop
            gain = np.where(stop, disc * payoff[:, None], 0.0)
            if not reward:
                c = np.asarray(chain.running_cost(states), dtype=float)
                gain += np.where(act, disc * c[:, None], 0.0)
            values[alive] += gain
            active[alive] = act
            if t == H:
                truncated += act.sum(axis=0)
                tail_scale = np.maximum(tail_scale, np.max(np.where(act, np.abs(cs)[:, None], 0.0), axis=0))
                break
            keep = act.any(axis=1)
            if not keep.any():
                break
            alive = alive[keep]
            disc *= beta
            states = paths.step(alive)
        moments.update(values)
        done_runs += m
    se = np.sqrt(moments.variance / moments.n)
    bound = beta ** (H + 1) * tail_scale
    return [
        PolicyValueEstimate(float(moments.mean[k]), float(se[k]), n_runs, H, float(bound[k]), int(truncated[k]))
        for k in range(K)
    ]


def mc_policy_value(chain, theta, features, x0, n_runs: int, seed: int, horizon=None,
                    beta=None) -> PolicyValueEstimate:
    """Single-policy form of :func:`evaluate_policies`."""
    return evaluate_policies(chain, [theta], features, x0, n_runs, seed, horizon, beta)[0]


def histogram(values, bins: int = 30):
    """``(edges, counts)``; identical values collapse to one degenerate bin."""
    values = np.asarray(values, dtype=float)
    if np.all(values == values[0]):
        return np.array([values[0], values[0]]), np.array([len(values)])
    counts, edges = np.histogram(values, bins=bins)
    return edges, counts


def reward_histogram(theta_list, chain, features, x0, n_runs: int, seed: int, bins: int = 30, horizon=None,
                     beta=None):
    """Evaluate every ``theta`` (common random numbers) and histogram the means."""
    if len(theta_list) == 0:
        raise ValueError("theta_list is empty")
    estimates = evaluate_policies(chain, theta_list, features, x0, n_runs, seed, horizon, beta)
    edges, counts = histogram([e.mean for e in estimates], bins)
    return estimates, edges, counts
