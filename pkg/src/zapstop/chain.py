"""Markov-chain environments: explicit finite chains and the GBM price-ratio chain.

Both chain kinds expose the same small surface used by the learner and the
evaluator:

* ``start(rng, x0=None)`` returns a cursor positioned at ``X_0``;
* ``cursor.step(rng)`` advances one transition and returns the new state;
* ``cursor.advance(k, rng)`` returns the next ``k`` states as one array;
* ``running_cost(states)`` / ``stopping_cost(states)`` evaluate ``c`` and ``c_s``.

Chains are immutable parameter bundles. All mutable path state lives in the
cursor, which is owned by exactly one worker.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

# Seed namespaces: each purpose below draws from its own stream.
TRAIN_STREAM = 0
EVAL_STREAM = 1
NOISE_STREAM = 2
INSTANCE_STREAM = 3

_CHUNK = 8192


class ChainError(ValueError):
    """Raised for malformed chain parameters."""


def make_rng(seed: int, stream: int = TRAIN_STREAM) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` in the given seed namespace."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream,)))


def stationary_distribution(P) -> np.ndarray:
    """Stationary law of a row-stochastic matrix.

    One balance equation of ``pi^T (P - I) = 0`` is replaced by the
    normalisation ``sum(pi) = 1`` and the square system is solved directly.

    Raises
    ------
    ChainError
        If the chain has no unique stationary distribution (reducible or
        otherwise singular system).
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if P.ndim != 2 or P.shape[1] != n:
        raise ChainError("transition matrix must be square")
    M = (P - np.eye(n)).T
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    if np.linalg.matrix_rank(M) < n:
        raise ChainError("no unique stationary distribution (reducible chain)")
    pi = np.linalg.solve(M, rhs)
    if np.any(pi < -1e-12) or np.max(np.abs(pi @ P - pi)) > 1e-10:
        raise ChainError("no unique stationary distribution (reducible chain)")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@numba.njit(cache=True, nogil=True)
def _finite_walk(cum_P, x0, u):
    n = u.shape[0]
    out = np.empty(n, dtype=np.int64)
    x = x0
    last = cum_P.shape[1] - 1
    for k in range(n):
        row = cum_P[x]
        y = np.searchsorted(row, u[k], side="right")
        if y > last:
            y = last
        out[k] = y
        x = y
    return out


@dataclass(frozen=True, eq=False)
class FiniteChainModel:
    """Finite-state chain with running cost ``c``, stopping cost ``c_s`` and discount."""

    P: np.ndarray
    c: np.ndarray
    c_s: np.ndarray
    beta: float
    pi: np.ndarray = field(default=None)

    reward_convention = False

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        n = P.shape[0]
        if P.ndim != 2 or P.shape != (n, n) or n < 1:
            raise ChainError("P must be an n x n matrix")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ChainError("P must be row-stochastic")
        c = np.array(self.c, dtype=float).reshape(-1)
        c_s = np.array(self.c_s, dtype=float).reshape(-1)
        if c.shape != (n,) or c_s.shape != (n,):
            raise ChainError("cost vectors must have length n_states")
        if not 0.0 <= self.beta < 1.0:
            raise ChainError("beta must lie in [0, 1)")
        pi = stationary_distribution(P) if self.pi is None else np.array(self.pi, dtype=float)
        if (
            pi.shape != (n,)
            or np.any(pi < 0)
            or abs(pi.sum() - 1.0) > 1e-12
            or np.max(np.abs(pi @ P - pi)) > 1e-10
        ):
            raise ChainError("pi is not a stationary distribution of P")
        for name, arr in (("P", P), ("c", c), ("c_s", c_s), ("pi", pi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "beta", float(self.beta))
        cum = np.cumsum(P, axis=1)
        cum[:, -1] = 1.0
        object.__setattr__(self, "_cum_P", cum)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def state_dim(self) -> int:
        return 1

    def running_cost(self, states):
        return self.c[states]

    def stopping_cost(self, states):
        return self.c_s[states]

    def start(self, rng: np.random.Generator, x0: int | None = None) -> "FiniteCursor":
        """Cursor at ``x0``, or at a draw from ``pi`` when ``x0`` is None."""
        if x0 is None:
            x0 = int(np.searchsorted(np.cumsum(self.pi), rng.random(), side="right"))
            x0 = min(x0, self.n_states - 1)
        if not 0 <= x0 < self.n_states:
            raise ChainError(f"start state {x0} out of range")
        return FiniteCursor(self, int(x0))

    def walk(self, x0: int, u: np.ndarray) -> np.ndarray:
        """Deterministic path driven by uniforms ``u``; returns the ``len(u)`` successors of ``x0``."""
        return _finite_walk(self._cum_P, int(x0), np.asarray(u, dtype=float))

    def to_dict(self) -> dict:
        return {
            "kind": "finite",
            "n_states": self.n_states,
            "P": self.P.tolist(),
            "c": self.c.tolist(),
            "c_s": self.c_s.tolist(),
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FiniteChainModel":
        n = int(doc["n_states"])
        P = np.asarray(doc["P"], dtype=float).reshape(n, n)
        return cls(P=P, c=doc["c"], c_s=doc["c_s"], beta=doc["beta"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FiniteChainModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


class FiniteCursor:
    def __init__(self, model: FiniteChainModel, state: int):
        self.model = model
        self.state = state

    def step(self, rng: np.random.Generator) -> int:
        self.state = int(self.model.walk(self.state, rng.random(1))[0])
        return self.state

    def advance(self, k: int, rng: np.random.Generator) -> np.ndarray:
        path = self.model.walk(self.state, rng.random(k))
        if k:
            self.state = int(path[-1])
        return path


def random_finite_chain(n_states: int, seed: int, beta: float = 0.95) -> FiniteChainModel:
    """Random chain with a strictly positive kernel.

    Rows are Dirichlet-like draws bounded away from zero, so the chain is
    irreducible and aperiodic. ``c ~ U[0, 1]`` and ``c_s ~ U[0, 2]``.
    """
    if n_states < 2:
        raise ChainError("n_states must be >= 2")
    rng = make_rng(seed, INSTANCE_STREAM)
    W = rng.exponential(size=(n_states, n_states)) + 0.05
    P = W / W.sum(axis=1, keepdims=True)
    # exact row sums: absorb rounding in the largest entry of each row
    rows = np.arange(n_states)
    j = np.argmax(P, axis=1)
    P[rows, j] += 1.0 - P.sum(axis=1)
    c = rng.uniform(0.0, 1.0, n_states)
    c_s = rng.uniform(0.0, 2.0, n_states)
    return FiniteChainModel(P=P, c=c, c_s=c_s, beta=beta)


@dataclass(frozen=True)
class GbmRatioChain:
    """Price-ratio chain ``X_n = (p_{n-L+1}, ..., p_n) / p_{n-L}`` for a GBM price.

    The log-price moves by ``drift - sigma**2 / 2 + sigma * Z`` per step. The
    problem is cast in cost form with ``c = 0`` and ``c_s = -r`` where
    ``r(x) = x[-1]``.
    """

    window: int = 100
    sigma: float = 0.02
    drift: float = 0.0004
    beta: float = 0.999

    reward_convention = True

    def __post_init__(self):
        if self.window < 1:
            raise ChainError("window must be >= 1")
        if self.sigma < 0:
            raise ChainError("sigma must be >= 0")
        if not 0.0 <= self.beta < 1.0:
            raise ChainError("beta must lie in [0, 1)")

    @property
    def state_dim(self) -> int:
        return self.window

    def running_cost(self, states):
        states = np.asarray(states)
        return np.zeros(states.shape[:-1])

    def stopping_cost(self, states):
        return -np.asarray(states)[..., -1]

    @staticmethod
    def reward(states):
        return np.asarray(states)[..., -1]

    def increments(self, rng: np.random.Generator, k: int) -> np.ndarray:
        return (self.drift - 0.5 * self.sigma**2) + self.sigma * rng.standard_normal(k)

    def start(self, rng: np.random.Generator, x0=None) -> "GbmCursor":
        """Cursor after the warm-up of ``window + 1`` steps from a unit price.

        ``x0`` (a ratio vector) replaces the warm-up when given; the flat
        history ``np.ones(window)`` is the conventional start state.
        """
        L = self.window
        if x0 is not None:
            x0 = np.asarray(x0, dtype=float)
            if x0.shape != (L,) or np.any(x0 <= 0):
                raise ChainError("start state must be a positive vector of length window")
            log_prices = np.concatenate([[0.0], np.log(x0)])
        else:
            steps = self.increments(rng, L + 1)
            log_prices = np.cumsum(steps)[-(L + 1):]
        return GbmCursor(self, log_prices)


class GbmCursor:
    """Ring of the last ``L + 1`` log-prices (oldest first)."""

    def __init__(self, chain: GbmRatioChain, log_prices: np.ndarray):
        if log_prices.shape != (chain.window + 1,):
            raise ChainError("log-price window must hold window + 1 prices")
        self.chain = chain
        self.log_prices = log_prices - log_prices[0]

    @property
    def state(self) -> np.ndarray:
        lp = self.log_prices
        return np.exp(lp[1:] - lp[0])

    def step(self, rng: np.random.Generator) -> np.ndarray:
        inc = self.chain.increments(rng, 1)[0]
        lp = self.log_prices
        lp = np.append(lp[1:], lp[-1] + inc)
        self.log_prices = lp - lp[0]
        return self.state

    def advance(self, k: int, rng: np.random.Generator) -> np.ndarray:
        L = self.chain.window
        inc = self.chain.increments(rng, k)
        series = np.concatenate([self.log_prices, self.log_prices[-1] + np.cumsum(inc)])
        windows = np.lib.stride_tricks.sliding_window_view(series, L + 1)[1:]
        states = np.exp(windows[:, 1:] - windows[:, :1])
        tail = series[-(L + 1):]
        self.log_prices = tail - tail[0]
        return states


def sample_path(chain, n_steps: int, seed: int, x0=None) -> np.ndarray:
    """Return ``X_0, ..., X_{n_steps}`` as one array; a pure function of (chain, seed, x0)."""
    if n_steps < 1:
        raise ChainError("n_steps must be >= 1")
    rng = make_rng(seed)
    cursor = chain.start(rng, x0)
    first = np.asarray(cursor.state)[None, ...]
    parts = [first]
    left = n_steps
    while left:
        k = min(left, _CHUNK * 16)
        parts.append(cursor.advance(k, rng))
        left -= k
    return np.concatenate(parts)
