"""Matrix-gain Q-learning for optimal stopping, including two-time-scale Zap-Q.

The recursion is

    theta_{n+1} = theta_n + alpha_{n+1} G_{n+1} psi(X_n) d_{n+1}

with ``G = I`` (identity), ``G = Sigma_hat^+`` (fixed-point Kalman filter) or
``G = -A_hat^+`` (Zap). Within a step the gain estimate is updated before the
parameter, so Zap uses ``A_hat_{n+1}``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .chain import TRAIN_STREAM, make_rng
from .features import FeatureMap
from .gains import (
    DEFAULT_REL_THRESHOLD,
    STRATEGY_CODE,
    ZAP,
    GainError,
    StepSizeSchedule,
    _step,
    guarded_inverse_into,
)

CHUNK = 8192


def td_term(theta, psi_n, psi_next, c_n: float, cs_next: float, beta: float) -> float:
    """Temporal difference ``c(X_n) + beta min(c_s(X_{n+1}), Q(X_{n+1})) - Q(X_n)``."""
    theta = np.asarray(theta, dtype=float)
    q_next = float(np.dot(theta, psi_next))
    return c_n + beta * min(cs_next, q_next) - float(np.dot(theta, psi_n))


def snapshot_points(plan, N: int) -> np.ndarray:
    """Sorted update indices at which to record ``theta_n``; always includes ``N``.

    Run records additionally carry the initial condition at ``n = 0``.

    ``plan`` is ``"geometric:<ratio>"`` (``n = ceil(ratio**k)``), ``"every:<k>"``,
    ``"final"``, or an explicit iterable of indices.
    """
    if isinstance(plan, str):
        kind, _, arg = plan.partition(":")
        if kind == "geometric":
            ratio = float(arg or 1.2)
            if ratio <= 1.0:
                raise ValueError("geometric snapshot ratio must exceed 1")
            kmax = int(math.log(N) / math.log(ratio)) + 2
            pts = np.ceil(ratio ** np.arange(kmax)).astype(np.int64)
        elif kind == "every":
            pts = np.arange(int(arg), N + 1, int(arg), dtype=np.int64)
        elif kind == "final":
            pts = np.empty(0, dtype=np.int64)
        else:
            raise ValueError(f"unknown snapshot plan {plan!r}")
    else:
        pts = np.asarray(list(plan), dtype=np.int64)
    pts = pts[(pts >= 1) & (pts <= N)]
    return np.unique(np.append(pts, N))


@numba.njit(cache=True, nogil=True)
def _sa_chunk(
    psi, c_run, c_stop, beta, n0, theta, M, Minv, strategy, alpha_p, gamma_p, rel,
    clamp_radius, eig_delta, snap_ns, snap_pos, snap_theta, snap_A, diag,
):
    # diag: [truncations, max |theta|, diverged_at, svd fallbacks]
    k = psi.shape[0] - 1
    d = psi.shape[1]
    z = np.empty(d)
    old = np.empty(d)
    work = np.empty((d, d))
    for i in range(k):
        n = n0 + i + 1
        q_n = 0.0
        q_next = 0.0
        for a in range(d):
            q_n += theta[a] * psi[i, a]
            q_next += theta[a] * psi[i + 1, a]
        cs = c_stop[i + 1]
        cont = 1.0 if q_next < cs else 0.0
        td = c_run[i] + beta * min(cs, q_next) - q_n
        alpha = _step(alpha_p, n)
        for a in range(d):
            z[a] = psi[i, a] * td
            old[a] = theta[a]
        if strategy == 0:
            for a in range(d):
                theta[a] += alpha * z[a]
        else:
            gamma = _step(gamma_p, n)
            if strategy == 2:
                for a in range(d):
                    for b in range(d):
                        sample = psi[i, a] * (beta * cont * psi[i + 1, b] - psi[i, b])
                        M[a, b] = (1.0 - gamma) * M[a, b] + gamma * sample
            else:
                for a in range(d):
                    for b in range(d):
                        M[a, b] = (1.0 - gamma) * M[a, b] + gamma * psi[i, a] * psi[i, b]
            work[:, :] = M
            if eig_delta > 0.0:
                lam = np.linalg.eigvalsh(0.5 * (M + M.T))[d - 1]
                if lam > -eig_delta:
                    for a in range(d):
                        work[a, a] -= lam + eig_delta
            path = guarded_inverse_into(work, rel, Minv)
            if path == 2:
                diag[0] += 1
            if path >= 1:
                diag[3] += 1
            sign = -1.0 if strategy == 2 else 1.0
            for a in range(d):
                s = 0.0
                for b in range(d):
                    s += Minv[a, b] * z[b]
                theta[a] += sign * alpha * s
        nrm = 0.0
        for a in range(d):
            nrm += theta[a] * theta[a]
        nrm = math.sqrt(nrm)
        if not np.isfinite(nrm):
            theta[:] = old
            diag[2] = n
            return snap_pos
        if clamp_radius > 0.0 and nrm > clamp_radius:
            for a in range(d):
                theta[a] *= clamp_radius / nrm
            nrm = clamp_radius
        if nrm > diag[1]:
            diag[1] = nrm
        if snap_pos < snap_ns.shape[0] and snap_ns[snap_pos] == n:
            snap_theta[snap_pos, :] = theta
            snap_A[snap_pos, :, :] = M
            snap_pos += 1
    return snap_pos


@dataclass
class RunRecord:
    """Seeded trajectory of parameter snapshots plus metadata."""

    config: dict
    seed: int
    snapshot_n: np.ndarray
    snapshot_theta: np.ndarray
    snapshot_A: np.ndarray | None
    status: str = "ok"
    diagnostics: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def theta_final(self) -> np.ndarray:
        return self.snapshot_theta[-1]

    @property
    def A_final(self) -> np.ndarray | None:
        return None if self.snapshot_A is None else self.snapshot_A[-1]

    @property
    def N(self) -> int:
        return int(self.snapshot_n[-1])

    def theta_at(self, n: int) -> np.ndarray:
        idx = np.searchsorted(self.snapshot_n, n)
        if idx == len(self.snapshot_n) or self.snapshot_n[idx] != n:
            raise KeyError(f"no snapshot at n={n}")
        return self.snapshot_theta[idx]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "seed": self.seed,
            "status": self.status,
            "diagnostics": self.diagnostics,
            "snapshot_n": self.snapshot_n.tolist(),
            "snapshot_theta": self.snapshot_theta.tolist(),
            "snapshot_A": None if self.snapshot_A is None else self.snapshot_A.tolist(),
            "theta_final": self.theta_final.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        A = doc.get("snapshot_A")
        return cls(
            config=doc["config"],
            seed=int(doc["seed"]),
            snapshot_n=np.asarray(doc["snapshot_n"], dtype=np.int64),
            snapshot_theta=np.asarray(doc["snapshot_theta"], dtype=float),
            snapshot_A=None if A is None else np.asarray(A, dtype=float),
            status=doc.get("status", "ok"),
            diagnostics=doc.get("diagnostics", {}),
            version=doc.get("version", "unknown"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path) -> None:
        from .io import write_csv

        d = self.snapshot_theta.shape[1]
        rows = [[int(n), *map(float, th)] for n, th in zip(self.snapshot_n, self.snapshot_theta)]
        write_csv(path, ["n", *[f"theta_{i}" for i in range(d)]], rows)


def run_matrix_gain(
    chain,
    features: FeatureMap,
    strategy: str,
    alpha: StepSizeSchedule,
    gamma: StepSizeSchedule | None,
    N: int,
    seed: int,
    snapshot_plan="geometric:1.2",
    theta0=None,
    matrix0=None,
    rel_threshold: float = DEFAULT_REL_THRESHOLD,
    clamp_radius: float = 0.0,
    eig_clamp: float = 0.0,
    x0=None,
    config: dict | None = None,
) -> RunRecord:
    """Run ``N`` updates of matrix-gain Q-learning along one seeded path.

    ``gamma`` drives the gain estimate: ``A_hat`` for Zap (the faster time
    scale) and ``Sigma_hat`` for Kalman. A non-finite ``theta`` stops the run
    and yields a record with ``status == "diverged"``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if strategy not in STRATEGY_CODE:
        raise GainError(f"unknown gain strategy {strategy!r}")
    if strategy != "identity" and gamma is None:
        raise GainError(f"strategy {strategy!r} needs a gain-estimate schedule")
    d = features.d
    theta = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    if theta.shape != (d,):
        raise ValueError("theta0 must have length d")
    if matrix0 is None:
        M = -np.eye(d) if strategy == ZAP else np.eye(d)
    else:
        M = np.array(matrix0, dtype=float)
    if strategy == ZAP and np.max(np.linalg.eigvalsh(0.5 * (M + M.T))) >= 0:
        raise GainError("Zap needs a negative definite initial A_hat")
    Minv = np.zeros((d, d))
    theta_init, M_init = theta.copy(), M.copy()
    snap_ns = snapshot_points(snapshot_plan, N)
    snap_theta = np.empty((len(snap_ns), d))
    snap_A = np.empty((len(snap_ns), d, d))
    diag = np.array([0.0, float(np.linalg.norm(theta)), 0.0, 0.0])
    gamma_p = (gamma or alpha).params

    rng = make_rng(seed, TRAIN_STREAM)
    cursor = chain.start(rng, x0)
    prev = np.asarray(cursor.state)[None, ...]
    n, pos = 0, 0
    while n < N:
        k = min(CHUNK, N - n)
        states = np.concatenate([prev, cursor.advance(k, rng)])
        psi = np.ascontiguousarray(features.evaluate_batch(states))
        pos = _sa_chunk(
            psi, np.asarray(chain.running_cost(states), dtype=float),
            np.asarray(chain.stopping_cost(states), dtype=float), chain.beta, n,
            theta, M, Minv, STRATEGY_CODE[strategy], alpha.params, gamma_p, rel_threshold,
            clamp_radius, eig_clamp, snap_ns, pos, snap_theta, snap_A, diag,
        )
        if diag[2]:
            break
        n += k
        prev = states[-1:]

    status = "ok"
    if diag[2]:
        status = "diverged"
        last = int(diag[2]) - 1
        snap_ns, snap_theta, snap_A = snap_ns[:pos], snap_theta[:pos], snap_A[:pos]
        if last > (snap_ns[-1] if pos else 0):
            snap_ns = np.append(snap_ns, last)
            snap_theta = np.vstack([snap_theta, theta[None, :]])
            snap_A = np.concatenate([snap_A, M[None]])
    snap_ns = np.concatenate([[0], snap_ns])
    snap_theta = np.vstack([theta_init[None, :], snap_theta])
    snap_A = np.concatenate([M_init[None], snap_A])
    effective = {
        "strategy": strategy,
        "alpha": alpha.to_dict(),
        "gamma": None if gamma is None else gamma.to_dict(),
        "N": N,
        "basis": features.label,
        "beta": chain.beta,
        "rel_threshold": rel_threshold,
        "clamp_radius": clamp_radius,
        "eig_clamp": eig_clamp,
        "snapshot_plan": snapshot_plan if isinstance(snapshot_plan, str) else "explicit",
    }
    if config:
        effective = {**config, "effective": effective}
    return RunRecord(
        config=effective,
        seed=int(seed),
        snapshot_n=snap_ns,
        snapshot_theta=snap_theta,
        snapshot_A=None if strategy == "identity" else snap_A,
        status=status,
        diagnostics={
            "pinv_truncations": int(diag[0]),
            "max_theta_norm": float(diag[1]),
            "diverged_at": int(diag[2]) or None,
            "svd_fallbacks": int(diag[3]),
        },
    )


def run_replicas(chain, features, M: int, base_seed: int, threads: int = 1, **kwargs) -> list[RunRecord]:
    """``M`` independent runs with seeds ``base_seed + m``, ordered by replica index.

    The numba kernel releases the GIL, so ``threads > 1`` gives real
    parallelism. A diverged replica is returned as such; siblings are unaffected.
    """
    if M < 1:
        raise ValueError("M must be >= 1")

    def one(m):
        return run_matrix_gain(chain, features, seed=base_seed + m, **kwargs)

    if threads <= 1:
        return [one(m) for m in range(M)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(M)))
