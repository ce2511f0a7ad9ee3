"""Step-size schedules, matrix-gain strategies and the guarded pseudo-inverse."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

DEFAULT_REL_THRESHOLD = 1e-8

IDENTITY, KALMAN, ZAP = "identity", "kalman", "zap"
STRATEGIES = (IDENTITY, KALMAN, ZAP)
STRATEGY_CODE = {IDENTITY: 0, KALMAN: 1, ZAP: 2}

SCHEDULE_KINDS = ("harmonic", "scaled", "polynomial", "scaled-harmonic")
_KIND_CODE = {k: i for i, k in enumerate(SCHEDULE_KINDS)}


class GainError(ValueError):
    pass


@dataclass(frozen=True)
class StepSizeSchedule:
    """A positive, nonincreasing step-size sequence indexed from ``n = 1``.

    ``harmonic``: 1/n; ``scaled``: g/(b+n); ``polynomial``: 1/n**rho with
    rho in (0.5, 1); ``scaled-harmonic``: g/n.
    """

    kind: str = "harmonic"
    g: float = 1.0
    b: float = 0.0
    rho: float = 0.85

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise GainError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "polynomial" and not 0.5 < self.rho < 1.0:
            raise GainError("polynomial schedule needs rho in (0.5, 1)")
        if self.kind in ("scaled", "scaled-harmonic") and self.g <= 0:
            raise GainError("gain g must be positive")
        if self.kind == "scaled" and self.b < 0:
            raise GainError("offset b must be >= 0")

    @property
    def code(self) -> int:
        return _KIND_CODE[self.kind]

    @property
    def params(self) -> np.ndarray:
        return np.array([self.code, self.g, self.b, self.rho], dtype=float)

    @property
    def asymptotic_scale(self) -> float | None:
        """``lim n * alpha_n`` (None for the polynomial kind, where it is infinite)."""
        if self.kind == "harmonic":
            return 1.0
        if self.kind == "polynomial":
            return None
        return self.g

    def to_dict(self) -> dict:
        return {"kind": self.kind, "g": self.g, "b": self.b, "rho": self.rho}

    def __call__(self, n: int) -> float:
        return step_size(self, n)


@numba.njit(cache=True, nogil=True)
def _step(params, n):
    kind = int(params[0])
    if kind == 0:
        return 1.0 / n
    if kind == 1:
        return params[1] / (params[2] + n)
    if kind == 2:
        return n ** (-params[3])
    return params[1] / n


def step_size(schedule: StepSizeSchedule, n: int) -> float:
    if n < 1:
        raise GainError("step sizes are indexed from n = 1")
    return float(_step(schedule.params, float(n)))


def a_sample(psi_n, psi_next, continue_indicator: int, beta: float) -> np.ndarray:
    """Rank-one sample ``psi_n [beta * I * psi_next - psi_n]^T`` of the mean-field Jacobian."""
    psi_n = np.asarray(psi_n, dtype=float)
    psi_next = np.asarray(psi_next, dtype=float)
    if psi_n.shape != psi_next.shape or psi_n.ndim != 1:
        raise GainError("feature vectors must be 1-d with equal length")
    if continue_indicator not in (0, 1):
        raise GainError("continue indicator must be 0 or 1")
    return np.outer(psi_n, beta * continue_indicator * psi_next - psi_n)


def guarded_pinv(M, rel_threshold: float = DEFAULT_REL_THRESHOLD) -> np.ndarray:
    """SVD pseudo-inverse keeping singular values ``>= rel_threshold * s_max``.

    Total: the zero matrix maps to the zero matrix.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise GainError("guarded_pinv expects a square matrix")
    u, s, vt = np.linalg.svd(M)
    if s[0] == 0.0:
        return np.zeros_like(M)
    keep = s >= rel_threshold * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


@numba.njit(cache=True, nogil=True)
def _gauss_jordan(M, out):
    """Invert ``M`` into ``out`` with partial pivoting; False on a zero pivot."""
    d = M.shape[0]
    W = np.empty((d, 2 * d))
    for i in range(d):
        for j in range(d):
            W[i, j] = M[i, j]
            W[i, d + j] = 1.0 if i == j else 0.0
    for col in range(d):
        piv = col
        best = abs(W[col, col])
        for r in range(col + 1, d):
            v = abs(W[r, col])
            if v > best:
                best = v
                piv = r
        if best == 0.0:
            return False
        if piv != col:
            for j in range(2 * d):
                tmp = W[col, j]
                W[col, j] = W[piv, j]
                W[piv, j] = tmp
        inv_p = 1.0 / W[col, col]
        for j in range(2 * d):
            W[col, j] *= inv_p
        for r in range(d):
            if r != col:
                f = W[r, col]
                if f != 0.0:
                    for j in range(2 * d):
                        W[r, j] -= f * W[col, j]
    for i in range(d):
        for j in range(d):
            out[i, j] = W[i, d + j]
    return True


@numba.njit(cache=True, nogil=True)
def _frobenius(M):
    s = 0.0
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            s += M[i, j] * M[i, j]
    return np.sqrt(s)


@numba.njit(cache=True, nogil=True)
def guarded_inverse_into(M, rel, out):
    """Fast guarded pseudo-inverse for the learner's inner loop.

    Uses Gauss-Jordan when ``|M|_F |M^-1|_F < 1 / rel``; since the Frobenius
    product bounds ``cond_2(M)`` from above, no singular value would be
    truncated and the pseudo-inverse is the inverse. Otherwise falls back to
    the SVD.
    Returns 0 (direct inverse), 1 (SVD, nothing truncated) or 2 (SVD with
    truncation).
    """
    d = M.shape[0]
    nf = _frobenius(M)
    if nf == 0.0 or not np.isfinite(nf):
        out[:, :] = 0.0
        return 2
    if _gauss_jordan(M, out):
        ni = _frobenius(out)
        if np.isfinite(ni) and nf * ni * rel < 1.0:
            return 0
    u, s, vt = np.linalg.svd(M)
    cut = rel * s[0]
    out[:, :] = 0.0
    truncated = 1
    for k in range(d):
        if s[k] >= cut and s[k] > 0.0:
            inv_s = 1.0 / s[k]
            for i in range(d):
                for j in range(d):
                    out[i, j] += vt[k, i] * inv_s * u[j, k]
        else:
            truncated = 2
    return truncated


class GainState:
    """Matrix-gain machinery owned by one learner run.

    ``matrix`` is ``A_hat`` for Zap, ``Sigma_hat`` for Kalman and unused for
    the identity strategy. ``inverse`` caches the guarded pseudo-inverse of
    ``matrix`` and is refreshed on every update.
    """

    def __init__(self, strategy: str, d: int, matrix0=None, rel_threshold: float = DEFAULT_REL_THRESHOLD):
        if strategy not in STRATEGIES:
            raise GainError(f"unknown gain strategy {strategy!r}")
        self.strategy = strategy
        self.d = d
        self.rel_threshold = rel_threshold
        if matrix0 is None:
            matrix0 = -np.eye(d) if strategy == ZAP else (np.eye(d) if strategy == KALMAN else np.zeros((d, d)))
        self.matrix = np.array(matrix0, dtype=float)
        if self.matrix.shape != (d, d):
            raise GainError("initial gain matrix must be d x d")
        if strategy == ZAP and np.max(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))) >= 0:
            raise GainError("Zap needs a negative definite initial A_hat")
        self.n = 0
        self.truncations = 0
        self._refresh()

    def _refresh(self):
        self.inverse = guarded_pinv(self.matrix, self.rel_threshold)
        if self.strategy != IDENTITY:
            s = np.linalg.svd(self.matrix, compute_uv=False)
            if s[0] == 0.0 or s[-1] < self.rel_threshold * s[0]:
                self.truncations += 1

    def gain(self) -> np.ndarray:
        """Current matrix gain ``G``: ``I``, ``Sigma_hat^+`` or ``-A_hat^+``."""
        if self.strategy == IDENTITY:
            return np.eye(self.d)
        if self.strategy == KALMAN:
            return self.inverse
        return -self.inverse


def update_zap_gain(state: GainState, A_sample, gamma: float) -> GainState:
    """``A_hat <- A_hat + gamma (A_sample - A_hat)``; in place, returns the state."""
    if not 0.0 < gamma <= 1.0:
        raise GainError("gamma must lie in (0, 1]")
    # convex form: gamma = 1 yields A_sample exactly
    state.matrix = (1.0 - gamma) * state.matrix + gamma * np.asarray(A_sample, dtype=float)
    state.n += 1
    state._refresh()
    return state


def update_kalman_gain(state: GainState, psi_n, alpha: float) -> GainState:
    """``Sigma_hat <- Sigma_hat + alpha (psi psi^T - Sigma_hat)``; in place."""
    if not 0.0 < alpha <= 1.0:
        raise GainError("alpha must lie in (0, 1]")
    psi_n = np.asarray(psi_n, dtype=float)
    state.matrix = (1.0 - alpha) * state.matrix + alpha * np.outer(psi_n, psi_n)
    state.n += 1
    state._refresh()
    return state
