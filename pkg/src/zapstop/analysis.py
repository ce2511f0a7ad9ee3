"""Asymptotic covariance and ODE-tracking diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .chain import NOISE_STREAM, FiniteChainModel, make_rng
from .features import FeatureMap


class InfiniteCovarianceError(ArithmeticError):
    """Some eigenvalue of ``G A + I/2`` has nonnegative real part."""


class AnalysisError(ValueError):
    pass


def lyapunov_covariance(G, A, Sigma_eps) -> np.ndarray:
    """Solve ``(GA + I/2) S + S (GA + I/2)^T + G Sigma_eps G^T = 0``.

    The equation is vectorised into a dense ``d^2 x d^2`` system.

    Raises
    ------
    InfiniteCovarianceError
        If ``GA + I/2`` is not Hurwitz; the asymptotic covariance is then not finite.
    """
    G, A, Sigma_eps = (np.asarray(m, dtype=float) for m in (G, A, Sigma_eps))
    d = A.shape[0]
    F = G @ A + 0.5 * np.eye(d)
    lam = np.linalg.eigvals(F)
    if np.max(lam.real) >= 0:
        raise InfiniteCovarianceError(
            f"infinite asymptotic covariance: max Re eig(GA) = {np.max(lam.real) - 0.5:.4g} >= -1/2"
        )
    I = np.eye(d)
    K = np.kron(I, F) + np.kron(F, I)
    rhs = -(G @ Sigma_eps @ G.T).reshape(-1, order="F")
    S = np.linalg.solve(K, rhs).reshape(d, d, order="F")
    return 0.5 * (S + S.T)


def lyapunov_residual(G, A, Sigma_eps, S) -> float:
    d = np.asarray(A).shape[0]
    F = np.asarray(G) @ np.asarray(A) + 0.5 * np.eye(d)
    R = F @ S + S @ F.T + np.asarray(G) @ np.asarray(Sigma_eps) @ np.asarray(G).T
    return float(np.linalg.norm(R))


def optimal_covariance(A, Sigma_eps) -> np.ndarray:
    """``A^{-1} Sigma_eps A^{-T}``: the covariance attained by the gain ``-A^{-1}``."""
    A = np.asarray(A, dtype=float)
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise AnalysisError("A is singular") from exc
    S = Ainv @ np.asarray(Sigma_eps, dtype=float) @ Ainv.T
    return 0.5 * (S + S.T)


class BatchMeans:
    """Streaming batch-means estimator of a long-run covariance.

    Feed samples with :meth:`update`; :meth:`covariance` returns the sample
    covariance of ``S_k / sqrt(batch_len)`` over completed batches, with the
    batch sums centred at their mean.
    """

    def __init__(self, d: int, batch_len: int):
        if batch_len < 1:
            raise AnalysisError("batch length must be >= 1")
        self.d = d
        self.batch_len = batch_len
        self._partial = np.zeros(d)
        self._fill = 0
        self._sums: list[np.ndarray] = []

    def update(self, samples) -> None:
        x = np.asarray(samples, dtype=float).reshape(-1, self.d)
        i = 0
        while i < len(x):
            take = min(self.batch_len - self._fill, len(x) - i)
            self._partial += x[i:i + take].sum(axis=0)
            self._fill += take
            i += take
            if self._fill == self.batch_len:
                self._sums.append(self._partial)
                self._partial = np.zeros(self.d)
                self._fill = 0

    @property
    def n_batches(self) -> int:
        return len(self._sums)

    def covariance(self) -> np.ndarray:
        if self.n_batches < 2:
            raise AnalysisError("batch means needs at least two complete batches")
        S = np.array(self._sums) / math.sqrt(self.batch_len)
        return np.atleast_2d(np.cov(S, rowvar=False))


def batch_means_sigma(noise_samples, n_batches: int | None = None) -> np.ndarray:
    """Long-run covariance of a (possibly correlated) sequence by batch means.

    Default batch count is ``ceil(sqrt(T))``; a trailing partial batch is dropped.
    """
    x = np.asarray(noise_samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    T = x.shape[0]
    if n_batches is None:
        n_batches = math.ceil(math.sqrt(T))
    if n_batches < 2 or T < n_batches:
        raise AnalysisError(f"need T >= n_batches >= 2 (T={T}, n_batches={n_batches})")
    est = BatchMeans(x.shape[1], T // n_batches)
    est.update(x[: (T // n_batches) * n_batches])
    return est.covariance()


def _transition_terms(chain, features, theta, states):
    """Per-transition ``A_{n+1}`` and ``b_{n+1}`` pieces evaluated at a fixed ``theta``."""
    psi = features.evaluate_batch(states)
    q = psi @ theta
    c_run = np.asarray(chain.running_cost(states), dtype=float)
    c_stop = np.asarray(chain.stopping_cost(states), dtype=float)
    cont = (q[1:] < c_stop[1:]).astype(float)
    beta = chain.beta
    # A_{n+1} theta = psi_n (beta cont q_{n+1} - q_n); b_{n+1} = psi_n (c_n + beta (1 - cont) c_s(X_{n+1}))
    a_theta = psi[:-1] * (beta * cont * q[1:] - q[:-1])[:, None]
    b = psi[:-1] * (c_run[:-1] + beta * (1.0 - cont) * c_stop[1:])[:, None]
    return psi, cont, a_theta, b


def iter_noise(chain, features, theta_star, T: int, seed: int, centre=None, chunk: int = 1 << 16):
    """Yield chunks of ``eps_n = A_{n+1} theta* + b_{n+1} - centre`` along a fresh path.

    ``centre`` defaults to the exact mean ``A(theta*) theta* + b* + beta cbar(theta*)``
    on finite chains. For other chains it must be supplied (e.g. from
    :func:`monte_carlo_moments`).
    """
    theta_star = np.asarray(theta_star, dtype=float)
    if centre is None:
        if not isinstance(chain, FiniteChainModel):
            raise AnalysisError("noise centring must be supplied for non-finite chains")
        centre = (
            oracle.exact_A(chain, features, theta_star) @ theta_star
            + oracle.exact_b_star(chain, features)
            + chain.beta * oracle.exact_cbar(chain, features, theta_star)
        )
    rng = make_rng(seed, NOISE_STREAM)
    cursor = chain.start(rng)
    prev = np.asarray(cursor.state)[None, ...]
    left = T
    while left:
        k = min(chunk, left)
        states = np.concatenate([prev, cursor.advance(k, rng)])
        _, _, a_theta, b = _transition_terms(chain, features, theta_star, states)
        yield a_theta + b - centre
        prev = states[-1:]
        left -= k


def noise_trajectory(chain, features, theta_star, T: int, seed: int, centre=None) -> np.ndarray:
    """The noise sequence ``eps_1..eps_T`` as a ``(T, d)`` array."""
    return np.concatenate(list(iter_noise(chain, features, theta_star, T, seed, centre)))


def streamed_noise_covariance(chain, features, theta_star, T, seed, n_batches=None, centre=None):
    """Batch-means ``Sigma_eps`` without materialising the whole noise sequence."""
    if n_batches is None:
        n_batches = math.ceil(math.sqrt(T))
    est = BatchMeans(features.d, T // n_batches)
    for block in iter_noise(chain, features, theta_star, (T // n_batches) * n_batches, seed, centre):
        est.update(block)
    return est.covariance()


@dataclass
class Moments:
    """Monte-Carlo means at a fixed ``theta``; ``centre`` is the mean of ``psi_n d_{n+1}``."""

    theta: np.ndarray
    A: np.ndarray
    b_bar: np.ndarray
    Sigma_psi: np.ndarray
    T: int

    @property
    def centre(self) -> np.ndarray:
        return self.A @ self.theta + self.b_bar


def monte_carlo_moments(chain, features, theta, T: int, seed: int, chunk: int = 1 << 14) -> Moments:
    """Sample means of ``A_{n+1}``, ``b_{n+1}`` and ``psi psi^T`` at a fixed ``theta``."""
    theta = np.asarray(theta, dtype=float)
    d = features.d
    rng = make_rng(seed, NOISE_STREAM)
    cursor = chain.start(rng)
    prev = np.asarray(cursor.state)[None, ...]
    A = np.zeros((d, d))
    b = np.zeros(d)
    S = np.zeros((d, d))
    left = T
    while left:
        k = min(chunk, left)
        states = np.concatenate([prev, cursor.advance(k, rng)])
        psi, cont, _, b_terms = _transition_terms(chain, features, theta, states)
        nxt = chain.beta * cont[:, None] * psi[1:] - psi[:-1]
        A += psi[:-1].T @ nxt
        b += b_terms.sum(axis=0)
        S += psi[:-1].T @ psi[:-1]
        prev = states[-1:]
        left -= k
    return Moments(theta, A / T, b / T, S / T, T)


def empirical_scaled_covariance(theta_finals, theta_star, N: int) -> np.ndarray:
    """``(1/M) sum_m N (theta_m - theta*)(theta_m - theta*)^T``."""
    X = np.atleast_2d(np.asarray(theta_finals, dtype=float))
    if X.shape[0] < 2:
        raise AnalysisError("at least two replicas are required")
    E = X - np.asarray(theta_star, dtype=float)
    return N * (E.T @ E) / X.shape[0]


def scaled_error_histogram(theta_finals, theta_star, N: int, coord: int, bins=30):
    """Histogram of ``sqrt(N) (theta_N(coord) - theta*(coord))`` over replicas."""
    X = np.asarray(theta_finals, dtype=float)
    z = math.sqrt(N) * (X[:, coord] - theta_star[coord])
    counts, edges = np.histogram(z, bins=bins)
    return edges, counts


def effective_gain(strategy: str, alpha_scale: float | None, A, Sigma_psi=None):
    """Limit of ``n alpha_n G_n``, the constant gain seen by the linearised recursion.

    Returns None when ``n alpha_n`` diverges (polynomial schedules).
    """
    if alpha_scale is None:
        return None
    d = np.asarray(A).shape[0]
    if strategy == "identity":
        return alpha_scale * np.eye(d)
    if strategy == "kalman":
        return alpha_scale * np.linalg.inv(Sigma_psi)
    if strategy == "zap":
        return -alpha_scale * np.linalg.inv(A)
    raise AnalysisError(f"unknown strategy {strategy!r}")


@dataclass
class CovarianceReport:
    Sigma_theory: np.ndarray | None
    Sigma_optimal: np.ndarray
    Sigma_empirical: np.ndarray | None
    gain_eigenvalues: np.ndarray | None
    finite: bool
    cond_A: float
    notes: list = field(default_factory=list)

    @property
    def ratios(self):
        ref = self.Sigma_theory if self.Sigma_theory is not None else None
        if ref is None or self.Sigma_empirical is None:
            return None
        return np.diag(self.Sigma_empirical) / np.diag(ref)

    @property
    def trace_ratio_to_optimal(self):
        if self.Sigma_empirical is None:
            return None
        return float(np.trace(self.Sigma_empirical) / np.trace(self.Sigma_optimal))

    def to_dict(self) -> dict:
        def arr(x):
            if x is None:
                return None
            x = np.asarray(x)
            if np.iscomplexobj(x):
                return {"real": x.real.tolist(), "imag": x.imag.tolist()}
            return x.tolist()

        return {
            "Sigma_theory": arr(self.Sigma_theory),
            "Sigma_optimal": arr(self.Sigma_optimal),
            "Sigma_empirical": arr(self.Sigma_empirical),
            "diag_ratio_empirical_to_theory": arr(self.ratios),
            "trace_ratio_empirical_to_optimal": self.trace_ratio_to_optimal,
            "gain_eigenvalues": arr(self.gain_eigenvalues),
            "eigenvalue_condition_holds": self.finite,
            "infinite_asymptotic_covariance": not self.finite,
            "cond_A": self.cond_A,
            "cond_A_flag": self.cond_A > 1e3,
            "notes": self.notes,
        }


def covariance_report(G, A, Sigma_eps, theta_finals=None, theta_star=None, N=None) -> CovarianceReport:
    """Theory (Lyapunov and optimal) versus empirical scaled covariance."""
    A = np.asarray(A, dtype=float)
    notes = []
    Sigma_opt = optimal_covariance(A, Sigma_eps)
    theory, eig, finite = None, None, False
    if G is None:
        notes.append("step size is not O(1/n): no Lyapunov prediction")
    else:
        eig = np.linalg.eigvals(np.asarray(G) @ A)
        try:
            theory = lyapunov_covariance(G, A, Sigma_eps)
            finite = True
        except InfiniteCovarianceError as exc:
            notes.append(str(exc))
    emp = None
    if theta_finals is not None:
        emp = empirical_scaled_covariance(theta_finals, theta_star, N)
    return CovarianceReport(theory, Sigma_opt, emp, eig, finite, float(np.linalg.cond(A)), notes)


# ODE tracking

def zap_vector_field(model: FiniteChainModel, features: FeatureMap):
    """``(xi, region, b_map, b_star)`` for ``dw/dt = -A(w)^{-1} (b* - b(w))`` on a finite chain."""
    b_star = oracle.exact_b_star(model, features)

    def b_map(w):
        return oracle.exact_b(model, features, w)

    def xi(w):
        return -np.linalg.solve(oracle.exact_A(model, features, w), b_star - b_map(w))

    def region(w):
        return oracle.continuation_set(model, features, w).tobytes()

    return xi, region, b_map, b_star


def _rk4(xi, w, h):
    k1 = xi(w)
    k2 = xi(w + 0.5 * h * k1)
    k3 = xi(w + 0.5 * h * k2)
    k4 = xi(w + h * k3)
    stages = (w + 0.5 * h * k1, w + 0.5 * h * k2, w + h * k3)
    return w + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), stages


@dataclass
class OdeTrajectory:
    t: np.ndarray
    w: np.ndarray
    b: np.ndarray | None = None


def ode_integrate(xi, w0, T_horizon: float, dt: float = 1e-3, region=None, dt_min: float = 1e-6,
                  b_map=None, t0: float = 0.0) -> OdeTrajectory:
    """Fixed-step RK4 for ``dw/dt = xi(w)`` on ``[t0, t0 + T_horizon]``.

    With ``region`` given (a map whose value changes when an indicator
    flips), a step whose stages straddle a flip is retried with half the step,
    down to ``dt_min``. ``b_map`` adds ``b(w(t))`` to the output.
    """
    w = np.array(w0, dtype=float)
    ts, ws = [t0], [w.copy()]
    t, t_end = t0, t0 + T_horizon
    while t < t_end - 1e-12:
        h = min(dt, t_end - t)
        while True:
            nxt, stages = _rk4(xi, w, h)
            if region is None or h <= dt_min:
                break
            r0 = region(w)
            if all(region(p) == r0 for p in (*stages, nxt)):
                break
            h = max(0.5 * h, dt_min)
        if not np.all(np.isfinite(nxt)):
            raise AnalysisError(f"ODE state became non-finite at t={t:.4g}")
        w, t = nxt, t + h
        ts.append(t)
        ws.append(w.copy())
    W = np.array(ws)
    B = None if b_map is None else np.array([b_map(x) for x in W])
    return OdeTrajectory(np.array(ts), W, B)


def exponential_rate(t, residual) -> float:
    """Least-squares slope of ``log residual`` against ``t``."""
    t = np.asarray(t)
    y = np.log(np.asarray(residual))
    return float(np.polyfit(t, y, 1)[0])


def sa_clock(alpha, N: int) -> np.ndarray:
    """``t_n = sum_{i<=n} alpha_i`` for ``n = 0..N``."""
    n = np.arange(1, N + 1, dtype=float)
    if alpha.kind == "harmonic":
        steps = 1.0 / n
    elif alpha.kind == "scaled":
        steps = alpha.g / (alpha.b + n)
    elif alpha.kind == "polynomial":
        steps = n ** (-alpha.rho)
    else:
        steps = alpha.g / n
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class DeviationProfile:
    starts: np.ndarray
    deviation: np.ndarray
    horizon: float

    def to_rows(self):
        return [[float(s), float(v)] for s, v in zip(self.starts, self.deviation)]


def interpolate_path(times, values, t):
    """Piecewise-linear interpolation of a vector path at times ``t``."""
    return np.column_stack([np.interp(t, times, values[:, j]) for j in range(values.shape[1])])


def sa_vs_ode_deviation(run_record, alpha, xi, T_horizon: float, n_starts: int = 12, starts=None,
                        dt: float = 1e-2, region=None) -> DeviationProfile:
    """Sup-distance between the interpolated iterates and ODE solutions restarted on them.

    The iterates are placed on the clock ``t_n = sum alpha_i``; for each start
    time ``s`` the ODE is solved from ``w_bar(s)`` and compared with ``w_bar``
    on ``[s, s + T]``.
    """
    ns = np.asarray(run_record.snapshot_n)
    if len(ns) < 3:
        raise AnalysisError("insufficient snapshots for interpolation")
    clock = sa_clock(alpha, int(ns[-1]))
    times = clock[ns]
    thetas = np.asarray(run_record.snapshot_theta)
    t_last = times[-1]
    if starts is None:
        if T_horizon >= t_last:
            raise AnalysisError("horizon longer than the run's clock")
        starts = np.linspace(times[0], t_last - T_horizon, n_starts)
    starts = np.asarray(starts, dtype=float)
    dev = np.zeros(len(starts))
    if T_horizon == 0:
        return DeviationProfile(starts, dev, 0.0)
    for i, s in enumerate(starts):
        w_s = interpolate_path(times, thetas, [s])[0]
        traj = ode_integrate(xi, w_s, T_horizon, dt=dt, region=region, t0=s)
        wbar = interpolate_path(times, thetas, traj.t)
        dev[i] = float(np.max(np.linalg.norm(wbar - traj.w, axis=1)))
    return DeviationProfile(starts, dev, T_horizon)
