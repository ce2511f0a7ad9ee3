"""Exact ground truth on finite chains.

Every expectation here is an exact ``pi``/``P``-weighted sum, so these
quantities serve as oracles for the stochastic-approximation code paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import FiniteChainModel
from .features import FeatureMap


class OracleError(ValueError):
    pass


def _psi(features: FeatureMap, model: FiniteChainModel) -> np.ndarray:
    if features.matrix is None:
        return features.evaluate_batch(np.arange(model.n_states))
    if features.matrix.shape[0] != model.n_states:
        raise OracleError("basis table does not match the number of states")
    return features.matrix


def pi_inner(model: FiniteChainModel, f, g) -> float:
    return float(np.sum(model.pi * np.asarray(f) * np.asarray(g)))


def pi_norm(model: FiniteChainModel, f) -> float:
    return float(np.sqrt(pi_inner(model, f, f)))


def bellman_F(model: FiniteChainModel, Q) -> np.ndarray:
    """``(FQ)(x) = c(x) + beta sum_y P(x, y) min(c_s(y), Q(y))``."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (model.n_states,):
        raise OracleError(f"Q has shape {Q.shape}, chain has {model.n_states} states")
    return model.c + model.beta * (model.P @ np.minimum(model.c_s, Q))


def h_theta(model, features, theta, Q) -> np.ndarray:
    """``Q`` where ``Q^theta < c_s``, ``c_s`` elsewhere."""
    q_theta = _psi(features, model) @ np.asarray(theta, dtype=float)
    return np.where(q_theta < model.c_s, Q, model.c_s)


def f_theta(model, features, theta, Q) -> np.ndarray:
    """``F^theta Q = c + beta P H^theta Q``: the DP operator with the stop set frozen at ``theta``."""
    return model.c + model.beta * (model.P @ h_theta(model, features, theta, Q))


def value_iteration(model: FiniteChainModel, tol: float = 1e-12, max_iter: int = 10**7):
    """Iterate ``Q <- FQ`` from zero until the sup-norm step is ``<= tol``.

    Returns ``(Q, residuals)`` where ``residuals[k] = |Q_{k+1} - Q_k|_inf``.
    """
    if tol <= 0:
        raise OracleError("tol must be positive")
    Q = np.zeros(model.n_states)
    residuals = []
    for _ in range(max_iter):
        Q_next = bellman_F(model, Q)
        r = float(np.max(np.abs(Q_next - Q)))
        residuals.append(r)
        Q = Q_next
        if r <= tol:
            break
    return Q, np.array(residuals)


def solve_q_star(model: FiniteChainModel, tol: float = 1e-12) -> np.ndarray:
    """Fixed point of ``F`` by value iteration (sup-norm contraction with modulus beta)."""
    return value_iteration(model, tol)[0]


def exact_sigma_psi(model, features) -> np.ndarray:
    """``Sigma_psi(i, j) = <psi_i, psi_j>_pi``."""
    Psi = _psi(features, model)
    S = Psi.T @ (model.pi[:, None] * Psi)
    return 0.5 * (S + S.T)


def continuation_set(model, features, theta) -> np.ndarray:
    """Boolean mask of states with ``Q^theta(y) < c_s(y)``."""
    return _psi(features, model) @ np.asarray(theta, dtype=float) < model.c_s


def exact_A(model, features, theta) -> np.ndarray:
    """``E[psi(X_n) (beta 1{Q^theta(X_{n+1}) < c_s} psi(X_{n+1}) - psi(X_n))^T]`` in steady state."""
    Psi = _psi(features, model)
    S = continuation_set(model, features, theta).astype(float)
    weighted = model.pi[:, None] * Psi
    return model.beta * weighted.T @ (model.P @ (S[:, None] * Psi)) - weighted.T @ Psi


def exact_b_star(model, features) -> np.ndarray:
    """``b* = E[psi(X) c(X)]``."""
    return _psi(features, model).T @ (model.pi * model.c)


def exact_cbar(model, features, theta) -> np.ndarray:
    """``E[psi(X_n) 1{c_s(X_{n+1}) <= Q^theta(X_{n+1})} c_s(X_{n+1})]``."""
    Psi = _psi(features, model)
    stop = ~continuation_set(model, features, theta)
    return Psi.T @ (model.pi * (model.P @ np.where(stop, model.c_s, 0.0)))


def exact_b(model, features, theta) -> np.ndarray:
    """``b(theta) = -A(theta) theta - beta cbar_s(theta)``."""
    theta = np.asarray(theta, dtype=float)
    return -exact_A(model, features, theta) @ theta - model.beta * exact_cbar(model, features, theta)


def c_theta(model, features, theta) -> np.ndarray:
    """``c^theta(x) = Q^theta(x) - beta E[min(c_s(X_1), Q^theta(X_1)) | X_0 = x]``."""
    q = _psi(features, model) @ np.asarray(theta, dtype=float)
    return q - model.beta * (model.P @ np.minimum(model.c_s, q))


def projected_cost(model, features, theta) -> np.ndarray:
    """``E_pi[c^theta(X) psi(X)]``, computed independently of :func:`exact_b`."""
    return _psi(features, model).T @ (model.pi * c_theta(model, features, theta))


def galerkin_residual(model, features, theta) -> float:
    """``max_i |<F Q^theta - Q^theta, psi_i>_pi|``."""
    Psi = _psi(features, model)
    q = Psi @ np.asarray(theta, dtype=float)
    bellman_error = bellman_F(model, q) - q
    return float(np.max(np.abs(Psi.T @ (model.pi * bellman_error))))


def solve_theta_star(model, features, tol: float = 1e-10, max_iter: int = 10**6) -> np.ndarray:
    """Galerkin fixed point ``<F Q^theta - Q^theta, psi_i>_pi = 0`` for all ``i``.

    Projected value iteration ``theta <- Sigma_psi^{-1} <F Q^theta, psi>_pi``
    (a beta-contraction in the ``pi``-norm) runs until successive iterates
    differ by at most ``tol``. A Newton step on the frozen stop set then
    removes the remaining geometric error; it is kept only if the stop set is
    unchanged and the Galerkin residual does not increase.
    """
    Psi = _psi(features, model)
    Sigma = exact_sigma_psi(model, features)
    s = np.linalg.svd(Sigma, compute_uv=False)
    if s[-1] <= 1e-10 * max(s[0], 1.0):
        raise OracleError("basis is linearly dependent under pi (rank-deficient Sigma_psi)")
    weighted = model.pi[:, None] * Psi
    solve = np.linalg.cholesky(Sigma)

    def project(f):
        y = np.linalg.solve(solve, weighted.T @ f)
        return np.linalg.solve(solve.T, y)

    theta = np.zeros(Psi.shape[1])
    for _ in range(max_iter):
        nxt = project(bellman_F(model, Psi @ theta))
        step = float(np.linalg.norm(nxt - theta))
        theta = nxt
        if step <= tol:
            break
    else:
        raise OracleError("projected value iteration did not converge")

    b_star = exact_b_star(model, features)
    for _ in range(5):
        A = exact_A(model, features, theta)
        cand = np.linalg.solve(A, -(b_star + model.beta * exact_cbar(model, features, theta)))
        same_set = np.array_equal(
            continuation_set(model, features, cand), continuation_set(model, features, theta)
        )
        if not same_set or galerkin_residual(model, features, cand) > galerkin_residual(model, features, theta):
            break
        theta = cand
    return theta


def policy_value(model: FiniteChainModel, stop_mask) -> np.ndarray:
    """Exact expected discounted cost of the stationary policy that stops on ``stop_mask``.

    Solves ``h = c_s`` on the stop set and ``h = c + beta P h`` elsewhere.
    """
    stop = np.asarray(stop_mask, dtype=bool)
    n = model.n_states
    M = np.eye(n)
    rhs = np.where(stop, model.c_s, model.c)
    cont = ~stop
    M[cont] -= model.beta * model.P[cont]
    return np.linalg.solve(M, rhs)


def theta_policy_value(model, features, theta) -> np.ndarray:
    """Exact value of the policy stopping iff ``c_s(x) <= Q^theta(x)``."""
    return policy_value(model, ~continuation_set(model, features, theta))


def best_fit_error(model, features, Q) -> float:
    """``min_theta |Q^theta - Q|_pi`` by weighted least squares."""
    Psi = _psi(features, model)
    w = np.sqrt(model.pi)
    coef, *_ = np.linalg.lstsq(w[:, None] * Psi, w * Q, rcond=None)
    return pi_norm(model, Psi @ coef - Q)


@dataclass
class ExactQuantities:
    theta_star: np.ndarray
    Q_star: np.ndarray
    A_star: np.ndarray
    b_star: np.ndarray
    cbar_star: np.ndarray
    Sigma_psi: np.ndarray
    galerkin_residual: float

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def exact_quantities(model, features, tol: float = 1e-10) -> ExactQuantities:
    theta = solve_theta_star(model, features, tol)
    return ExactQuantities(
        theta_star=theta,
        Q_star=solve_q_star(model),
        A_star=exact_A(model, features, theta),
        b_star=exact_b_star(model, features),
        cbar_star=exact_cbar(model, features, theta),
        Sigma_psi=exact_sigma_psi(model, features),
        galerkin_residual=galerkin_residual(model, features, theta),
    )


# Property checks

def contraction_ratio(model, Q, Q2) -> float:
    """``|FQ - FQ'|_pi / |Q - Q'|_pi`` (0 when ``Q == Q'``)."""
    den = pi_norm(model, np.asarray(Q) - np.asarray(Q2))
    if den == 0.0:
        return 0.0
    return pi_norm(model, bellman_F(model, Q) - bellman_F(model, Q2)) / den


def neg_def_slack(model, features, theta, v) -> float:
    """``-v^T A(theta) v - (1 - beta) v^T Sigma_psi v``; nonnegative by theory."""
    v = np.asarray(v, dtype=float)
    A = exact_A(model, features, theta)
    S = exact_sigma_psi(model, features)
    return float(-v @ A @ v - (1.0 - model.beta) * v @ S @ v)


def random_theta(model, features, rng, size: int) -> np.ndarray:
    """Parameters spread over the scale of ``c_s`` so that stop sets vary."""
    scale = 1.0 + float(np.max(np.abs(model.c_s)))
    return rng.normal(0.0, scale, size=(size, features.d))


def property_report(model, features, n_samples: int = 100, seed: int = 0) -> dict:
    """Run the oracle property suite; returns ``{check: {passed, value, threshold}}``."""
    rng = np.random.default_rng(seed)
    checks = {}
    Sigma = exact_sigma_psi(model, features)
    ev = np.linalg.eigvalsh(Sigma)
    independent = bool(ev[0] > 1e-10 * max(ev[-1], 1.0))
    checks["linear_independence"] = {"passed": independent, "value": float(ev[0]), "threshold": 1e-10}

    scale = 1.0 + float(np.max(np.abs(model.c_s)))
    ratios = [contraction_ratio(model, *rng.normal(0.0, scale, (2, model.n_states))) for _ in range(n_samples)]
    worst = max(ratios)
    checks["contraction"] = {
        "passed": bool(worst <= model.beta + 1e-12), "value": worst, "threshold": model.beta,
    }

    thetas = random_theta(model, features, rng, n_samples)
    slack = min(neg_def_slack(model, features, th, rng.normal(size=features.d)) for th in thetas)
    checks["negative_definiteness"] = {"passed": bool(slack >= -1e-10), "value": slack, "threshold": -1e-10}

    proj = max(float(np.linalg.norm(exact_b(model, features, th) - projected_cost(model, features, th)))
               for th in thetas)
    checks["projection_identity"] = {"passed": bool(proj <= 1e-10), "value": proj, "threshold": 1e-10}

    if independent:
        res = galerkin_residual(model, features, solve_theta_star(model, features))
        checks["galerkin_residual"] = {"passed": bool(res <= 1e-8), "value": res, "threshold": 1e-8}
    else:
        checks["galerkin_residual"] = {"passed": False, "value": None, "threshold": 1e-8,
                                       "reason": "basis is linearly dependent"}
    return {"checks": checks, "all_passed": all(c["passed"] for c in checks.values())}
