"""Linear function approximation: feature maps, ``Q^theta`` and stopping policies.

Throughout, the problem is in *cost* form: the policy stops at ``x`` iff
``c_s(x) <= Q^theta(x)`` (ties stop). The finance reward problem maps onto
this form through ``c_s = -r``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np


class FeatureError(ValueError):
    pass


class FeatureMap:
    """A basis ``psi: X -> R^d``.

    Parameters
    ----------
    d : int
        Number of basis functions.
    batch : callable
        Maps an array of states (leading axis = sample) to a ``(k, d)`` array.
    label : str
        Human-readable description, echoed into run metadata.
    matrix : ndarray, optional
        For finite chains, the ``(n_states, d)`` table with ``psi(x) = matrix[x]``.
    """

    def __init__(self, d: int, batch: Callable, label: str, matrix: np.ndarray | None = None):
        if d < 1:
            raise FeatureError("d must be positive")
        self.d = int(d)
        self._batch = batch
        self.label = label
        self.matrix = matrix

    @classmethod
    def from_matrix(cls, Psi, label: str = "matrix") -> "FeatureMap":
        Psi = np.array(Psi, dtype=float)
        if Psi.ndim != 2:
            raise FeatureError("basis table must be 2-d (n_states, d)")
        Psi.setflags(write=False)
        return cls(Psi.shape[1], lambda idx: Psi[np.asarray(idx, dtype=np.int64)], label, Psi)

    def evaluate(self, x) -> np.ndarray:
        return self.evaluate_batch(np.asarray(x)[None, ...])[0]

    def evaluate_batch(self, states) -> np.ndarray:
        out = np.asarray(self._batch(states), dtype=float)
        if out.ndim != 2 or out.shape[1] != self.d:
            raise FeatureError(f"basis {self.label!r} returned shape {out.shape}, expected (k, {self.d})")
        return out

    def __repr__(self):
        return f"FeatureMap(d={self.d}, label={self.label!r})"


def tabular(n_states: int) -> FeatureMap:
    """One-hot features on ``n_states`` states; ``Q^theta = theta``."""
    return FeatureMap.from_matrix(np.eye(n_states), label="tabular")


def random_basis(n_states: int, d: int, seed: int) -> FeatureMap:
    """Constant column plus ``d - 1`` standard-normal columns (a non-tabular finite basis)."""
    rng = np.random.default_rng(seed)
    Psi = np.column_stack([np.ones(n_states), rng.standard_normal((n_states, d - 1))])
    return FeatureMap.from_matrix(Psi, label=f"random{d}(seed={seed})")


def _check_theta(theta, d: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (d,):
        raise FeatureError(f"theta has shape {theta.shape}, basis has d={d}")
    return theta


def q_value(theta, x, features: FeatureMap) -> float:
    """``Q^theta(x) = theta . psi(x)``."""
    theta = _check_theta(theta, features.d)
    return float(features.evaluate(x) @ theta)


def policy(theta, x, c_s_x: float, features: FeatureMap) -> int:
    """1 (stop) iff ``c_s(x) <= Q^theta(x)``, else 0 (continue)."""
    return int(c_s_x <= q_value(theta, x, features))


def s_theta_indicator(theta, x, c_s_x: float, features: FeatureMap) -> int:
    """``I{Q^theta(x) < c_s(x)}``: the continuation indicator, ``1 - policy``."""
    return 1 - policy(theta, x, c_s_x, features)


# Finance primitives over (k, L) ratio arrays, L = 100 by default.

def _quartile(i: int):
    def f(X):
        L = X.shape[-1]
        q = L // 4
        return X[..., i * q:(i + 1) * q].mean(axis=-1)

    return f


def _slope(X):
    L = X.shape[-1]
    w = (np.arange(1, L + 1) - (L + 1) / 2.0) / L
    return X @ w


def _ewma(X, lam: float = 0.97):
    L = X.shape[-1]
    w = lam ** (L - np.arange(1, L + 1)) * (1.0 - lam)
    return X @ w


FINANCE_PRIMITIVES: dict[str, Callable] = {
    "one": lambda X: np.ones(X.shape[:-1]),
    "last": lambda X: X[..., -1],
    "min": lambda X: X.min(axis=-1),
    "max": lambda X: X.max(axis=-1),
    "q1": _quartile(0),
    "q2": _quartile(1),
    "q3": _quartile(2),
    "q4": _quartile(3),
    "slope": _slope,
    "ewma": _ewma,
    "last2": lambda X: X[..., -1] ** 2,
    "mean": lambda X: X.mean(axis=-1),
}

FINANCE10 = ("one", "last", "min", "max", "q1", "q2", "q3", "q4", "slope", "ewma")


def _primitive_basis(names, coefficients=None, label="custom") -> FeatureMap:
    funcs = [FINANCE_PRIMITIVES[n] for n in names]
    C = None if coefficients is None else np.asarray(coefficients, dtype=float)
    d = len(names) if C is None else C.shape[0]

    def batch(states):
        X = np.asarray(states, dtype=float)
        prim = np.stack([f(X) for f in funcs], axis=-1)
        return prim if C is None else prim @ C.T

    return FeatureMap(d, batch, label)


def finance_default_basis() -> FeatureMap:
    """Ten summary statistics of the ratio window.

    ``[1, x[-1], min x, max x, four quartile-window means, centred slope
    sum((i - 50.5) x_i) / 100, exponential mean with weight 0.97]``. Contains
    the constant and ``r(x) = x[-1]``, so ``c_s - 1 = -r - 1`` is in the span.
    """
    return _primitive_basis(FINANCE10, label="finance10")


def custom_basis(path, n_states: int | None = None) -> FeatureMap:
    """Basis from a JSON coefficient table over built-in primitives.

    The file holds ``{"coefficients": [[...], ...]}`` (shape ``d x p``) and,
    for the GBM chain, ``"primitives": [names]``. Without primitives the
    coefficients act on the one-hot indicators of a finite chain, i.e. the
    table is ``Psi^T``.
    """
    doc = json.loads(Path(path).read_text())
    C = np.asarray(doc["coefficients"], dtype=float)
    if C.ndim != 2:
        raise FeatureError("coefficients must be a d x p table")
    names = doc.get("primitives")
    label = f"custom:{Path(path).name}"
    if names is None:
        if n_states is not None and C.shape[1] != n_states:
            raise FeatureError(f"coefficient table has {C.shape[1]} columns, chain has {n_states} states")
        return FeatureMap.from_matrix(C.T, label=label)
    unknown = [n for n in names if n not in FINANCE_PRIMITIVES]
    if unknown:
        raise FeatureError(f"unknown primitives {unknown}")
    if C.shape[1] != len(names):
        raise FeatureError("coefficient table width must match the primitive list")
    return _primitive_basis(names, C, label=label)


def resolve_basis(spec: str, chain) -> FeatureMap:
    """Basis by config name: ``tabular``, ``finance10``, ``random<d>:<seed>`` or ``custom:<file>``."""
    n_states = getattr(chain, "n_states", None)
    if spec == "tabular":
        if n_states is None:
            raise FeatureError("tabular basis needs a finite chain")
        return tabular(n_states)
    if spec == "finance10":
        return finance_default_basis()
    if spec.startswith("random"):
        if n_states is None:
            raise FeatureError("random basis needs a finite chain")
        d, _, seed = spec[len("random"):].partition(":")
        return random_basis(n_states, int(d), int(seed or 0))
    if spec.startswith("custom:"):
        return custom_basis(spec[len("custom:"):], n_states)
    raise FeatureError(f"unknown basis {spec!r}")
