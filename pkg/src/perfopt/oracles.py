"""Ground-truth machinery that does not share code paths with the estimators.

Used by the test-suite, by ``perfopt validate``, and to locate the optimum of
environments without a closed form.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from perfopt.environments import EnvironmentSpec, long_term_loss, mean_map
from perfopt.errors import DomainError, InvalidInputError
from perfopt.linalg import project_box

logger = logging.getLogger(__name__)


@dataclass
class OracleReport:
    """One ground-truth measurement; ``passed`` is set when checked against ``tolerance``."""

    quantity: str
    value: object
    method: str
    samples_or_step: float
    error_bound: float
    tolerance: float | None = None
    passed: bool | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        if isinstance(self.value, np.ndarray):
            out["value"] = self.value.tolist()
        return out


def fd_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise InvalidInputError("step must be positive")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        grad[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad


def settle_mu(spec: EnvironmentSpec, theta, mu0, k: int) -> np.ndarray:
    """Apply ``mean_map(theta, .)`` ``k`` times starting from ``mu0``."""
    if k < 0:
        raise InvalidInputError("k must be nonnegative")
    mu = np.array(mu0, dtype=float)
    for _ in range(k):
        mu = mean_map(spec, theta, mu)
    return mu


def _projected_descent(f, grad, x0, lo, hi, tol, max_iter):
    x = project_box(x0, lo, hi)
    fx = f(x)
    step = 1.0
    pg_norm = np.inf
    for it in range(max_iter):
        g = grad(x)
        pg = x - project_box(x - g, lo, hi)
        pg_norm = float(np.linalg.norm(pg))
        if pg_norm <= tol:
            return x, fx, pg_norm, True
        step = min(step * 2.0, 1e3)
        while True:
            x_new = project_box(x - step * g, lo, hi)
            try:
                f_new = f(x_new)
            except DomainError:
                f_new = np.inf
            if f_new <= fx - 1e-4 / step * float((x - x_new) @ (x - x_new)) or step < 1e-14:
                break
            step *= 0.5
        if step < 1e-14:
            break
        x, fx = x_new, f_new
    return x, fx, pg_norm, False


def opt_search(spec: EnvironmentSpec, tol: float = 1e-6, starts: int = 8, max_iter: int = 10_000,
               seed: int = 0) -> tuple[np.ndarray, float, bool]:
    """Multi-start projected gradient descent on the long-term loss.

    Gradients come from :func:`fd_gradient` (``h = 1e-5``). Returns the best
    point, its loss, and whether that start met the projected-gradient
    tolerance. Non-convergence is logged, not raised.
    """
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    lo, hi = spec.bounds()
    rng = np.random.default_rng(seed)
    f = lambda th: long_term_loss(spec, th)  # noqa: E731
    g = lambda th: fd_gradient(f, th, 1e-5)  # noqa: E731
    best = None
    for i in range(starts):
        x0 = (lo + hi) / 2 if i == 0 else rng.uniform(lo, hi)
        x, fx, pg, ok = _projected_descent(f, g, x0, lo, hi, tol, max_iter)
        if best is None or fx < best[1]:
            best = (x, fx, ok)
    if not best[2]:
        logger.warning("opt_search did not reach projected-gradient tolerance %.1e", tol)
    return best


def mc_expectation(point_fn: Callable[[np.ndarray], np.ndarray], mu, Sigma, n: int,
                   seed: int | np.random.Generator) -> OracleReport:
    """Seeded sample mean of ``point_fn(z)`` for ``z ~ N(mu, Sigma)`` with its standard error.

    ``point_fn`` takes an ``(n, d)`` batch and returns ``(n,)`` or ``(n, k)``.
    """
    if n < 1:
        raise InvalidInputError("need at least one sample")
    mu = np.asarray(mu, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chol = np.linalg.cholesky(np.asarray(Sigma, dtype=float))
    z = mu + rng.standard_normal((n, mu.size)) @ chol.T
    vals = np.asarray(point_fn(z), dtype=float)
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    value = float(mean) if np.ndim(mean) == 0 else mean
    bound = float(np.max(se))
    return OracleReport("expectation", value, "monte-carlo", float(n), bound)
