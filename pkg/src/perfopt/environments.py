"""Stateful performative environments.

Each environment is a Gaussian population N(mu, Sigma) whose mean reacts to the
deployed model through a map ``mu_t = m(theta_t, mu_{t-1})``. Five variants are
provided:

``linear``       m = delta (A theta + b) + (1 - delta) mu
``nonlinear``    m[i] = delta^(mu[i]^2) (A theta + b)[i] + (1 - delta^(mu[i]^2)) mu[i]
``spam``         strategic spammers, m = delta (mu_orig - eps theta) + (1 - delta) mu
``bottleneck``   m = (1 - theta . mu) mu0, shift acts only through the score theta . mu
``oscillating``  m = delta (A theta + b) - (1 - delta) mu

The linear-family variants (everything except ``spam``) use the point loss
``-z . theta + ridge/2 |theta|^2``. ``spam`` uses ridge-regularized logistic
cross-entropy over a two-class mixture; only the spam-class mean is part of
the evolving state, the non-spam class mean is a constant of the spec.

Expectations over the spam mixture reduce to one-dimensional Gaussian
integrals of softplus (``theta . x`` is scalar Gaussian), which are computed
with Gauss-Hermite quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from perfopt.errors import DomainError, InvalidInputError, SingularMatrixError


class Variant(str, Enum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"
    SPAM = "spam"
    BOTTLENECK = "bottleneck"
    OSCILLATING = "oscillating"


AFFINE_TARGET = (Variant.LINEAR, Variant.NONLINEAR, Variant.OSCILLATING)

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(96)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def delta_for_settle(k: float) -> float:
    """Update weight delta for which 99% of the old state is gone after ``k`` deployments.

    The previous mean's influence decays like ``(1 - delta)^k``, so this
    solves ``(1 - delta)^k = 0.01``.
    """
    if k <= 0:
        raise InvalidInputError("k must be positive")
    return 1.0 - 0.01 ** (1.0 / k)


def random_psd_target(d: int, rng: np.random.Generator, scale: float = 0.8, R: float = 5.0,
                      b: np.ndarray | None = None, max_tries: int = 1000) -> np.ndarray:
    """Draw ``A = -scale * P`` with P = G G^T / d + I for a Gaussian G.

    Draws are rejected until the stable point ``-A^{-1} b`` lies inside
    ``[-R, R]^d`` (when ``b`` is given), so both the optimum and the stable
    point are interior.
    """
    for _ in range(max_tries):
        G = rng.standard_normal((d, d))
        A = -scale * (G @ G.T / d + np.eye(d))
        if b is None or np.max(np.abs(np.linalg.solve(A, b))) <= R:
            return A
    raise InvalidInputError("could not draw a target matrix with an interior stable point")


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """Immutable description of one environment instance.

    ``alpha`` is carried for the spam preset only as a record of the
    published constant; the dynamics use ``eps`` alone.
    """

    variant: Variant
    d: int
    delta: float
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    mu_orig: np.ndarray | None = None
    mu_other: np.ndarray | None = None
    spam_fraction: float = 0.5
    eps: float = 0.0
    alpha: float | None = None
    ridge: float = 0.0
    mu0: np.ndarray | None = None
    Sigma: np.ndarray | None = None
    R: float = 5.0
    sigma_err: float = 1e-3
    observation: str = "noise"
    n_samples: int = 1000
    mu_init: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("A", "b", "mu_orig", "mu_other", "mu0", "Sigma", "mu_init"):
            val = getattr(self, name)
            if val is not None:
                arr = np.array(val, dtype=float)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        if self.Sigma is None:
            eye = np.eye(self.d)
            eye.setflags(write=False)
            object.__setattr__(self, "Sigma", eye)
        self.validate()

    def validate(self) -> None:
        d = self.d
        if d < 1:
            raise InvalidInputError("d must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise InvalidInputError(f"delta must lie in (0, 1), got {self.delta}")
        if self.sigma_err < 0:
            raise InvalidInputError("sigma_err must be nonnegative")
        if self.observation not in ("noise", "sample"):
            raise InvalidInputError("observation must be 'noise' or 'sample'")
        if self.Sigma.shape != (d, d) or not np.allclose(self.Sigma, self.Sigma.T):
            raise InvalidInputError("Sigma must be a symmetric d x d matrix")
        if np.min(np.linalg.eigvalsh(self.Sigma)) <= 0:
            raise InvalidInputError("Sigma must be positive definite")
        v = self.variant
        if v in AFFINE_TARGET:
            if self.A is None or self.b is None:
                raise InvalidInputError(f"{v.value} environment needs A and b")
            if self.A.shape != (d, d) or self.b.shape != (d,):
                raise InvalidInputError("A must be d x d and b length d")
        elif v is Variant.SPAM:
            if self.mu_orig is None or self.mu_other is None:
                raise InvalidInputError("spam environment needs mu_orig and mu_other")
            if self.mu_orig.shape != (d,) or self.mu_other.shape != (d,):
                raise InvalidInputError("spam class means must have length d")
            if not 0.0 <= self.spam_fraction <= 1.0:
                raise InvalidInputError("spam_fraction must lie in [0, 1]")
        elif v is Variant.BOTTLENECK:
            if self.mu0 is None or self.mu0.shape != (d,):
                raise InvalidInputError("bottleneck environment needs mu0 of length d")
            if abs(np.linalg.norm(self.mu0) - 1.0) > 1e-9 or np.any(self.mu0 < 0):
                raise InvalidInputError("bottleneck mu0 must be a nonnegative unit vector")
        if self.mu_init is not None and self.mu_init.shape != (d,):
            raise InvalidInputError("mu_init must have length d")

    def with_(self, **changes) -> "EnvironmentSpec":
        return replace(self, **changes)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Feasible box for theta."""
        if self.variant is Variant.BOTTLENECK:
            return np.zeros(self.d), np.full(self.d, 1.0 / math.sqrt(self.d))
        return np.full(self.d, -self.R), np.full(self.d, self.R)

    @property
    def is_linear_loss(self) -> bool:
        return self.variant is not Variant.SPAM

    def to_dict(self) -> dict:
        out = {"variant": self.variant.value, "d": self.d, "delta": self.delta}
        for name in ("A", "b", "mu_orig", "mu_other", "mu0", "mu_init"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val.tolist()
        if not np.array_equal(self.Sigma, np.eye(self.d)):
            out["Sigma"] = self.Sigma.tolist()
        if self.variant is Variant.SPAM:
            out.update(spam_fraction=self.spam_fraction, eps=self.eps, alpha=self.alpha)
        if self.variant in (Variant.SPAM, Variant.BOTTLENECK):
            out["ridge"] = self.ridge
        out.update(R=self.R, sigma_err=self.sigma_err, observation=self.observation)
        if self.observation == "sample":
            out["n_samples"] = self.n_samples
        return out


def _check_dims(spec: EnvironmentSpec, *vecs) -> list[np.ndarray]:
    out = []
    for v in vecs:
        arr = np.asarray(v, dtype=float)
        if arr.shape != (spec.d,):
            raise InvalidInputError(f"expected a vector of length {spec.d}, got shape {arr.shape}")
        out.append(arr)
    return out


def _bottleneck_denominator(spec: EnvironmentSpec, theta: np.ndarray) -> float:
    denom = 1.0 + float(theta @ spec.mu0)
    if denom <= 0:
        raise DomainError(f"1 + theta.mu0 = {denom:.3g} is not positive")
    return denom


# ----------------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------------

def mean_map(spec: EnvironmentSpec, theta, mu) -> np.ndarray:
    """One step of the population response ``m(theta, mu)``."""
    theta, mu = _check_dims(spec, theta, mu)
    v, delta = spec.variant, spec.delta
    if v is Variant.LINEAR:
        return delta * (spec.A @ theta + spec.b) + (1 - delta) * mu
    if v is Variant.NONLINEAR:
        w = delta ** (mu ** 2)
        return w * (spec.A @ theta + spec.b) + (1 - w) * mu
    if v is Variant.OSCILLATING:
        return delta * (spec.A @ theta + spec.b) - (1 - delta) * mu
    if v is Variant.SPAM:
        return delta * (spec.mu_orig - spec.eps * theta) + (1 - delta) * mu
    return (1.0 - float(theta @ mu)) * spec.mu0


def long_term_mean(spec: EnvironmentSpec, theta) -> np.ndarray:
    """Fixed point ``mu*(theta)`` of ``mean_map(theta, .)``."""
    (theta,) = _check_dims(spec, theta)
    v = spec.variant
    if v in (Variant.LINEAR, Variant.NONLINEAR):
        return spec.A @ theta + spec.b
    if v is Variant.OSCILLATING:
        return spec.delta / (2 - spec.delta) * (spec.A @ theta + spec.b)
    if v is Variant.SPAM:
        return spec.mu_orig - spec.eps * theta
    return spec.mu0 / _bottleneck_denominator(spec, theta)


def long_term_jacobian(spec: EnvironmentSpec, theta) -> np.ndarray:
    """Analytic ``d mu* / d theta``."""
    (theta,) = _check_dims(spec, theta)
    v = spec.variant
    if v in (Variant.LINEAR, Variant.NONLINEAR):
        return spec.A.copy()
    if v is Variant.OSCILLATING:
        return spec.delta / (2 - spec.delta) * spec.A
    if v is Variant.SPAM:
        return -spec.eps * np.eye(spec.d)
    denom = _bottleneck_denominator(spec, theta)
    return -np.outer(spec.mu0, spec.mu0) / denom ** 2


def map_partials(spec: EnvironmentSpec, theta, mu) -> tuple[np.ndarray, np.ndarray]:
    """Analytic partial Jacobians of ``mean_map`` w.r.t. theta and mu."""
    theta, mu = _check_dims(spec, theta, mu)
    v, delta, d = spec.variant, spec.delta, spec.d
    eye = np.eye(d)
    if v is Variant.LINEAR:
        return delta * spec.A, (1 - delta) * eye
    if v is Variant.OSCILLATING:
        return delta * spec.A, -(1 - delta) * eye
    if v is Variant.SPAM:
        return -delta * spec.eps * eye, (1 - delta) * eye
    if v is Variant.NONLINEAR:
        w = delta ** (mu ** 2)
        target = spec.A @ theta + spec.b
        dw = w * math.log(delta) * 2 * mu
        return w[:, None] * spec.A, np.diag(dw * (target - mu) + 1 - w)
    return -np.outer(spec.mu0, mu), -np.outer(spec.mu0, theta)


# bottleneck score s(theta, mu) = theta . mu

def score(theta, mu) -> np.ndarray:
    return np.atleast_1d(np.dot(theta, mu))


def score_grad_theta(theta, mu) -> np.ndarray:
    return np.asarray(mu, dtype=float)[None, :]


def score_grad_mu(theta, mu) -> np.ndarray:
    return np.asarray(theta, dtype=float)[None, :]


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def _softplus(u):
    # same values as np.logaddexp(0, u), several times faster
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _gauss_1d(fn, mean: float, std: float) -> float:
    return float(_GH_WEIGHTS @ fn(mean + std * _GH_NODES))


def spam_loss(spec: EnvironmentSpec, theta: np.ndarray, mu_spam: np.ndarray) -> float:
    """Expected ridge cross-entropy over the two-class mixture.

    The classifier predicts P(spam | x) = sigmoid(theta . x).
    """
    std = math.sqrt(float(theta @ spec.Sigma @ theta))
    p = spec.spam_fraction
    spam_part = _gauss_1d(lambda u: _softplus(-u), float(theta @ mu_spam), std)
    ham_part = _gauss_1d(_softplus, float(theta @ spec.mu_other), std)
    return p * spam_part + (1 - p) * ham_part + 0.5 * spec.ridge * float(theta @ theta)


def spam_point_loss(spec: EnvironmentSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Per-sample loss values and theta-gradients; ``y`` is 1 for spam."""
    u = x @ theta
    sign = np.where(y > 0, -1.0, 1.0)
    values = _softplus(sign * u) + 0.5 * spec.ridge * float(theta @ theta)
    grads = (sign * _sigmoid(sign * u))[:, None] * x + spec.ridge * theta
    return values, grads


def linear_point_loss(ridge: float):
    """Point loss ``-z . theta + ridge/2 |theta|^2`` as a batch function."""

    def loss(z: np.ndarray, theta: np.ndarray):
        values = -z @ theta + 0.5 * ridge * float(theta @ theta)
        grads = -z + ridge * theta
        return values, grads

    return loss


def instantaneous_loss(spec: EnvironmentSpec, theta, mu) -> float:
    """Expected point loss of ``theta`` under the population with mean ``mu``."""
    theta, mu = _check_dims(spec, theta, mu)
    if spec.variant is Variant.SPAM:
        return spam_loss(spec, theta, mu)
    return float(-mu @ theta + 0.5 * spec.ridge * theta @ theta)


def long_term_loss(spec: EnvironmentSpec, theta) -> float:
    (theta,) = _check_dims(spec, theta)
    if spec.variant is Variant.BOTTLENECK:
        s = float(theta @ spec.mu0)
        denom = _bottleneck_denominator(spec, theta)
        return -s / denom + 0.5 * spec.ridge * float(theta @ theta)
    return instantaneous_loss(spec, theta, long_term_mean(spec, theta))


def long_term_grad(spec: EnvironmentSpec, theta) -> np.ndarray:
    """Gradient of the long-term loss.

    Closed form for every variant except ``spam``, which uses central
    differences of the quadrature loss.
    """
    (theta,) = _check_dims(spec, theta)
    v = spec.variant
    if v in AFFINE_TARGET:
        c = spec.delta / (2 - spec.delta) if v is Variant.OSCILLATING else 1.0
        return -c * ((spec.A @ theta + spec.b) + spec.A.T @ theta) + spec.ridge * theta
    if v is Variant.BOTTLENECK:
        denom = _bottleneck_denominator(spec, theta)
        return spec.ridge * theta - spec.mu0 / denom ** 2
    h = 1e-6
    grad = np.empty(spec.d)
    for i in range(spec.d):
        e = np.zeros(spec.d)
        e[i] = h
        grad[i] = (long_term_loss(spec, theta + e) - long_term_loss(spec, theta - e)) / (2 * h)
    return grad


def long_term_hessian(spec: EnvironmentSpec, theta) -> np.ndarray:
    """Closed-form Hessian; available for the bottleneck and affine-target variants."""
    (theta,) = _check_dims(spec, theta)
    v = spec.variant
    if v is Variant.BOTTLENECK:
        denom = _bottleneck_denominator(spec, theta)
        return spec.ridge * np.eye(spec.d) + 2.0 / denom ** 3 * np.outer(spec.mu0, spec.mu0)
    if v in AFFINE_TARGET:
        c = spec.delta / (2 - spec.delta) if v is Variant.OSCILLATING else 1.0
        return -c * (spec.A + spec.A.T) + spec.ridge * np.eye(spec.d)
    raise InvalidInputError("no closed-form Hessian for the spam environment")


def opt_reference(spec: EnvironmentSpec) -> tuple[np.ndarray, float, str]:
    """Long-term optimum ``(theta_OPT, L*(theta_OPT), provenance)``.

    For the affine-target variants the stationary point of the quadratic
    ``L*`` is ``-(A + A^T)^{-1} b`` without ridge (``-A^{-1} b / 2`` for
    symmetric A); a ridge term shifts the system to ``(c(A + A^T) - ridge I)``
    with ``c`` the long-term mean scale of the variant.
    When it falls outside the box, or for spam and bottleneck, the optimum is
    found numerically.
    """
    from perfopt.oracles import opt_search

    if spec.variant in AFFINE_TARGET:
        c = spec.delta / (2 - spec.delta) if spec.variant is Variant.OSCILLATING else 1.0
        S = c * (spec.A + spec.A.T) - spec.ridge * np.eye(spec.d)
        if np.linalg.cond(S) > 1e12:
            raise SingularMatrixError("stationarity system is singular")
        theta = -c * np.linalg.solve(S, spec.b)
        lo, hi = spec.bounds()
        if np.all(theta >= lo) and np.all(theta <= hi):
            return theta, long_term_loss(spec, theta), "closed-form"
    theta, value, _ = opt_search(spec)
    return theta, value, "opt_search"


def stable_point(spec: EnvironmentSpec) -> np.ndarray:
    """Performatively stable point of the linear and nonlinear variants.

    Solves ``ridge theta = A theta + b``, i.e. ``-A^{-1} b`` without ridge.
    """
    if spec.variant not in (Variant.LINEAR, Variant.NONLINEAR):
        raise InvalidInputError("closed-form stable point only for linear/nonlinear")
    return np.linalg.solve(spec.ridge * np.eye(spec.d) - spec.A, spec.b)


# ----------------------------------------------------------------------------
# state and observation
# ----------------------------------------------------------------------------

class EnvState:
    """Mutable population state for a single trajectory.

    ``mu_current`` starts at ``spec.mu_init`` if given, else at the long-term
    mean of ``theta0`` (the population has settled on the initial model).
    """

    def __init__(self, spec: EnvironmentSpec, rng: np.random.Generator, theta0=None):
        self.spec = spec
        self.rng = rng
        if spec.mu_init is not None:
            mu = np.array(spec.mu_init, dtype=float)
        else:
            theta0 = np.zeros(spec.d) if theta0 is None else np.asarray(theta0, dtype=float)
            mu = long_term_mean(spec, theta0)
        self.mu_current = mu
        self.step_count = 0
        if spec.observation == "sample":
            self._chol = np.linalg.cholesky(spec.Sigma)

    def observe(self) -> np.ndarray:
        """Noisy estimate of the current mean without advancing the state."""
        spec = self.spec
        if spec.observation == "sample":
            z = self.rng.standard_normal((spec.n_samples, spec.d)) @ self._chol.T
            return self.mu_current + z.mean(axis=0)
        # always draw so the noise stream does not depend on sigma_err
        e = self.rng.standard_normal(spec.d)
        return self.mu_current + spec.sigma_err * e

    def deploy(self, theta) -> np.ndarray:
        """Deploy ``theta``, let the population react, and return the noisy mean."""
        self.mu_current = mean_map(self.spec, theta, self.mu_current)
        self.step_count += 1
        return self.observe()


def deploy_and_observe(state: EnvState, theta) -> np.ndarray:
    return state.deploy(theta)
