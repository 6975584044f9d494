"""Estimating the long-term gradient from the optimization trajectory.

The pipeline is

1. regress output differences on input differences to get the partials of
   the mean map (``estimate_partials``),
2. sum the Neumann series to get the Jacobian of the long-term mean
   (``estimate_lt_jacobian``),
3. plug that Jacobian and the latest mean estimate into the score-function
   form of the long-term gradient (``estimate_lt_grad_closed_linear`` or
   ``estimate_lt_grad_mc``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from perfopt.errors import (
    DegenerateWindowError,
    InsufficientHorizonError,
    InvalidInputError,
    NonContractiveError,
)
from perfopt.linalg import invert_small, numerical_rank, pseudoinverse, pseudoinverse_with_rank, spectral_norm

logger = logging.getLogger(__name__)

CONTRACTION_MARGIN = 1e-3


@dataclass
class TrajectoryWindow:
    """Aligned history of inputs ``psi_t`` and noisy outputs ``mu_hat_t``.

    ``psi_t`` is ``[theta_t, mu_hat_{t-1}]`` in the general case and
    ``[s_t, mu_hat_{t-1}]`` for the score bottleneck. ``model_dim`` is the
    length of the leading (model or score) block. When ``anchor`` is set,
    differences are taken against that fixed point instead of the latest entry.
    """

    model_dim: int
    psi_points: list[np.ndarray] = field(default_factory=list)
    mu_outputs: list[np.ndarray] = field(default_factory=list)
    anchor: tuple[np.ndarray, np.ndarray] | None = None

    def append(self, psi, mu_hat) -> None:
        self.psi_points.append(np.asarray(psi, dtype=float))
        self.mu_outputs.append(np.asarray(mu_hat, dtype=float))

    def set_anchor(self, index: int = -1) -> None:
        self.anchor = (self.psi_points[index], self.mu_outputs[index])

    def __len__(self) -> int:
        return len(self.psi_points)

    @property
    def state_dim(self) -> int:
        return len(self.mu_outputs[0])


@dataclass
class PartialsEstimate:
    d1m: np.ndarray
    d2m: np.ndarray


@dataclass
class LongTermGradient:
    grad: np.ndarray
    jacobian_used: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _differences(window: TrajectoryWindow, H: int) -> tuple[np.ndarray, np.ndarray]:
    if len(window) < H + 1:
        raise InsufficientHorizonError(f"window holds {len(window)} points, need {H + 1}")
    psi = np.array(window.psi_points[-(H + 1):]).T
    mu = np.array(window.mu_outputs[-(H + 1):]).T
    if window.anchor is None:
        return psi[:, :-1] - psi[:, -1:], mu[:, :-1] - mu[:, -1:]
    base_psi, base_mu = window.anchor
    d_psi = psi - base_psi[:, None]
    d_mu = mu - base_mu[:, None]
    keep = np.any(d_psi != 0, axis=0)
    return d_psi[:, keep][:, -H:], d_mu[:, keep][:, -H:]


def _regress(d_mu: np.ndarray, d_psi: np.ndarray, model_dim: int) -> np.ndarray:
    # only the model block has to be spanned; a rank-deficient state block
    # gets the minimum-norm solution
    if not np.any(d_psi):
        raise DegenerateWindowError("all inputs in the window are identical")
    pinv, rank = pseudoinverse_with_rank(d_psi)
    # full row rank implies the model block is spanned; only check it otherwise
    if rank < d_psi.shape[0] and numerical_rank(d_psi[:model_dim]) < model_dim:
        raise DegenerateWindowError("model differences do not span the model space")
    return d_mu @ pinv


def estimate_partials(window: TrajectoryWindow, H: int) -> PartialsEstimate:
    """Finite-difference estimate of the partials of ``m`` from the last ``H + 1`` points.

    Returns ``[d1m, d2m] = (Delta mu)(Delta psi)^+`` split by column block.
    """
    d = window.model_dim
    need = d + window.state_dim
    if H < need:
        raise InsufficientHorizonError(f"horizon {H} is below the {need} regressors")
    d_psi, d_mu = _differences(window, H)
    J = _regress(d_mu, d_psi, d)
    return PartialsEstimate(d1m=J[:, :d], d2m=J[:, d:])


def contract(d2m: np.ndarray, margin: float = CONTRACTION_MARGIN) -> tuple[np.ndarray, bool]:
    """Scale ``d2m`` to spectral norm ``1 - margin`` if it is not already below that."""
    norm = spectral_norm(d2m)
    if norm < 1.0:
        return d2m, False
    return d2m * ((1.0 - margin) / norm), True


def estimate_lt_jacobian(partials: PartialsEstimate, project: bool = False) -> np.ndarray:
    """Long-term Jacobian ``(I - d2m)^{-1} d1m``.

    With ``project=False`` a non-contractive ``d2m`` raises; with
    ``project=True`` it is first scaled back to norm ``1 - 1e-3``.
    """
    return lt_jacobian_with_info(partials, project)[0]


def lt_jacobian_with_info(partials: PartialsEstimate, project: bool = True) -> tuple[np.ndarray, bool]:
    """Like :func:`estimate_lt_jacobian` but also reports whether ``d2m`` was scaled."""
    d2m = partials.d2m
    norm = spectral_norm(d2m)
    scaled = False
    if norm >= 1.0:
        if not project:
            raise NonContractiveError(f"|d2m| = {norm:.4f} >= 1")
        d2m = d2m * ((1.0 - CONTRACTION_MARGIN) / norm)
        norm = 1.0 - CONTRACTION_MARGIN
        scaled = True
        logger.debug("scaled non-contractive state partial back inside the unit ball")
    eye = np.eye(d2m.shape[0])
    if norm < 1.0 - 1e-8:
        # cond(I - d2m) <= (1 + |d2m|) / (1 - |d2m|), so a direct solve is safe
        return np.linalg.solve(eye - d2m, partials.d1m), scaled
    return invert_small(eye - d2m) @ partials.d1m, scaled


def neumann_partial_sum(partials: PartialsEstimate, k: int) -> np.ndarray:
    """``(I + d2m + ... + d2m^{k-1}) d1m``: derivative of the k-fold map with fixed partials."""
    acc = np.zeros_like(partials.d1m)
    term = partials.d1m.copy()
    for _ in range(k):
        acc = acc + term
        term = partials.d2m @ term
    return acc


def estimate_lt_grad_closed_linear(theta, mu_hat, jac, ridge: float = 0.0) -> LongTermGradient:
    """Long-term gradient for the point loss ``-z . theta + ridge/2 |theta|^2``.

    The direct term integrates to ``-mu_hat + ridge theta``. The score term is
    ``jac^T Sigma^{-1} E[(-z . theta)(z - mu)] = -jac^T theta`` for any covariance.
    """
    theta = np.asarray(theta, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    jac = np.asarray(jac, dtype=float)
    grad = -mu_hat - jac.T @ theta + ridge * theta
    return LongTermGradient(grad=grad, jacobian_used=jac)


def gaussian_score(z, mu, Sigma) -> np.ndarray:
    """``grad_mu log p(z; mu)`` for N(mu, Sigma), i.e. ``Sigma^{-1}(z - mu)`` row-wise."""
    z = np.atleast_2d(z)
    return np.linalg.solve(Sigma, (z - mu).T).T


def estimate_lt_grad_mc(
    loss: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    theta,
    mu_hat,
    jac,
    Sigma,
    n: int,
    rng: np.random.Generator,
    with_se: bool = True,
) -> LongTermGradient:
    """Monte-Carlo long-term gradient for an arbitrary point loss.

    ``loss(z, theta)`` maps an ``(n, d)`` batch to per-sample values ``(n,)``
    and theta-gradients ``(n, dim theta)``. Averages
    ``grad_theta l(z) + l(z) jac^T Sigma^{-1}(z - mu_hat)`` over ``z ~ N(mu_hat, Sigma)``.
    The per-coordinate standard error is reported in ``diagnostics["se"]``
    unless ``with_se`` is false.
    """
    if n < 1:
        raise InvalidInputError("need at least one sample")
    theta = np.asarray(theta, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    jac = np.asarray(jac, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    chol = np.linalg.cholesky(Sigma)
    noise = rng.standard_normal((n, mu_hat.size))
    z = mu_hat + noise @ chol.T
    values, grads = loss(z, theta)
    # Sigma^{-1}(z - mu) = L^{-T} noise, written row-wise
    scores = noise @ np.linalg.inv(chol)
    per_sample = grads + values[:, None] * (scores @ jac)
    # a matrix-vector product is much faster than a strided mean over axis 0
    grad = np.full(n, 1.0 / n) @ per_sample
    diagnostics = {"n": n}
    if with_se:
        diagnostics["se"] = per_sample.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.full(grad.shape, np.inf)
    return LongTermGradient(grad=grad, jacobian_used=jac, diagnostics=diagnostics)


def estimate_partials_bottleneck(
    window: TrajectoryWindow,
    H: int,
    score_grad_theta: np.ndarray,
    score_grad_mu: np.ndarray,
) -> PartialsEstimate:
    """Partials of ``m(theta, mu) = mbar(s(theta, mu), mu)`` through a known score.

    The window must hold ``psi_t = [s_t, mu_hat_{t-1}]``. The regression gives
    ``d mbar / d s`` and ``d mbar / d mu``; the chain rule then yields
    ``d1m = dmbar_ds @ ds_dtheta`` and ``d2m = dmbar_ds @ ds_dmu + dmbar_dmu``.
    """
    ds = window.model_dim
    need = ds + window.state_dim
    if H < need:
        raise InsufficientHorizonError(f"horizon {H} is below the {need} regressors")
    d_psi, d_mu = _differences(window, H)
    J = _regress(d_mu, d_psi, ds)
    dmbar_ds, dmbar_dmu = J[:, :ds], J[:, ds:]
    d1m = dmbar_ds @ np.atleast_2d(score_grad_theta)
    d2m = dmbar_ds @ np.atleast_2d(score_grad_mu) + dmbar_dmu
    return PartialsEstimate(d1m=d1m, d2m=d2m)


def estimate_jac_direct(theta_history: Sequence, settled_mu_history: Sequence, H: int) -> np.ndarray:
    """Jacobian of the long-term mean from settled ``(theta, mu)`` pairs.

    Uses the most recent ``H + 1`` pairs and differences against the latest.
    """
    if len(theta_history) != len(settled_mu_history):
        raise InvalidInputError("theta and mu histories must be aligned")
    d = len(theta_history[0])
    if H < d:
        raise InsufficientHorizonError(f"horizon {H} is below the dimension {d}")
    if len(theta_history) < H + 1:
        raise InsufficientHorizonError(f"have {len(theta_history)} pairs, need {H + 1}")
    th = np.array(theta_history[-(H + 1):], dtype=float).T
    mu = np.array(settled_mu_history[-(H + 1):], dtype=float).T
    d_th = th[:, :-1] - th[:, -1:]
    d_mu = mu[:, :-1] - mu[:, -1:]
    if not np.any(d_th):
        raise DegenerateWindowError("all models in the window are identical")
    pinv, rank = pseudoinverse_with_rank(d_th)
    if rank < d:
        raise DegenerateWindowError("model differences do not span the model space")
    return d_mu @ pinv
