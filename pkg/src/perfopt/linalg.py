"""Dense kernels for the small matrices that show up in the estimators.

Everything here works on numpy arrays of at most a few dozen rows. All
functions are pure.
"""

from __future__ import annotations

import numpy as np

from perfopt.errors import InvalidBoundsError, InvalidInputError, SingularMatrixError

PINV_RTOL = 1e-10
COND_LIMIT = 1e12
_TINY = np.finfo(float).tiny


def _as_finite_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2 or M.size == 0:
        raise InvalidInputError(f"expected a nonempty matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError("matrix has non-finite entries")
    return M


def pseudoinverse(M, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rtol`` times the largest one, or below the
    smallest normal float (their reciprocal would overflow), are treated as zero.
    """
    return pseudoinverse_with_rank(M, rtol)[0]


def _cutoff(s: np.ndarray, rtol: float) -> float:
    return max(rtol * s[0], _TINY)


def pseudoinverse_with_rank(M, rtol: float = PINV_RTOL) -> tuple[np.ndarray, int]:
    """Pseudoinverse together with the numerical rank from the same SVD."""
    M = _as_finite_matrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > _cutoff(s, rtol)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T, int(keep.sum())


def numerical_rank(M, rtol: float = PINV_RTOL) -> int:
    M = _as_finite_matrix(M)
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > _cutoff(s, rtol)))


def invert_small(M, cond_limit: float = COND_LIMIT) -> np.ndarray:
    M = _as_finite_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise InvalidInputError(f"cannot invert non-square matrix of shape {M.shape}")
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularMatrixError(f"condition number {cond:.3g} exceeds {cond_limit:.3g}")
    return np.linalg.inv(M)


def clip_gradient(v, max_norm: float) -> np.ndarray:
    """Return ``v`` unchanged if its norm is at most ``max_norm``, else ``v / |v|``.

    Oversized gradients are normalized to a *unit* vector, not rescaled to
    ``max_norm``.
    """
    if max_norm <= 0:
        raise InvalidInputError("max_norm must be positive")
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm <= max_norm:
        return v
    return v / norm


def project_box(theta, lo, hi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvalidBoundsError("lower bound exceeds upper bound")
    return np.minimum(np.maximum(theta, lo), hi)


def spectral_norm(M) -> float:
    M = _as_finite_matrix(M)
    return float(np.linalg.norm(M, 2))
