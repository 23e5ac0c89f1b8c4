"""Numerical primitives: soft thresholding, thin SVD, and the projections onto
the nuclear-norm ball and onto the dictionary set

    C(tau) = {D : ||D||_* <= tau and ||D||_2 <= 1}.

Both norms are unitarily invariant, so each projection reduces to projecting
the singular values onto a capped simplex {0 <= s_i <= cap, sum s_i <= tau}.
"""

import logging
from typing import NamedTuple

import numpy as np
from scipy import linalg

from config import Config
from exceptions import DimensionError, NonFiniteError, NumericalError

logger = logging.getLogger(__name__)


class SvdResult(NamedTuple):
    left_vectors: np.ndarray  # rows x k, orthonormal columns
    singular_values: np.ndarray  # k, nonincreasing, >= 0
    right_vectors: np.ndarray  # cols x k, orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Validate a finite 2-d float array"""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] == 0 or A.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-d array, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError(f"{name} contains NaN or Inf entries")
    return A


def soft_threshold(v, t):
    """sign(v) * max(|v| - t, 0) for t >= 0; works elementwise on arrays"""
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def thin_svd(M) -> SvdResult:
    """Economy SVD with k = min(rows, cols).

    Uses LAPACK gesdd and retries with the slower but more robust gesvd
    before giving up.
    """
    A = as_matrix(M)
    try:
        U, s, Vh = linalg.svd(A, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except linalg.LinAlgError:
        logger.debug("gesdd did not converge on a %s matrix, retrying with gesvd", A.shape)
        try:
            U, s, Vh = linalg.svd(A, full_matrices=False, lapack_driver="gesvd", check_finite=False)
        except linalg.LinAlgError as e:
            raise NumericalError(f"SVD failed to converge on a {A.shape} matrix: {e}") from e
    return SvdResult(U, np.maximum(s, 0.0), Vh.T)


def nuclear_norm(M) -> float:
    return float(np.sum(linalg.svdvals(as_matrix(M))))


def spectral_norm(M) -> float:
    s = linalg.svdvals(as_matrix(M))
    return float(s[0]) if s.size else 0.0


def numerical_rank(M, rtol: float = Config.RANK_RTOL) -> int:
    """Number of singular values above rtol * s_1 (0 for the zero matrix)"""
    s = linalg.svdvals(as_matrix(M))
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def _largest_eigenvalue(S: np.ndarray) -> float:
    n = S.shape[0]
    return float(linalg.eigvalsh(S, subset_by_index=[n - 1, n - 1], check_finite=False)[0])


def power_iteration(S, n_iter: int = Config.POWER_ITERATIONS, tol: float = Config.POWER_TOL) -> float:
    """Estimate the spectral norm of a symmetric PSD matrix.

    Starts from the normalized all-ones vector so the estimate is
    deterministic; stops once the relative change of the Rayleigh quotient
    falls below tol. An estimate below the largest diagonal entry (a start
    vector near the null space of S) falls back to the exact eigenvalue.
    """
    S = np.asarray(S, dtype=float)
    if not np.any(S):
        return 0.0
    v = np.full(S.shape[0], 1.0 / np.sqrt(S.shape[0]))
    estimate = 0.0
    for _ in range(n_iter):
        w = S @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        new_estimate = float(v @ w)
        v = w / norm
        if abs(new_estimate - estimate) <= tol * max(abs(new_estimate), 1e-300):
            estimate = new_estimate
            break
        estimate = new_estimate
    estimate = max(estimate, float(v @ (S @ v)))
    if estimate < float(np.max(np.diag(S))):
        return _largest_eigenvalue(S)
    return estimate


def _project_simplex_uncapped(v: np.ndarray, budget: float) -> np.ndarray:
    # sort-based projection onto {x >= 0, sum x <= budget}
    clipped = np.maximum(v, 0.0)
    if clipped.sum() <= budget:
        return clipped
    a = np.sort(clipped)[::-1]
    shifts = (np.cumsum(a) - budget) / np.arange(1, a.size + 1)
    k = np.nonzero(a > shifts)[0][-1]
    return np.maximum(v - shifts[k], 0.0)


def project_capped_simplex(v, budget: float, cap: float = 1.0) -> np.ndarray:
    """Euclidean projection of v onto {x : 0 <= x_i <= cap, sum x_i <= budget}.

    The solution is clip(v - theta, 0, cap) for the smallest theta >= 0 that
    meets the budget; theta is found by bisection (exactly, by sorting, when
    cap is infinite).
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if cap <= 0:
        raise ValueError("cap must be positive")
    v = np.asarray(v, dtype=float)
    if np.isinf(cap):
        return _project_simplex_uncapped(v, budget)

    clipped = np.clip(v, 0.0, cap)
    if clipped.sum() <= budget:
        return clipped

    # sum(clip(v - theta)) is nonincreasing in theta; it exceeds the budget at
    # theta = 0 and is zero at theta = max(v)
    lo, hi = 0.0, float(np.max(v))
    for _ in range(Config.PROJECTION_MAX_BISECTIONS):
        theta = 0.5 * (lo + hi)
        total = np.clip(v - theta, 0.0, cap).sum()
        if total > budget:
            lo = theta
        else:
            hi = theta
            if budget - total <= Config.PROJECTION_TOL:
                break
        if hi - lo <= np.finfo(float).eps * max(hi, 1.0):
            break
    return np.clip(v - hi, 0.0, cap)


def _project_spectrum(M, budget: float, cap: float) -> np.ndarray:
    A = as_matrix(M)
    if not np.any(A):
        return np.zeros_like(A)
    svd = thin_svd(A)
    s = project_capped_simplex(svd.singular_values, budget, cap)
    return (svd.left_vectors * s) @ svd.right_vectors.T


def project_to_dictionary_set(M, tau: float) -> np.ndarray:
    """Frobenius projection onto {||D||_* <= tau, ||D||_2 <= 1}"""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return _project_spectrum(M, tau, 1.0)


def project_nuclear_ball(M, radius: float) -> np.ndarray:
    """Frobenius projection onto {||B||_* <= radius}"""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return _project_spectrum(M, radius, np.inf)
