"""Encoding step: per-group lasso over K matrix-valued features.

For group g with features Z_k = D_k X the subproblem is

    min_alpha (1/n) ||Y - sum_k alpha_k Z_k||_F^2 + lam * ||alpha||_1

solved by cyclic coordinate descent with soft thresholding. The sweep keeps
the residual in correlation form, r_k = (1/n) <Z_k, residual>, so a
coordinate update costs O(K) once the Gram matrix is built.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from config import Config
from exceptions import ConvergenceWarning, DimensionError
from matcore import soft_threshold
from simulate import GroupedDataset
from tasks import map_groups

if TYPE_CHECKING:
    from dictlearn import Dictionary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureBundle:
    group_id: int
    features: np.ndarray  # (K, q, n), Z_k = D_k X
    response: np.ndarray  # (q, n)
    gram_diag: np.ndarray  # (K,), (1/n) <Z_k, Z_k>
    gram: np.ndarray  # (K, K), (1/n) <Z_k, Z_l>
    correlation: np.ndarray  # (K,), (1/n) <Z_k, Y>
    response_energy: float  # (1/n) ||Y||_F^2

    @property
    def n_features(self) -> int:
        return self.features.shape[0]

    def objective(self, alpha: np.ndarray, lam: float) -> float:
        """(1/n)||Y - sum alpha_k Z_k||^2 + lam ||alpha||_1 via the Gram form"""
        smooth = self.response_energy - 2.0 * self.correlation @ alpha + alpha @ self.gram @ alpha
        return float(max(smooth, 0.0) + lam * np.abs(alpha).sum())


@dataclass(frozen=True)
class LassoResult:
    alpha: np.ndarray
    n_sweeps: int
    kkt_violation: float
    objective_history: list
    converged: bool


def build_features(dictionary: "Dictionary", X, Y, group_id: int = 0) -> FeatureBundle:
    atoms = dictionary.atoms
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    K, q, p = atoms.shape
    if X.ndim != 2 or X.shape[0] != p:
        raise DimensionError(
            f"group {group_id}: X has shape {X.shape} but dictionary entries are {q}x{p}"
        )
    if Y.ndim != 2 or Y.shape != (q, X.shape[1]):
        raise DimensionError(
            f"group {group_id}: Y has shape {Y.shape}, expected ({q}, {X.shape[1]}) "
            f"for dictionary entries of shape {q}x{p}"
        )
    n = X.shape[1]
    features = np.einsum("kqp,pn->kqn", atoms, X)
    flat = features.reshape(K, -1)
    gram = flat @ flat.T / n
    return FeatureBundle(
        group_id=group_id,
        features=features,
        response=Y,
        gram_diag=np.einsum("ki,ki->k", flat, flat) / n,
        gram=gram,
        correlation=flat @ Y.ravel() / n,
        response_energy=float(np.vdot(Y, Y) / n),
    )


def _kkt_violation(alpha, residual_corr, lam, active) -> float:
    # gradient of the smooth term is -2 r_k
    g = 2.0 * residual_corr
    nonzero = active & (alpha != 0.0)
    zero = active & (alpha == 0.0)
    violation = 0.0
    if np.any(nonzero):
        violation = np.max(np.abs(g[nonzero] - lam * np.sign(alpha[nonzero])))
    if np.any(zero):
        violation = max(violation, np.max(np.maximum(np.abs(g[zero]) - lam, 0.0)))
    return float(violation)


def lasso_solve(
    bundle: FeatureBundle,
    lam: float,
    tol: float = Config.ENCODER_TOL,
    max_sweeps: int = Config.ENCODER_MAX_SWEEPS,
    alpha0: Optional[np.ndarray] = None,
) -> LassoResult:
    """Cyclic coordinate descent; converged when the largest coordinate change
    and the KKT violation are both below tol."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    K = bundle.n_features
    G = bundle.gram
    diag = bundle.gram_diag
    active = diag > 0.0  # zero features stay pinned at 0

    alpha = np.zeros(K) if alpha0 is None else np.where(active, np.asarray(alpha0, dtype=float), 0.0)
    if alpha.shape != (K,):
        raise DimensionError(f"warm start has shape {alpha.shape}, expected ({K},)")
    residual_corr = bundle.correlation - G @ alpha
    history = [bundle.objective(alpha, lam)]

    violation = _kkt_violation(alpha, residual_corr, lam, active)
    sweeps = 0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        max_change = 0.0
        for k in range(K):
            if not active[k]:
                continue
            rho = residual_corr[k] + diag[k] * alpha[k]
            new = soft_threshold(rho, lam / 2.0) / diag[k]
            delta = new - alpha[k]
            if delta != 0.0:
                residual_corr -= G[:, k] * delta
                alpha[k] = new
                max_change = max(max_change, abs(delta))
        history.append(bundle.objective(alpha, lam))
        violation = _kkt_violation(alpha, residual_corr, lam, active)
        if max_change < tol and violation < tol:
            # confirm on freshly computed correlations
            residual_corr = bundle.correlation - G @ alpha
            violation = _kkt_violation(alpha, residual_corr, lam, active)
            if violation < tol:
                converged = True
                break
        # refresh the maintained correlations against drift
        if sweeps % 50 == 0:
            residual_corr = bundle.correlation - G @ alpha

    return LassoResult(alpha, sweeps, violation, history, converged)


def lasso_encode(
    bundle: FeatureBundle,
    lam: float,
    tol: float = Config.ENCODER_TOL,
    max_sweeps: int = Config.ENCODER_MAX_SWEEPS,
    alpha0: Optional[np.ndarray] = None,
) -> np.ndarray:
    result = lasso_solve(bundle, lam, tol, max_sweeps, alpha0)
    if not result.converged:
        message = (
            f"group {bundle.group_id}: lasso stopped after {result.n_sweeps} sweeps "
            f"with KKT violation {result.kkt_violation:.3e}"
        )
        logger.warning(message)
        warnings.warn(ConvergenceWarning(message, result.kkt_violation, (bundle.group_id,)), stacklevel=2)
    return result.alpha


def encode_all(
    dictionary: "Dictionary",
    dataset: GroupedDataset,
    lam: float,
    tol: float = Config.ENCODER_TOL,
    max_sweeps: int = Config.ENCODER_MAX_SWEEPS,
    warm_start: Optional[np.ndarray] = None,
    n_threads: int = 1,
) -> np.ndarray:
    """Encode every group independently; returns the (G, K) coefficient array."""
    K, q, p = dictionary.atoms.shape
    dataset.check_shapes(p, q)
    if warm_start is not None and np.shape(warm_start) != (dataset.n_groups, K):
        raise DimensionError(
            f"warm start has shape {np.shape(warm_start)}, expected ({dataset.n_groups}, {K})"
        )

    def encode_group(g: int) -> LassoResult:
        bundle = build_features(dictionary, dataset.X[g], dataset.Y[g], group_id=g)
        alpha0 = None if warm_start is None else warm_start[g]
        return lasso_solve(bundle, lam, tol, max_sweeps, alpha0)

    results = map_groups(encode_group, range(dataset.n_groups), n_threads)
    failed = [g for g, r in enumerate(results) if not r.converged]
    if failed:
        worst = max(results[g].kkt_violation for g in failed)
        message = (
            f"lasso did not converge in {len(failed)} of {dataset.n_groups} groups "
            f"(groups {failed}); largest KKT violation {worst:.3e}"
        )
        logger.warning(message)
        warnings.warn(ConvergenceWarning(message, worst, tuple(failed)), stacklevel=2)
    if not results:
        return np.zeros((0, K))
    return np.stack([r.alpha for r in results])
