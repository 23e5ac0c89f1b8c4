"""Separate nuclear-norm-constrained least squares per group:

    B_hat = argmin_{||B||_* <= L} (1/n) ||Y - B X||_F^2

solved with the same monotone FISTA core as the learning step, started at
B = 0.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt
from scipy import linalg

from config import Config
from dictlearn import ProjectedGradientResult, monotone_fista
from exceptions import CscError, ConfigurationError, DimensionError, NumericalError
from matcore import as_matrix, nuclear_norm, power_iteration, project_nuclear_ball
from simulate import GroupedDataset
from tasks import map_groups

logger = logging.getLogger(__name__)


class RrrConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    # nuclear-ball radius L; None picks ||B_ols||_* per group (requires n >= p)
    radius: Optional[PositiveFloat] = None
    max_iterations: PositiveInt = Config.RRR_MAX_ITERATIONS
    rtol: PositiveFloat = Config.RRR_RTOL
    rng_seed: int = 0  # unused by the deterministic solver
    n_threads: PositiveInt = 1


def default_radius(X, Y) -> Optional[float]:
    """||B_ols||_* from the group's least-squares fit, or None when n < p or X is rank deficient"""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    p, n = X.shape
    if n < p:
        return None
    # B X = Y  <=>  X^T B^T = Y^T
    solution, _, rank, _ = linalg.lstsq(X.T, Y.T)
    if rank < p:
        return None
    radius = nuclear_norm(solution.T)
    return radius if radius > 0 else None


def rrr_solve(X, Y, config: RrrConfig) -> ProjectedGradientResult:
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"X has {X.shape[1]} columns but Y has {Y.shape[1]}")
    radius = config.radius if config.radius is not None else default_radius(X, Y)
    if radius is None:
        raise ConfigurationError(
            "no radius configured and the least-squares default needs n >= p with full-rank X; "
            "choose one by cross-validation"
        )
    n = X.shape[1]
    S = X @ X.T / n
    C = Y @ X.T / n
    energy = float(np.vdot(Y, Y) / n)

    def smooth(B):
        return float(energy - 2.0 * np.vdot(B, C) + np.vdot(B @ S, B))

    def gradient(B):
        return 2.0 * (B @ S - C)

    B0 = np.zeros((Y.shape[0], X.shape[0]))
    if not np.any(S):
        # X = 0: every B fits equally well
        value = smooth(B0)
        return ProjectedGradientResult(B0, value, 0.0, 0, np.inf, [value], True)
    return monotone_fista(
        smooth,
        gradient,
        lambda B: project_nuclear_ball(B, radius),
        B0,
        1.0 / (2.0 * power_iteration(S)),
        config.max_iterations,
        tol=config.rtol,
    )


def rrr_fit(X, Y, config: RrrConfig) -> np.ndarray:
    result = rrr_solve(X, Y, config)
    if not result.converged:
        logger.info(
            "Baseline used its %d-iteration budget; stationarity %.3e",
            result.n_iterations, result.stationarity,
        )
    return result.solution


def rrr_fit_all(dataset: GroupedDataset, config: RrrConfig) -> list[np.ndarray]:
    """Fit every group independently; failures are collected and reported together."""

    def fit_group(g):
        try:
            return rrr_fit(dataset.X[g], dataset.Y[g], config)
        except CscError as e:
            return e

    results = map_groups(fit_group, range(dataset.n_groups), config.n_threads)
    failures = [(g, r) for g, r in enumerate(results) if isinstance(r, Exception)]
    if failures:
        detail = "; ".join(f"group {g}: {e}" for g, e in failures)
        kinds = {type(e) for _, e in failures}
        error_type = kinds.pop() if len(kinds) == 1 else NumericalError
        raise error_type(f"baseline failed in {len(failures)} group(s): {detail}")
    return results
