"""Grouped data containers and the simulation scenarios with known ground truth.

Random draws use numpy's default_rng (PCG64 + ziggurat normals) in a fixed
order: ground truth, then training designs and noise, then test designs and
noise. The same seed therefore reproduces a dataset bitwise.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from config import Config
from exceptions import ConfigurationError, DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

Scenario = Literal["structured", "unstructured", "structured_same_design"]


@dataclass(frozen=True)
class GroupedDataset:
    """G groups sharing p, q and n: X stacked as (G, p, n), Y as (G, q, n)."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        if X.ndim != 3 or Y.ndim != 3:
            raise DimensionError(f"X and Y must be stacked 3-d arrays, got {X.shape} and {Y.shape}")
        if X.shape[0] != Y.shape[0]:
            raise DimensionError(f"X has {X.shape[0]} groups but Y has {Y.shape[0]}")
        if X.shape[2] != Y.shape[2]:
            raise DimensionError(f"X has {X.shape[2]} columns but Y has {Y.shape[2]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise NonFiniteError("dataset contains NaN or Inf entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_groups(cls, groups) -> "GroupedDataset":
        """Build from a sequence of (X, Y) pairs"""
        groups = list(groups)
        if not groups:
            raise ConfigurationError("dataset has no groups")
        Xs = [np.asarray(X, dtype=float) for X, _ in groups]
        Ys = [np.asarray(Y, dtype=float) for _, Y in groups]
        for g, (X, Y) in enumerate(zip(Xs, Ys)):
            if X.shape != Xs[0].shape or Y.shape != Ys[0].shape:
                raise DimensionError(
                    f"group {g}: shapes X{X.shape}, Y{Y.shape} differ from group 0 "
                    f"X{Xs[0].shape}, Y{Ys[0].shape}"
                )
        return cls(np.stack(Xs), np.stack(Ys))

    @property
    def n_groups(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    def group(self, g: int) -> tuple[np.ndarray, np.ndarray]:
        return self.X[g], self.Y[g]

    def __iter__(self):
        return iter(zip(self.X, self.Y))

    def __len__(self) -> int:
        return self.n_groups

    def subset(self, groups) -> "GroupedDataset":
        idx = np.asarray(groups, dtype=int)
        return GroupedDataset(self.X[idx], self.Y[idx])

    def select_columns(self, columns) -> "GroupedDataset":
        """Keep the given sample columns; columns is (m,) shared or (G, m) per group"""
        cols = np.asarray(columns, dtype=int)
        if cols.ndim == 1:
            return GroupedDataset(self.X[:, :, cols], self.Y[:, :, cols])
        return GroupedDataset(
            np.take_along_axis(self.X, cols[:, None, :], axis=2),
            np.take_along_axis(self.Y, cols[:, None, :], axis=2),
        )

    def drop_columns(self, columns) -> "GroupedDataset":
        cols = np.asarray(columns, dtype=int)
        if cols.ndim == 1:
            keep = np.setdiff1d(np.arange(self.n), cols)
            return self.select_columns(keep)
        keep = np.stack([np.setdiff1d(np.arange(self.n), c) for c in cols])
        return self.select_columns(keep)

    def check_shapes(self, p: int, q: int) -> None:
        if self.p != p or self.q != q:
            raise DimensionError(f"dataset has p={self.p}, q={self.q}; expected p={p}, q={q}")


@dataclass(frozen=True)
class GroundTruth:
    B_star: np.ndarray  # (G, q, p)
    true_dictionary: Optional[np.ndarray] = None  # (T, q, p), structured scenarios only
    true_supports: Optional[np.ndarray] = None  # (G, s) atom indices, structured only
    true_coefficients: Optional[np.ndarray] = field(default=None)  # (G, T), structured only


class SimParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: Scenario = "structured"
    p: PositiveInt = Config.SIM_P
    q: Optional[PositiveInt] = None  # defaults to p
    n_train: PositiveInt = Config.SIM_N_TRAIN
    n_test: PositiveInt = Config.SIM_N_TEST
    n_groups: PositiveInt = Config.SIM_GROUPS
    true_dictionary_size: PositiveInt = Config.SIM_TRUE_DICTIONARY_SIZE
    true_sparsity: PositiveInt = Config.SIM_TRUE_SPARSITY
    true_rank: PositiveInt = Config.SIM_TRUE_RANK
    noise_sigma: float = Field(default=Config.SIM_SIGMA, ge=0.0)
    rng_seed: int = 0

    @model_validator(mode="after")
    def _check_counts(self):
        if self.true_sparsity > self.true_dictionary_size:
            raise ValueError(
                f"true_sparsity ({self.true_sparsity}) exceeds "
                f"true_dictionary_size ({self.true_dictionary_size})"
            )
        if self.scenario == "unstructured" and self.true_rank > min(self.p, self.n_q):
            raise ValueError(f"true_rank ({self.true_rank}) exceeds min(p, q)")
        return self

    @property
    def n_q(self) -> int:
        return self.q if self.q is not None else self.p


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _structured_truth(params: SimParams, rng: np.random.Generator) -> GroundTruth:
    p, q, T, s = params.p, params.n_q, params.true_dictionary_size, params.true_sparsity
    # rank-one atoms u v^T with unit-norm factors have unit spectral norm
    atoms = np.stack([np.outer(_unit(rng, q), _unit(rng, p)) for _ in range(T)])
    supports = np.empty((params.n_groups, s), dtype=int)
    coefficients = np.zeros((params.n_groups, T))
    for g in range(params.n_groups):
        supports[g] = np.sort(rng.choice(T, size=s, replace=False))
        coefficients[g, supports[g]] = rng.standard_normal(s)
    B_star = np.einsum("gt,tqp->gqp", coefficients, atoms)
    return GroundTruth(B_star, atoms, supports, coefficients)


def _unstructured_truth(params: SimParams, rng: np.random.Generator) -> GroundTruth:
    p, q, r = params.p, params.n_q, params.true_rank
    B_star = np.stack(
        [rng.standard_normal((q, r)) @ rng.standard_normal((p, r)).T for _ in range(params.n_groups)]
    )
    return GroundTruth(B_star)


def _responses(B_star, X, sigma, rng):
    G, q = B_star.shape[0], B_star.shape[1]
    noise = sigma * rng.standard_normal((G, q, X.shape[2])) if sigma > 0 else 0.0
    return np.einsum("gqp,gpn->gqn", B_star, X) + noise


def _designs(params: SimParams, n: int, rng: np.random.Generator) -> np.ndarray:
    if params.scenario == "structured_same_design":
        shared = rng.standard_normal((params.p, n))
        return np.broadcast_to(shared, (params.n_groups, params.p, n)).copy()
    return rng.standard_normal((params.n_groups, params.p, n))


def gen_dataset(params: SimParams) -> tuple[GroupedDataset, GroupedDataset, GroundTruth]:
    """Draw (train, test, truth) for one scenario: Y = B* X + sigma * noise."""
    rng = np.random.default_rng(params.rng_seed)
    if params.scenario == "unstructured":
        truth = _unstructured_truth(params, rng)
    else:
        truth = _structured_truth(params, rng)

    X_train = _designs(params, params.n_train, rng)
    Y_train = _responses(truth.B_star, X_train, params.noise_sigma, rng)
    X_test = _designs(params, params.n_test, rng)
    Y_test = _responses(truth.B_star, X_test, params.noise_sigma, rng)

    logger.info(
        "Simulated %s scenario: G=%d, p=%d, q=%d, n_train=%d, n_test=%d, sigma=%g, seed=%d",
        params.scenario, params.n_groups, params.p, params.n_q,
        params.n_train, params.n_test, params.noise_sigma, params.rng_seed,
    )
    return GroupedDataset(X_train, Y_train), GroupedDataset(X_test, Y_test), truth
