"""Dictionary learning: the learning step and the full alternation.

The grouped objective is

    f(alpha, D) = (1/G) sum_g [ (1/n) ||Y_g - (sum_k alpha_gk D_k) X_g||_F^2
                               + lam ||alpha_g||_1 ]

minimized alternately over the coefficients (encoder.encode_all) and over
the dictionary, every entry constrained to {||D||_* <= tau, ||D||_2 <= 1}.
The learning step is a monotone FISTA with backtracking; the same core also
drives the nuclear-norm baseline.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt, field_validator

from config import Config
from encoder import encode_all
from exceptions import ConfigurationError, ConfigurationWarning, DimensionError, NumericalError
from matcore import numerical_rank, power_iteration, project_to_dictionary_set, spectral_norm, nuclear_norm
from simulate import GroupedDataset
from tasks import chunked, map_groups

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dictionary:
    atoms: np.ndarray  # (K, q, p)
    tau: float

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim != 3 or atoms.shape[0] < 1:
            raise DimensionError(f"dictionary needs a (K, q, p) array with K >= 1, got {atoms.shape}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        object.__setattr__(self, "atoms", atoms)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.atoms.shape[1], self.atoms.shape[2]

    def ranks(self, rtol: float = Config.RANK_RTOL) -> list[int]:
        return [numerical_rank(D, rtol) for D in self.atoms]

    def is_feasible(self, atol: float = 1e-6) -> bool:
        return all(
            nuclear_norm(D) <= self.tau + atol and spectral_norm(D) <= 1.0 + atol for D in self.atoms
        )


class CscConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_atoms: PositiveInt = 20
    lam: NonNegativeFloat = 0.05
    tau: PositiveFloat = 1.0
    max_alternations: PositiveInt = Config.MAX_ALTERNATIONS
    objective_rtol: PositiveFloat = Config.OBJECTIVE_RTOL
    encoder_tol: PositiveFloat = Config.ENCODER_TOL
    encoder_max_sweeps: PositiveInt = Config.ENCODER_MAX_SWEEPS
    max_inner_iterations: PositiveInt = Config.DICT_MAX_INNER_ITERATIONS
    rng_seed: int = 0
    warm_start: bool = True
    dict_solver: Literal["fista", "pgd"] = "fista"
    n_threads: PositiveInt = 1
    parallel_reduction: bool = False

    @field_validator("tau")
    @classmethod
    def _recommend_tau(cls, value: float) -> float:
        if value > 1.0:
            message = f"tau={value} is outside the recommended range (0, 1]"
            logger.warning(message)
            warnings.warn(ConfigurationWarning(message), stacklevel=2)
        return value


@dataclass
class FitDiagnostics:
    objective_per_alternation: list = field(default_factory=list)
    l0_per_group_per_alternation: list = field(default_factory=list)
    l1_per_group_per_alternation: list = field(default_factory=list)
    rank_per_entry_per_alternation: list = field(default_factory=list)
    stationarity_per_alternation: list = field(default_factory=list)
    sparsity_warning: bool = False
    converged: bool = False

    @property
    def n_alternations(self) -> int:
        return len(self.objective_per_alternation)

    def record(self, objective: float, alphas: np.ndarray, ranks: list, stationarity: float) -> None:
        self.objective_per_alternation.append(float(objective))
        self.l0_per_group_per_alternation.append([int(v) for v in np.count_nonzero(alphas, axis=1)])
        self.l1_per_group_per_alternation.append([float(v) for v in np.abs(alphas).sum(axis=1)])
        self.rank_per_entry_per_alternation.append([int(r) for r in ranks])
        self.stationarity_per_alternation.append(float(stationarity))
        self.sparsity_warning = sparsity_rule_of_thumb(self.l0_per_group_per_alternation)

    def mean_l0(self) -> list[float]:
        return [float(np.mean(row)) if row else 0.0 for row in self.l0_per_group_per_alternation]

    def mean_l1(self) -> list[float]:
        return [float(np.mean(row)) if row else 0.0 for row in self.l1_per_group_per_alternation]

    def to_frame(self) -> pd.DataFrame:
        """Tidy table: one row per alternation per series element"""
        rows = []
        for t in range(self.n_alternations):
            alternation = t + 1
            rows.append((alternation, "objective", 0, self.objective_per_alternation[t]))
            rows.append((alternation, "stationarity", 0, self.stationarity_per_alternation[t]))
            rows.extend((alternation, "l0", g, v) for g, v in enumerate(self.l0_per_group_per_alternation[t]))
            rows.extend((alternation, "l1", g, v) for g, v in enumerate(self.l1_per_group_per_alternation[t]))
            rows.extend((alternation, "rank", k, v) for k, v in enumerate(self.rank_per_entry_per_alternation[t]))
        return pd.DataFrame(rows, columns=["alternation", "series", "index", "value"])

    def to_dict(self) -> dict:
        return {
            "objective_per_alternation": self.objective_per_alternation,
            "l0_per_group_per_alternation": self.l0_per_group_per_alternation,
            "l1_per_group_per_alternation": self.l1_per_group_per_alternation,
            "rank_per_entry_per_alternation": self.rank_per_entry_per_alternation,
            "stationarity_per_alternation": self.stationarity_per_alternation,
            "sparsity_warning": self.sparsity_warning,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitDiagnostics":
        return cls(**data)


def sparsity_rule_of_thumb(l0_history: list) -> bool:
    """True when the mean l0 at the last alternation exceeds that at the first"""
    if len(l0_history) < 2:
        return False
    return float(np.mean(l0_history[-1])) > float(np.mean(l0_history[0]))


@dataclass(frozen=True)
class CscModel:
    dictionary: Dictionary
    coefficients: np.ndarray  # (G, K)
    config: CscConfig

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.ndim != 2 or coefficients.shape[1] != self.dictionary.n_atoms:
            raise DimensionError(
                f"coefficients have shape {coefficients.shape}, "
                f"expected (G, {self.dictionary.n_atoms})"
            )
        coefficients.setflags(write=False)
        self.dictionary.atoms.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def n_groups(self) -> int:
        return self.coefficients.shape[0]

    def regression_matrices(self) -> np.ndarray:
        """B_g = sum_k alpha_gk D_k for every group, shape (G, q, p)"""
        return np.einsum("gk,kqp->gqp", self.coefficients, self.dictionary.atoms)

    def predict(self, group: int, X) -> np.ndarray:
        return compose_B(self.dictionary, self.coefficients[group]) @ np.asarray(X, dtype=float)


@dataclass(frozen=True)
class ProjectedGradientResult:
    solution: np.ndarray
    objective: float
    stationarity: float
    n_iterations: int
    step_size: float
    objective_history: list
    converged: bool


def _backtrack(smooth, project, y, f_y, grad_y, step):
    """Halve the step until the quadratic upper bound holds at the projected point"""
    slack = 1e-12 * max(1.0, abs(f_y))
    while True:
        z = project(y - step * grad_y)
        d = z - y
        f_z = smooth(z)
        if f_z <= f_y + np.vdot(grad_y, d) + np.vdot(d, d) / (2.0 * step) + slack:
            return z, f_z, step
        step *= 0.5
        if step < Config.MIN_STEP_SIZE:
            raise NumericalError(f"step size fell below {Config.MIN_STEP_SIZE:g} during backtracking")


def monotone_fista(
    smooth: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    project: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    step_size: float,
    max_iterations: int,
    tol: float = Config.STATIONARITY_TOL,
    accelerate: bool = True,
) -> ProjectedGradientResult:
    """Projected gradient with optional FISTA momentum and monotone acceptance.

    An accelerated point is accepted only if it does not increase the smooth
    objective; otherwise a plain projected-gradient step is taken from the
    current iterate and the momentum restarts. x0 must be feasible.
    """
    x = np.array(x0, dtype=float)
    f_x = smooth(x)
    history = [f_x]
    y, y_is_x = x, True
    t = 1.0
    step = step_size
    stationarity = np.inf
    converged = False
    iteration = 0

    for iteration in range(1, max_iterations + 1):
        f_y = f_x if y_is_x else smooth(y)
        z, f_z, step = _backtrack(smooth, project, y, f_y, gradient(y), step)

        if f_z <= f_x:
            x_prev, x, f_x = x, z, f_z
            if accelerate:
                t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
                y, y_is_x = x + ((t - 1.0) / t_next) * (x - x_prev), t == 1.0
                t = t_next
            else:
                y, y_is_x = x, True
        else:
            w, f_w, step = _backtrack(smooth, project, x, f_x, gradient(x), step)
            if f_w <= f_x:
                x, f_x = w, f_w
            y, y_is_x, t = x, True, 1.0

        history.append(f_x)
        # stationarity proxy ||x - P(x - step * grad)|| at the accepted iterate
        stationarity = float(np.linalg.norm(x - project(x - step * gradient(x))))
        if stationarity < tol:
            converged = True
            break

    return ProjectedGradientResult(x, f_x, stationarity, iteration, step, history, converged)


@dataclass(frozen=True)
class GroupStatistics:
    """Per-group sufficient statistics of the smooth term:
    S_g = (1/n) X X^T, C_g = (1/n) Y X^T, e_g = (1/n) ||Y||_F^2."""

    covariance: np.ndarray  # (G, p, p)
    cross: np.ndarray  # (G, q, p)
    energy: np.ndarray  # (G,)
    covariance_norms: np.ndarray  # (G,), power-iteration estimates of ||S_g||_2

    @classmethod
    def from_dataset(cls, dataset: GroupedDataset) -> "GroupStatistics":
        n = dataset.n
        covariance = np.einsum("gpn,grn->gpr", dataset.X, dataset.X) / n
        cross = np.einsum("gqn,gpn->gqp", dataset.Y, dataset.X) / n
        energy = np.einsum("gqn,gqn->g", dataset.Y, dataset.Y) / n
        norms = np.array([power_iteration(S) for S in covariance])
        return cls(covariance, cross, energy, norms)

    def smooth(self, atoms: np.ndarray, alphas: np.ndarray) -> float:
        B = np.einsum("gk,kqp->gqp", alphas, atoms)
        BS = np.matmul(B, self.covariance)
        per_group = self.energy - 2.0 * np.einsum("gqp,gqp->g", B, self.cross) + np.einsum("gqp,gqp->g", BS, B)
        return float(np.mean(per_group))

    def _partial_gradient(self, atoms, alphas, groups) -> np.ndarray:
        B = np.einsum("gk,kqp->gqp", alphas[groups], atoms)
        R = np.matmul(B, self.covariance[groups]) - self.cross[groups]
        return np.einsum("gk,gqp->kqp", alphas[groups], R)

    def gradient(self, atoms, alphas, n_threads: int = 1, parallel_reduction: bool = False) -> np.ndarray:
        G = alphas.shape[0]
        groups = np.arange(G)
        if parallel_reduction and n_threads > 1:
            partials = map_groups(
                lambda chunk: self._partial_gradient(atoms, alphas, chunk),
                chunked(groups, n_threads),
                n_threads,
            )
            total = np.sum(partials, axis=0)
        else:
            total = self._partial_gradient(atoms, alphas, groups)
        return (2.0 / G) * total

    def lipschitz_estimate(self, alphas: np.ndarray) -> float:
        """(2/G) max_k sum_g alpha_gk^2 ||S_g||_2"""
        G = alphas.shape[0]
        return float((2.0 / G) * np.max((alphas ** 2).T @ self.covariance_norms))


def _check_coefficients(dictionary: Dictionary, coefficients, dataset: GroupedDataset) -> np.ndarray:
    alphas = np.asarray(coefficients, dtype=float)
    q, p = dictionary.shape
    dataset.check_shapes(p, q)
    if alphas.shape != (dataset.n_groups, dictionary.n_atoms):
        raise DimensionError(
            f"coefficients have shape {alphas.shape}, "
            f"expected ({dataset.n_groups}, {dictionary.n_atoms})"
        )
    return alphas


def compose_B(dictionary: Dictionary, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (dictionary.n_atoms,):
        raise DimensionError(f"alpha has shape {alpha.shape}, expected ({dictionary.n_atoms},)")
    return np.tensordot(alpha, dictionary.atoms, axes=1)


def objective(dictionary: Dictionary, coefficients, dataset: GroupedDataset, lam: float) -> float:
    alphas = _check_coefficients(dictionary, coefficients, dataset)
    B = np.einsum("gk,kqp->gqp", alphas, dictionary.atoms)
    residual = dataset.Y - np.matmul(B, dataset.X)
    fit = np.einsum("gqn,gqn->g", residual, residual) / dataset.n
    return float(np.mean(fit + lam * np.abs(alphas).sum(axis=1)))


def dictionary_gradient(dictionary: Dictionary, coefficients, dataset: GroupedDataset) -> np.ndarray:
    """-(2/(G n)) sum_g alpha_gk (Y_g - B_g X_g) X_g^T for every k"""
    alphas = _check_coefficients(dictionary, coefficients, dataset)
    B = np.einsum("gk,kqp->gqp", alphas, dictionary.atoms)
    residual = dataset.Y - np.matmul(B, dataset.X)
    RX = np.einsum("gqn,gpn->gqp", residual, dataset.X)
    return -(2.0 / (dataset.n_groups * dataset.n)) * np.einsum("gk,gqp->kqp", alphas, RX)


def _project_atoms(atoms: np.ndarray, tau: float) -> np.ndarray:
    return np.stack([project_to_dictionary_set(D, tau) for D in atoms])


def dictionary_step(
    dictionary: Dictionary,
    coefficients,
    dataset: GroupedDataset,
    max_inner_iterations: int = Config.DICT_MAX_INNER_ITERATIONS,
    *,
    statistics: Optional[GroupStatistics] = None,
    accelerate: bool = True,
    n_threads: int = 1,
    parallel_reduction: bool = False,
) -> tuple[Dictionary, ProjectedGradientResult]:
    """Learning step: update all entries jointly with coefficients fixed."""
    alphas = _check_coefficients(dictionary, coefficients, dataset)
    stats = statistics if statistics is not None else GroupStatistics.from_dataset(dataset)
    tau = dictionary.tau

    def smooth(atoms):
        return stats.smooth(atoms, alphas)

    lipschitz = stats.lipschitz_estimate(alphas)
    if lipschitz <= 0.0:
        # the smooth term does not depend on the dictionary
        value = smooth(dictionary.atoms)
        return dictionary, ProjectedGradientResult(dictionary.atoms, value, 0.0, 0, np.inf, [value], True)

    result = monotone_fista(
        smooth,
        lambda atoms: stats.gradient(atoms, alphas, n_threads, parallel_reduction),
        lambda atoms: _project_atoms(atoms, tau),
        dictionary.atoms,
        1.0 / lipschitz,
        max_inner_iterations,
        accelerate=accelerate,
    )
    logger.debug(
        "Learning step: %d iterations, step %.3e, stationarity %.3e",
        result.n_iterations, result.step_size, result.stationarity,
    )
    return Dictionary(result.solution, tau), result


def init_dictionary(K: int, p: int, q: int, tau: float, rng_seed: int) -> Dictionary:
    """Random rank-one entries sigma * u v^T with unit u, v and sigma = min(tau, 1)"""
    if K < 1:
        raise ConfigurationError("dictionary size K must be at least 1")
    rng = np.random.default_rng(rng_seed)
    sigma = min(tau, 1.0)
    atoms = np.empty((K, q, p))
    for k in range(K):
        u = rng.standard_normal(q)
        v = rng.standard_normal(p)
        atoms[k] = sigma * np.outer(u / np.linalg.norm(u), v / np.linalg.norm(v))
    return Dictionary(atoms, tau)


def _alternate(
    dataset: GroupedDataset, config: CscConfig, dictionary: Dictionary
) -> tuple[CscModel, FitDiagnostics]:
    stats = GroupStatistics.from_dataset(dataset)
    alphas = np.zeros((dataset.n_groups, config.n_atoms))
    diagnostics = FitDiagnostics()
    previous = None

    for t in range(1, config.max_alternations + 1):
        encoded = encode_all(
            dictionary, dataset, config.lam, config.encoder_tol, config.encoder_max_sweeps,
            warm_start=alphas if config.warm_start else None,
            n_threads=config.n_threads,
        )
        if not config.warm_start and t > 1:
            # a cold start converges only to tolerance; never accept a worse point
            if objective(dictionary, encoded, dataset, config.lam) > objective(dictionary, alphas, dataset, config.lam):
                encoded = alphas
        alphas = encoded

        dictionary, step = dictionary_step(
            dictionary, alphas, dataset, config.max_inner_iterations,
            statistics=stats,
            accelerate=config.dict_solver == "fista",
            n_threads=config.n_threads,
            parallel_reduction=config.parallel_reduction,
        )
        value = objective(dictionary, alphas, dataset, config.lam)
        diagnostics.record(value, alphas, dictionary.ranks(), step.stationarity)
        logger.info(
            "Alternation %d: objective %.10g, mean l0 %.2f",
            t, value, diagnostics.mean_l0()[-1],
        )

        if previous is not None and abs(previous - value) <= config.objective_rtol * max(abs(previous), 1e-300):
            diagnostics.converged = True
            break
        previous = value

    if not diagnostics.converged:
        logger.warning("Stopped after %d alternations without meeting objective_rtol", config.max_alternations)
    if diagnostics.sparsity_warning:
        logger.warning(
            "Mean coefficient sparsity grew from %.2f to %.2f across alternations; "
            "statistical accuracy may be poor",
            diagnostics.mean_l0()[0], diagnostics.mean_l0()[-1],
        )
    return CscModel(dictionary, alphas, config), diagnostics


def csc_fit(dataset: GroupedDataset, config: CscConfig) -> tuple[CscModel, FitDiagnostics]:
    """Alternate encoding and learning steps from a random rank-one dictionary."""
    if dataset.n_groups == 0 or dataset.n == 0:
        raise ConfigurationError("cannot fit an empty dataset")
    dictionary = init_dictionary(config.n_atoms, dataset.p, dataset.q, config.tau, config.rng_seed)
    return _alternate(dataset, config, dictionary)


def csc_fit_subset(
    dataset: GroupedDataset, config: CscConfig, groups
) -> tuple[CscModel, FitDiagnostics]:
    """Learn the dictionary on some groups, then encode every group against it."""
    groups = np.asarray(groups, dtype=int)
    if groups.size == 0:
        raise ConfigurationError("group subset is empty")
    learned, diagnostics = csc_fit(dataset.subset(groups), config)
    alphas = encode_all(
        learned.dictionary, dataset, config.lam, config.encoder_tol, config.encoder_max_sweeps,
        n_threads=config.n_threads,
    )
    logger.info("Dictionary learned on %d of %d groups", groups.size, dataset.n_groups)
    return CscModel(learned.dictionary, alphas, config), diagnostics
