"""Metrics, pairwise classification, hold-two-out evaluation, cross-validated
tuning and diagnostics reporting."""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from tabulate import tabulate

from baseline import RrrConfig, rrr_fit_all
from config import Config
from dictlearn import CscConfig, FitDiagnostics, csc_fit
from exceptions import ConfigurationError, CscError, DimensionError, UndefinedMetricError
from matcore import numerical_rank
from simulate import GroupedDataset, SimParams, gen_dataset
from tasks import map_groups

logger = logging.getLogger(__name__)

Metric = Literal["euclidean", "cosine_distance"]
FitProcedure = Callable[[GroupedDataset], Sequence[np.ndarray]]


@dataclass(frozen=True)
class EvalReport:
    estimation_error: Optional[float]
    prediction_error: float
    per_group_prediction_error: list


@dataclass(frozen=True)
class TrialRecord:
    columns: tuple
    correct_2v2: bool = False
    correct_1v2: bool = False
    squared_error: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass(frozen=True)
class PairEvalReport:
    acc_2v2: float
    acc_1v2: float
    mean_squared_error: float
    n_trials: int
    n_failed: int = 0
    trials: list = field(default_factory=list)


@dataclass(frozen=True)
class CvCurve:
    best: float
    grid: list
    mean_error: list
    fold_errors: list  # grid x folds

    def to_frame(self, name: str = "lam") -> pd.DataFrame:
        return pd.DataFrame({name: self.grid, "mean_prediction_error": self.mean_error})


def _as_stack(matrices) -> np.ndarray:
    return np.asarray([np.asarray(M, dtype=float) for M in matrices])


def estimation_error(B_hat, B_star) -> float:
    """(1/G) sum_g ||B*_g - B_hat_g||_F"""
    B_hat, B_star = _as_stack(B_hat), _as_stack(B_star)
    if B_hat.shape != B_star.shape:
        raise DimensionError(f"estimates have shape {B_hat.shape} but truth has {B_star.shape}")
    diff = (B_star - B_hat).reshape(B_hat.shape[0], -1)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def per_group_prediction_error(B_hat, test: GroupedDataset) -> np.ndarray:
    B_hat = _as_stack(B_hat)
    if B_hat.shape != (test.n_groups, test.q, test.p):
        raise DimensionError(
            f"estimates have shape {B_hat.shape}, expected ({test.n_groups}, {test.q}, {test.p})"
        )
    residual = test.Y - np.matmul(B_hat, test.X)
    return np.einsum("gqn,gqn->g", residual, residual) / test.n


def prediction_error(B_hat, test: GroupedDataset) -> float:
    """(1/G) sum_g (1/n_test) ||Y_g - B_hat_g X_g||_F^2"""
    return float(np.mean(per_group_prediction_error(B_hat, test)))


def evaluate(B_hat, test: GroupedDataset, B_star=None) -> EvalReport:
    per_group = per_group_prediction_error(B_hat, test)
    return EvalReport(
        estimation_error=None if B_star is None else estimation_error(B_hat, B_star),
        prediction_error=float(np.mean(per_group)),
        per_group_prediction_error=[float(v) for v in per_group],
    )


def _distance(a: np.ndarray, b: np.ndarray, metric: Metric) -> float:
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "cosine_distance":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise UndefinedMetricError("cosine distance is undefined for a zero vector")
        return float(1.0 - (a @ b) / (na * nb))
    raise ValueError(f"unknown metric {metric!r}")


def classify_pair(y1, y2, yhat1, yhat2, metric: Metric = "euclidean") -> tuple[bool, bool]:
    """(2v2 correct, 1v2 correct); ties count as incorrect"""
    y1, y2, yhat1, yhat2 = (np.asarray(v, dtype=float).ravel() for v in (y1, y2, yhat1, yhat2))
    if not (y1.shape == y2.shape == yhat1.shape == yhat2.shape):
        raise DimensionError("all four vectors must have the same length")
    d11 = _distance(y1, yhat1, metric)
    d22 = _distance(y2, yhat2, metric)
    d12 = _distance(y1, yhat2, metric)
    d21 = _distance(y2, yhat1, metric)
    correct_2v2 = d11 + d22 < d12 + d21
    correct_1v2 = d11 < d12 and d22 < d21
    return bool(correct_2v2), bool(correct_1v2)


def _holdout_pairs(n: int, n_trials: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Distinct pairs without replacement while they last, with replacement beyond that"""
    pairs = list(itertools.combinations(range(n), 2))
    if n_trials <= len(pairs):
        chosen = rng.choice(len(pairs), size=n_trials, replace=False)
    else:
        chosen = rng.choice(len(pairs), size=n_trials, replace=True)
    return [pairs[i] for i in chosen]


def hold_two_out_cv(
    dataset: GroupedDataset,
    fit_procedure: FitProcedure,
    n_trials: int = Config.HOLDOUT_TRIALS,
    metric: Metric = "euclidean",
    rng_seed: int = 0,
    n_threads: int = 1,
) -> list[PairEvalReport]:
    """Repeatedly hold out the same two columns in every group, fit on the
    rest and score the two held-out responses. Returns one report per group."""
    if dataset.n < 3:
        raise ConfigurationError(f"hold-two-out needs at least 3 columns, got {dataset.n}")
    if n_trials < 1:
        raise ConfigurationError("n_trials must be at least 1")
    rng = np.random.default_rng(rng_seed)
    pairs = _holdout_pairs(dataset.n, n_trials, rng)

    def run_trial(pair) -> list[TrialRecord]:
        try:
            estimates = _as_stack(fit_procedure(dataset.drop_columns(list(pair))))
            records = []
            for g in range(dataset.n_groups):
                X, Y = dataset.group(g)
                y1, y2 = Y[:, pair[0]], Y[:, pair[1]]
                yhat1, yhat2 = estimates[g] @ X[:, pair[0]], estimates[g] @ X[:, pair[1]]
                c2, c1 = classify_pair(y1, y2, yhat1, yhat2, metric)
                sq = 0.5 * (np.sum((y1 - yhat1) ** 2) + np.sum((y2 - yhat2) ** 2))
                records.append(TrialRecord(pair, c2, c1, float(sq)))
            return records
        except (CscError, np.linalg.LinAlgError, ArithmeticError) as e:
            logger.warning("Hold-out trial %s failed: %s", pair, e)
            return [TrialRecord(pair, failed=True, error=str(e)) for _ in range(dataset.n_groups)]

    per_trial = map_groups(run_trial, pairs, n_threads)
    reports = []
    for g in range(dataset.n_groups):
        trials = [records[g] for records in per_trial]
        ok = [t for t in trials if not t.failed]
        reports.append(
            PairEvalReport(
                acc_2v2=float(np.mean([t.correct_2v2 for t in ok])) if ok else float("nan"),
                acc_1v2=float(np.mean([t.correct_1v2 for t in ok])) if ok else float("nan"),
                mean_squared_error=float(np.mean([t.squared_error for t in ok])) if ok else float("nan"),
                n_trials=len(trials),
                n_failed=len(trials) - len(ok),
                trials=trials,
            )
        )
    return reports


def paired_sign_test(trials_a: Sequence[TrialRecord], trials_b: Sequence[TrialRecord], field_name: str = "correct_2v2") -> float:
    """Two-sided sign test p-value for method A against method B over paired trials.

    For the correctness fields larger is better; for squared_error smaller is
    better. Ties and failed trials are dropped.
    """
    if len(trials_a) != len(trials_b):
        raise DimensionError("trial lists must be paired")
    wins = losses = 0
    for a, b in zip(trials_a, trials_b):
        if a.failed or b.failed:
            continue
        va, vb = float(getattr(a, field_name)), float(getattr(b, field_name))
        if field_name == "squared_error":
            va, vb = -va, -vb
        if va > vb:
            wins += 1
        elif va < vb:
            losses += 1
    if wins + losses == 0:
        return 1.0
    return float(stats.binomtest(wins, wins + losses, 0.5).pvalue)


def compare_holdout(reports_a: list[PairEvalReport], reports_b: list[PairEvalReport]) -> pd.DataFrame:
    """Per-group accuracy differences (A - B) with sign-test p-values"""
    rows = []
    for g, (a, b) in enumerate(zip(reports_a, reports_b)):
        rows.append({
            "group": g,
            "delta_2v2": a.acc_2v2 - b.acc_2v2,
            "p_2v2": paired_sign_test(a.trials, b.trials, "correct_2v2"),
            "delta_1v2": a.acc_1v2 - b.acc_1v2,
            "p_1v2": paired_sign_test(a.trials, b.trials, "correct_1v2"),
            "delta_squared_error": a.mean_squared_error - b.mean_squared_error,
            "p_squared_error": paired_sign_test(a.trials, b.trials, "squared_error"),
        })
    return pd.DataFrame(rows)


def default_lambda_grid(n_atoms: int, n: int) -> list[float]:
    """c * sqrt(log K / n) for the configured factors c"""
    anchor = np.sqrt(np.log(n_atoms) / n)
    return sorted({float(c * anchor) for c in Config.LAMBDA_GRID_FACTORS})


def _column_folds(dataset: GroupedDataset, n_folds: int, rng_seed: int) -> list[np.ndarray]:
    if n_folds < 2:
        raise ConfigurationError("n_folds must be at least 2")
    if dataset.n < n_folds:
        raise ConfigurationError(
            f"{n_folds} folds over {dataset.n} columns leave an empty fold"
        )
    rng = np.random.default_rng(rng_seed)
    permutations = np.stack([rng.permutation(dataset.n) for _ in range(dataset.n_groups)])
    # every group gets its own permutation; fold sizes agree across groups
    return [np.sort(part, axis=1) for part in np.array_split(permutations, n_folds, axis=1)]


def _cross_validate(
    dataset: GroupedDataset,
    grid: Sequence[float],
    fit_for: Callable[[float, GroupedDataset], Sequence[np.ndarray]],
    n_folds: int,
    rng_seed: int,
    n_threads: int,
) -> CvCurve:
    grid = [float(v) for v in grid]
    if not grid:
        raise ConfigurationError("tuning grid is empty")
    folds = _column_folds(dataset, n_folds, rng_seed)

    def run(job):
        value, fold = job
        train = dataset.drop_columns(fold)
        held_out = dataset.select_columns(fold)
        if train.n == 0:
            raise ConfigurationError("cross-validation fold left an empty training split")
        return prediction_error(fit_for(value, train), held_out)

    jobs = [(value, fold) for value in grid for fold in folds]
    errors = np.asarray(map_groups(run, jobs, n_threads)).reshape(len(grid), len(folds))
    mean_error = errors.mean(axis=1)
    best_error = mean_error.min()
    # ties go to the largest value, the most regularized model
    tied = [v for v, e in zip(grid, mean_error) if e <= best_error * (1.0 + 1e-12)]
    return CvCurve(max(tied), grid, [float(e) for e in mean_error], errors.tolist())


def select_lambda(
    dataset: GroupedDataset,
    config_template: CscConfig,
    lambda_grid: Optional[Iterable[float]] = None,
    n_folds: int = Config.CV_FOLDS,
    rng_seed: int = 0,
    n_threads: int = 1,
) -> CvCurve:
    """K-fold (column-wise, within each group) choice of lam by held-out prediction error"""
    grid = list(lambda_grid) if lambda_grid is not None else default_lambda_grid(config_template.n_atoms, dataset.n)

    def fit_for(lam, train):
        model, _ = csc_fit(train, config_template.model_copy(update={"lam": lam}))
        return model.regression_matrices()

    curve = _cross_validate(dataset, grid, fit_for, n_folds, rng_seed, n_threads)
    logger.info("Selected lambda %.6g from %d candidates", curve.best, len(curve.grid))
    return curve


def select_radius(
    dataset: GroupedDataset,
    config_template: RrrConfig,
    radius_grid: Iterable[float],
    n_folds: int = Config.CV_FOLDS,
    rng_seed: int = 0,
    n_threads: int = 1,
) -> CvCurve:
    """Same harness for the baseline's nuclear-ball radius"""

    def fit_for(radius, train):
        return rrr_fit_all(train, config_template.model_copy(update={"radius": radius}))

    curve = _cross_validate(dataset, list(radius_grid), fit_for, n_folds, rng_seed, n_threads)
    logger.info("Selected radius %.6g from %d candidates", curve.best, len(curve.grid))
    return curve


def diagnostics_report(diag: FitDiagnostics) -> str:
    rows = []
    for t in range(diag.n_alternations):
        ranks = diag.rank_per_entry_per_alternation[t]
        rows.append([
            t + 1,
            diag.objective_per_alternation[t],
            float(np.mean(diag.l0_per_group_per_alternation[t])),
            float(np.mean(diag.l1_per_group_per_alternation[t])),
            float(np.mean(ranks)),
            max(ranks),
            " ".join(str(r) for r in ranks),
        ])
    table = tabulate(
        rows,
        headers=["alternation", "objective", "mean l0", "mean l1", "mean rank", "max rank", "entry ranks"],
        floatfmt=".6g",
    )
    if diag.sparsity_warning:
        verdict = "Sparsity warning: coefficient sparsity did not decrease; statistical accuracy may be poor"
    else:
        verdict = "Sparsity check passed: coefficient sparsity did not grow across alternations"
    return f"{table}\n\n{verdict}"


def run_benchmark(
    base_params: SimParams,
    n_values: Sequence[int],
    seeds: Sequence[int],
    csc_config: CscConfig,
    rrr_config: RrrConfig,
    lambda_grid: Optional[Sequence[float]] = None,
    n_folds: int = Config.CV_FOLDS,
) -> pd.DataFrame:
    """Simulate, fit CSC and the separate baseline, and tabulate both errors.

    When lambda_grid is given, lam is chosen per run by select_lambda. CSC rows
    also carry the mean l0 at the first and last alternation, the largest
    numerical rank among the learned entries and the sparsity warning; baseline
    rows carry the largest rank among the per-group estimates.
    """
    rows = []
    for n in n_values:
        for seed in seeds:
            params = base_params.model_copy(update={"n_train": int(n), "rng_seed": int(seed)})
            train, test, truth = gen_dataset(params)
            config = csc_config.model_copy(update={"rng_seed": int(seed)})
            if lambda_grid is not None:
                config = config.model_copy(
                    update={"lam": select_lambda(train, config, lambda_grid, n_folds, seed).best}
                )
            model, diag = csc_fit(train, config)
            estimates = {
                "csc": model.regression_matrices(),
                "rrr": _baseline_estimates(train, rrr_config, seed, n_folds),
            }
            l0 = diag.mean_l0()
            structure = {
                "csc": (l0[0], l0[-1], max(model.dictionary.ranks()), diag.sparsity_warning),
                "rrr": (float("nan"), float("nan"), max(numerical_rank(B) for B in estimates["rrr"]), None),
            }
            for method, B_hat in estimates.items():
                l0_first, l0_final, max_rank, sparsity_warning = structure[method]
                rows.append({
                    "scenario": params.scenario,
                    "n": int(n),
                    "seed": int(seed),
                    "method": method,
                    "lam": config.lam if method == "csc" else float("nan"),
                    "estimation_error": estimation_error(B_hat, truth.B_star),
                    "prediction_error": prediction_error(B_hat, test),
                    "l0_first": l0_first,
                    "l0_final": l0_final,
                    "max_rank": max_rank,
                    "sparsity_warning": sparsity_warning,
                })
            logger.info("Benchmark n=%d seed=%d done (%d alternations)", n, seed, diag.n_alternations)
    return pd.DataFrame(rows)


def _baseline_estimates(train: GroupedDataset, config: RrrConfig, seed: int, n_folds: int):
    if config.radius is not None or train.n >= train.p:
        try:
            return rrr_fit_all(train, config)
        except ConfigurationError:
            pass  # rank-deficient design, fall back to cross-validation
    # n < p: no least-squares default, tune the radius on a grid around the data scale
    scale = float(np.mean([np.linalg.norm(Y, "fro") / np.sqrt(train.n) for Y in train.Y]))
    grid = [scale * f for f in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)]
    radius = select_radius(train, config, grid, min(n_folds, train.n), seed).best
    return rrr_fit_all(train, config.model_copy(update={"radius": radius}))
