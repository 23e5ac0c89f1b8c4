"""Command-line driver: simulate -> fit -> evaluate pipelines with reproducible run records."""

import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import pandas as pd
from pydantic import ValidationError
from tabulate import tabulate

from baseline import RrrConfig, rrr_fit_all
from config import Config, configure_logging
from dataio import (
    RunRecord,
    load_dataset,
    load_ground_truth,
    load_model,
    load_regression_matrices,
    load_test_dataset,
    save_estimates,
    save_model,
    save_simulation,
    write_matrix,
    write_run_record,
)
from dictlearn import CscConfig, compose_B, csc_fit, csc_fit_subset
from encoder import encode_all
from evalkit import (
    compare_holdout,
    diagnostics_report,
    evaluate as evaluate_estimates,
    hold_two_out_cv,
    run_benchmark,
    select_lambda,
)
from exceptions import ConfigurationError, CscError, DataValidationError, NumericalError
from simulate import SimParams, gen_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _full(value) -> str:
    return repr(float(value))


def _finish(ctx: click.Context, out_dir, config: dict, seed, outputs) -> None:
    """Write run.json next to the command's outputs"""
    state = ctx.find_root().obj or {}
    record = RunRecord(
        command=state.get("argv", sys.argv[1:]),
        config=config,
        seed=seed,
        started_at=state.get("started_at", datetime.now(timezone.utc).isoformat()),
        wall_time_seconds=time.perf_counter() - state.get("t0", time.perf_counter()),
        outputs=[str(p) for p in outputs],
    )
    path = write_run_record(out_dir, record)
    logger.info("Run record written to %s", path)


def _holdout_table(reports) -> list[dict]:
    return [
        {
            "group": g,
            "acc_2v2": r.acc_2v2,
            "acc_1v2": r.acc_1v2,
            "mean_squared_error": r.mean_squared_error,
            "n_trials": r.n_trials,
            "n_failed": r.n_failed,
        }
        for g, r in enumerate(reports)
    ]


seed_option = click.option("--seed", type=int, default=0, show_default=True, help="Seed for all randomness.")
threads_option = click.option(
    "--threads", type=click.IntRange(min=1), default=Config.THREADS, show_default=True,
    help="Worker threads for the parallel modes (1 is bitwise reproducible).",
)
data_option = click.option(
    "--data", "data_path", type=click.Path(dir_okay=False),
    default=lambda: str(Path(Config.DATA_DIR) / Config.MANIFEST_NAME), show_default="$CSC_DATA_DIR/manifest.json",
    help="Dataset manifest.",
)


def out_option(subdir: str):
    """--out defaulting to a per-command directory under CSC_RUNS_DIR"""
    return click.option(
        "--out", "out_dir", type=click.Path(file_okay=False),
        default=lambda: str(Path(Config.RUNS_DIR) / subdir), show_default=f"$CSC_RUNS_DIR/{subdir}",
        help="Output directory.",
    )


@click.group()
@click.option("--log-level", default=None, help="error, warn, info or debug (default: CSC_LOG).")
@click.version_option(Config.VERSION)
@click.pass_context
def cli(ctx, log_level):
    """Conditional sparse coding: learn a shared low-rank dictionary across many regression groups."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj.setdefault("t0", time.perf_counter())
    ctx.obj.setdefault("started_at", datetime.now(timezone.utc).isoformat())


@cli.command()
@click.option("--scenario", type=click.Choice(["structured", "structured_same_design", "unstructured"]), default="structured", show_default=True)
@click.option("--p", type=int, default=Config.SIM_P, show_default=True)
@click.option("--q", type=int, default=None, help="Response dimension (defaults to p).")
@click.option("--g", "n_groups", type=int, default=Config.SIM_GROUPS, show_default=True)
@click.option("--n", "n_train", type=int, default=Config.SIM_N_TRAIN, show_default=True)
@click.option("--n-test", type=int, default=Config.SIM_N_TEST, show_default=True)
@click.option("--sigma", type=float, default=Config.SIM_SIGMA, show_default=True)
@click.option("--true-k", type=int, default=Config.SIM_TRUE_DICTIONARY_SIZE, show_default=True)
@click.option("--sparsity", type=int, default=Config.SIM_TRUE_SPARSITY, show_default=True)
@click.option("--rank", type=int, default=Config.SIM_TRUE_RANK, show_default=True)
@seed_option
@click.option(
    "--out", "out_dir", type=click.Path(file_okay=False), default=lambda: Config.DATA_DIR,
    show_default="$CSC_DATA_DIR", help="Output directory.",
)
@click.pass_context
def simulate(ctx, scenario, p, q, n_groups, n_train, n_test, sigma, true_k, sparsity, rank, seed, out_dir):
    """Generate a synthetic train/test pair with ground truth."""
    params = SimParams(
        scenario=scenario, p=p, q=q, n_groups=n_groups, n_train=n_train, n_test=n_test,
        noise_sigma=sigma, true_dictionary_size=true_k, true_sparsity=sparsity, true_rank=rank,
        rng_seed=seed,
    )
    train, test, truth = gen_dataset(params)
    manifest = save_simulation(train, test, truth, params, out_dir)
    click.echo(f"Wrote {manifest} (G={train.n_groups}, p={train.p}, q={train.q}, n={train.n})")
    _finish(ctx, out_dir, params.model_dump(mode="json"), seed, [manifest])


@cli.group()
def fit():
    """Fit CSC or the separate nuclear-norm baseline."""


@fit.command("csc")
@data_option
@click.option("--k", "n_atoms", type=int, default=20, show_default=True, help="Dictionary size.")
@click.option("--tau", type=float, default=1.0, show_default=True, help="Nuclear-norm bound per entry.")
@click.option("--lambda", "lam", type=float, default=0.05, show_default=True, help="l1 penalty.")
@click.option("--max-alternations", type=int, default=Config.MAX_ALTERNATIONS, show_default=True)
@click.option("--solver", type=click.Choice(["fista", "pgd"]), default="fista", show_default=True)
@click.option("--warm-start/--no-warm-start", default=True, show_default=True)
@click.option("--parallel-reduction", is_flag=True, help="Parallel gradient reduction (not bitwise reproducible).")
@click.option("--groups-subset", type=int, default=None, help="Learn the dictionary on M random groups.")
@seed_option
@threads_option
@out_option("csc")
@click.pass_context
def fit_csc(ctx, data_path, n_atoms, tau, lam, max_alternations, solver, warm_start, parallel_reduction,
            groups_subset, seed, threads, out_dir):
    """Learn a dictionary and per-group coefficients."""
    dataset = load_dataset(data_path)
    config = CscConfig(
        n_atoms=n_atoms, lam=lam, tau=tau, max_alternations=max_alternations, dict_solver=solver,
        warm_start=warm_start, parallel_reduction=parallel_reduction, rng_seed=seed, n_threads=threads,
    )
    if groups_subset is None:
        model, diagnostics = csc_fit(dataset, config)
    else:
        if not 1 <= groups_subset <= dataset.n_groups:
            raise ConfigurationError(f"--groups-subset must lie in [1, {dataset.n_groups}], got {groups_subset}")
        rng = np.random.default_rng(seed)
        groups = np.sort(rng.choice(dataset.n_groups, size=groups_subset, replace=False))
        model, diagnostics = csc_fit_subset(dataset, config, groups)

    manifest = save_model(model, diagnostics, out_dir)
    diagnostics_csv = Path(out_dir) / "diagnostics.csv"
    diagnostics.to_frame().to_csv(diagnostics_csv, index=False)
    click.echo(
        f"{diagnostics.n_alternations} alternations, final objective "
        f"{_full(diagnostics.objective_per_alternation[-1])}, converged={diagnostics.converged}"
    )
    if diagnostics.sparsity_warning:
        click.echo("Sparsity warning: coefficient sparsity did not decrease across alternations", err=True)
    _finish(ctx, out_dir, config.model_dump(mode="json"), seed, [manifest, diagnostics_csv])


@fit.command("rrr")
@data_option
@click.option("--radius", type=float, default=None, help="Nuclear-ball radius (default: ||B_ols||_* per group).")
@click.option("--max-iterations", type=int, default=Config.RRR_MAX_ITERATIONS, show_default=True)
@threads_option
@out_option("rrr")
@click.pass_context
def fit_rrr(ctx, data_path, radius, max_iterations, threads, out_dir):
    """Fit each group separately under a nuclear-norm constraint."""
    dataset = load_dataset(data_path)
    config = RrrConfig(radius=radius, max_iterations=max_iterations, n_threads=threads)
    estimates = rrr_fit_all(dataset, config)
    manifest = save_estimates(estimates, out_dir, config.model_dump(mode="json"))
    click.echo(f"Fitted {len(estimates)} groups")
    _finish(ctx, out_dir, config.model_dump(mode="json"), None, [manifest])


@cli.command()
@click.option("--model", "model_path", type=click.Path(), required=True, help="CSC model archive.")
@data_option
@click.option("--lambda", "lam", type=float, default=None, help="l1 penalty (default: the model's).")
@threads_option
@out_option("encode")
@click.pass_context
def encode(ctx, model_path, data_path, lam, threads, out_dir):
    """Encode new groups against a fixed, previously learned dictionary."""
    model, _ = load_model(model_path)
    dataset = load_dataset(data_path)
    lam = model.config.lam if lam is None else lam
    if lam < 0:
        raise ConfigurationError("--lambda must be non-negative")
    alphas = encode_all(
        model.dictionary, dataset, lam, model.config.encoder_tol, model.config.encoder_max_sweeps,
        n_threads=threads,
    )
    coefficients = write_matrix(alphas, Path(out_dir) / "coefficients.csv")
    manifest = save_estimates(
        [compose_B(model.dictionary, a) for a in alphas], out_dir, {"lam": lam, "model": str(model_path)}
    )
    click.echo(f"Encoded {dataset.n_groups} groups; mean l0 {_full(np.count_nonzero(alphas, axis=1).mean())}")
    _finish(ctx, out_dir, {"lam": lam, "model": str(model_path)}, None, [coefficients, manifest])


@cli.command()
@click.option("--model", "model_path", type=click.Path(), required=True, help="Model or estimates archive.")
@data_option
@click.option("--truth", is_flag=True, help="Report estimation error against the manifest's B_star.")
@click.option("--test", "test_path", type=click.Path(dir_okay=False), default=None,
              help="Test manifest (default: the one linked from --data).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Write per-group errors here.")
@click.pass_context
def evaluate(ctx, model_path, data_path, truth, test_path, out_dir):
    """Estimation and prediction error of fitted regression matrices."""
    B_hat = load_regression_matrices(model_path)
    test = load_dataset(test_path) if test_path is not None else load_test_dataset(data_path)
    if test is None:
        logger.warning("No test set linked from %s; reporting in-sample prediction error", data_path)
        test = load_dataset(data_path)

    B_star = None
    if truth:
        ground_truth = load_ground_truth(data_path)
        if ground_truth is None:
            raise DataValidationError(f"{data_path} carries no ground truth")
        B_star = ground_truth.B_star

    report = evaluate_estimates(B_hat, test, B_star)
    rows = [["prediction_error", _full(report.prediction_error)]]
    if report.estimation_error is not None:
        rows.insert(0, ["estimation_error", _full(report.estimation_error)])
    click.echo(tabulate(rows, headers=["metric", "value"], disable_numparse=True))

    if out_dir is not None:
        per_group = Path(out_dir) / "evaluation.csv"
        per_group.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({
            "group": range(len(report.per_group_prediction_error)),
            "prediction_error": report.per_group_prediction_error,
        }).to_csv(per_group, index=False)
        _finish(ctx, out_dir, {"model": str(model_path), "truth": truth}, None, [per_group])


@cli.command("cv-lambda")
@data_option
@click.option("--k", "n_atoms", type=int, default=20, show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True)
@click.option("--grid", type=float, multiple=True, help="Candidate lambdas (repeatable; default c*sqrt(log K / n)).")
@click.option("--folds", type=int, default=Config.CV_FOLDS, show_default=True)
@seed_option
@threads_option
@out_option("cv-lambda")
@click.pass_context
def cv_lambda(ctx, data_path, n_atoms, tau, grid, folds, seed, threads, out_dir):
    """Choose lambda by K-fold column-wise cross-validation."""
    dataset = load_dataset(data_path)
    template = CscConfig(n_atoms=n_atoms, tau=tau, rng_seed=seed)
    curve = select_lambda(dataset, template, list(grid) or None, folds, seed, threads)
    frame = curve.to_frame("lam")
    path = Path(out_dir) / "cv_lambda.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    click.echo(tabulate(frame.values.tolist(), headers=list(frame.columns), floatfmt=".17g"))
    click.echo(f"best lambda {_full(curve.best)}")
    _finish(ctx, out_dir, template.model_dump(mode="json") | {"folds": folds}, seed, [path])


@cli.command()
@data_option
@click.option("--method", type=click.Choice(["csc", "rrr", "both"]), default="both", show_default=True)
@click.option("--k", "n_atoms", type=int, default=20, show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.05, show_default=True)
@click.option("--radius", type=float, default=None, help="Baseline radius (required when n - 2 < p).")
@click.option("--trials", type=int, default=Config.HOLDOUT_TRIALS, show_default=True)
@click.option("--metric", type=click.Choice(["euclidean", "cosine_distance"]), default="euclidean", show_default=True)
@seed_option
@threads_option
@out_option("holdout2")
@click.pass_context
def holdout2(ctx, data_path, method, n_atoms, tau, lam, radius, trials, metric, seed, threads, out_dir):
    """Hold out two columns per trial and score 2v2 / 1v2 classification."""
    dataset = load_dataset(data_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csc_config = CscConfig(n_atoms=n_atoms, tau=tau, lam=lam, rng_seed=seed)
    rrr_config = RrrConfig(radius=radius)
    procedures = {}
    if method in ("csc", "both"):
        procedures["csc"] = lambda train: csc_fit(train, csc_config)[0].regression_matrices()
    if method in ("rrr", "both"):
        if radius is None and dataset.n - 2 < dataset.p:
            raise ConfigurationError("--radius is required when n - 2 < p")
        procedures["rrr"] = lambda train: rrr_fit_all(train, rrr_config)

    reports, outputs = {}, []
    for name, procedure in procedures.items():
        reports[name] = hold_two_out_cv(dataset, procedure, trials, metric, seed, threads)
        frame = pd.DataFrame(_holdout_table(reports[name]))
        path = out / f"holdout_{name}.csv"
        frame.to_csv(path, index=False)
        outputs.append(path)
        click.echo(
            f"{name}: mean 2v2 {_full(frame['acc_2v2'].mean())}, mean 1v2 {_full(frame['acc_1v2'].mean())}"
        )

    if len(reports) == 2:
        comparison = compare_holdout(reports["csc"], reports["rrr"])
        path = out / "holdout_comparison.csv"
        comparison.to_csv(path, index=False)
        outputs.append(path)
        click.echo(tabulate(comparison.values.tolist(), headers=list(comparison.columns), floatfmt=".4g"))

    config = {"method": method, "metric": metric, "trials": trials,
              "csc": csc_config.model_dump(mode="json"), "rrr": rrr_config.model_dump(mode="json")}
    _finish(ctx, out_dir, config, seed, outputs)


@cli.command()
@click.option("--model", "model_path", type=click.Path(), required=True)
def diagnose(model_path):
    """Print the per-alternation diagnostics of a CSC model archive."""
    _, diagnostics = load_model(model_path)
    if diagnostics is None:
        raise DataValidationError(f"{model_path} has no stored diagnostics")
    click.echo(diagnostics_report(diagnostics))


@cli.command()
@click.option("--scenario", type=click.Choice(["structured", "structured_same_design", "unstructured"]), default="structured", show_default=True)
@click.option("--p", type=int, default=Config.SIM_P, show_default=True)
@click.option("--g", "n_groups", type=int, default=Config.SIM_GROUPS, show_default=True)
@click.option("--n", "n_values", type=int, multiple=True, required=True, help="Training sizes (repeatable).")
@click.option("--n-test", type=int, default=Config.SIM_N_TEST, show_default=True)
@click.option("--sigma", type=float, default=Config.SIM_SIGMA, show_default=True)
@click.option("--repeats", type=int, default=1, show_default=True, help="Seeds seed, seed+1, ...")
@click.option("--k", "n_atoms", type=int, default=40, show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.05, show_default=True)
@click.option("--tune", is_flag=True, help="Choose lambda per run by cross-validation.")
@seed_option
@out_option("benchmark")
@click.pass_context
def benchmark(ctx, scenario, p, n_groups, n_values, n_test, sigma, repeats, n_atoms, tau, lam, tune, seed, out_dir):
    """Error-versus-n sweep comparing CSC with the separate baseline."""
    base = SimParams(scenario=scenario, p=p, n_groups=n_groups, n_test=n_test, noise_sigma=sigma)
    csc_config = CscConfig(n_atoms=n_atoms, tau=tau, lam=lam)
    seeds = [seed + r for r in range(repeats)]
    grid = None
    if tune:
        grid = [float(c * np.sqrt(np.log(n_atoms) / min(n_values))) for c in Config.LAMBDA_GRID_FACTORS]
    frame = run_benchmark(base, n_values, seeds, csc_config, RrrConfig(), grid)
    path = Path(out_dir) / "benchmark.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    columns = ["estimation_error", "prediction_error", "l0_final", "max_rank"]
    summary = frame.groupby(["n", "method"])[columns].mean().reset_index()
    click.echo(tabulate(summary.values.tolist(), headers=list(summary.columns), floatfmt=".6g"))
    config = {"base": base.model_dump(mode="json"), "csc": csc_config.model_dump(mode="json"), "tune": tune}
    _finish(ctx, out_dir, config, seed, [path])


def run_cli(argv=None) -> int:
    """Run one subcommand and map failures to exit codes"""
    argv = list(sys.argv[1:] if argv is None else argv)
    state = {"argv": argv, "t0": time.perf_counter(), "started_at": datetime.now(timezone.utc).isoformat()}
    try:
        result = cli.main(args=argv, prog_name="csc", standalone_mode=False, obj=state)
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        click.echo(f"Error: {e}", err=True)
        return EXIT_NUMERICAL
    except (CscError, ValidationError, ValueError) as e:
        logger.error("Invalid input: %s", e)
        click.echo(f"Error: {e}", err=True)
        return EXIT_VALIDATION
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(run_cli())
