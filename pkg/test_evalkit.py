import warnings

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from baseline import RrrConfig
from dictlearn import CscConfig, FitDiagnostics, csc_fit
from evalkit import (
    classify_pair,
    compare_holdout,
    default_lambda_grid,
    diagnostics_report,
    estimation_error,
    evaluate,
    hold_two_out_cv,
    paired_sign_test,
    prediction_error,
    run_benchmark,
    select_lambda,
    select_radius,
    TrialRecord,
)
from exceptions import ConfigurationError, ConvergenceWarning, DimensionError, UndefinedMetricError
from simulate import GroupedDataset, SimParams, gen_dataset


@pytest.fixture
def noiseless():
    return gen_dataset(SimParams(p=5, n_groups=3, n_train=12, n_test=20, true_dictionary_size=6, noise_sigma=0.0, rng_seed=5))


def test_estimation_error():
    B = np.random.default_rng(0).standard_normal((3, 2, 2))
    assert estimation_error(B, B) == 0.0
    diff = np.zeros((1, 3, 3))
    diff[0, 0, 0], diff[0, 1, 1] = 3.0, 4.0
    assert estimation_error(np.zeros((1, 3, 3)), diff) == pytest.approx(5.0)
    other = np.random.default_rng(1).standard_normal((3, 2, 2))
    order = [2, 0, 1]
    assert estimation_error(B[order], other[order]) == pytest.approx(estimation_error(B, other))
    with pytest.raises(DimensionError):
        estimation_error(B, other[:2])


def test_prediction_error():
    assert prediction_error([[[2.0]]], GroupedDataset(np.array([[[1.0]]]), np.array([[[3.0]]]))) == pytest.approx(1.0)
    rng = np.random.default_rng(2)
    test = GroupedDataset(rng.standard_normal((2, 3, 7)), rng.standard_normal((2, 2, 7)))
    energy = np.mean([np.sum(Y ** 2) / 7 for Y in test.Y])
    assert prediction_error(np.zeros((2, 2, 3)), test) == pytest.approx(energy)


def test_evaluate_with_truth(noiseless):
    _, test, truth = noiseless
    report = evaluate(truth.B_star, test, truth.B_star)
    assert report.estimation_error == 0.0
    assert report.prediction_error == pytest.approx(0.0, abs=1e-20)
    assert len(report.per_group_prediction_error) == 3
    assert evaluate(truth.B_star, test).estimation_error is None


def test_classify_pair_basic_cases():
    y1, y2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert classify_pair(y1, y2, y1, y2) == (True, True)
    assert classify_pair(y1, y2, y2, y1) == (False, False)
    # identical distances tie and count as incorrect
    assert classify_pair(y1, y2, np.zeros(2), np.zeros(2)) == (False, False)
    assert classify_pair(y1, y2, 2.0 * y1, 3.0 * y2, metric="cosine_distance") == (True, True)


def test_cosine_distance_zero_vector():
    with pytest.raises(UndefinedMetricError):
        classify_pair(np.ones(2), np.ones(2), np.zeros(2), np.ones(2), metric="cosine_distance")


def test_one_vs_two_implies_two_vs_two():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        y1, y2, yhat1, yhat2 = rng.standard_normal((4, 3))
        c2, c1 = classify_pair(y1, y2, yhat1, yhat2)
        assert c2 or not c1


@pytest.mark.parametrize("metric", ["euclidean", "cosine_distance"])
def test_random_prediction_baselines(metric):
    rng = np.random.default_rng(4)
    n = 10000
    y = rng.standard_normal((n, 2, 10))
    yhat = rng.standard_normal((n, 2, 10))
    # equal-norm predictions carry no information through their length
    yhat /= np.linalg.norm(yhat, axis=2, keepdims=True)
    outcomes = np.array([classify_pair(y[i, 0], y[i, 1], yhat[i, 0], yhat[i, 1], metric) for i in range(n)])
    assert outcomes[:, 0].mean() == pytest.approx(0.5, abs=0.03)
    assert outcomes[:, 1].mean() == pytest.approx(0.25, abs=0.03)


def test_holdout_with_perfect_predictor(noiseless):
    train, _, truth = noiseless
    reports = hold_two_out_cv(train, lambda _: truth.B_star, n_trials=60, rng_seed=1)
    assert len(reports) == train.n_groups
    for report in reports:
        assert report.acc_2v2 == 1.0
        assert report.acc_1v2 == 1.0
        assert report.n_trials == 60
        assert len(report.trials) == 60
        assert report.n_failed == 0
        assert report.mean_squared_error == pytest.approx(0.0, abs=1e-20)


def test_holdout_holds_out_same_columns_in_every_group(noiseless):
    train, _, truth = noiseless
    seen = []

    def fit(reduced):
        assert reduced.n == train.n - 2
        seen.append(reduced)
        return truth.B_star

    reports = hold_two_out_cv(train, fit, n_trials=5, rng_seed=2)
    for t, reduced in enumerate(seen):
        pair = reports[0].trials[t].columns
        assert all(report.trials[t].columns == pair for report in reports)
        keep = [c for c in range(train.n) if c not in pair]
        np.testing.assert_array_equal(reduced.X, train.X[:, :, keep])


def test_holdout_records_failures(noiseless):
    train, _, truth = noiseless
    calls = []

    def flaky(reduced):
        calls.append(1)
        if len(calls) % 2 == 0:
            raise ConfigurationError("boom")
        return truth.B_star

    reports = hold_two_out_cv(train, flaky, n_trials=10)
    assert reports[0].n_failed == 5
    assert reports[0].n_trials == 10
    assert reports[0].acc_2v2 == 1.0


def test_holdout_needs_three_columns():
    dataset = GroupedDataset(np.ones((1, 2, 2)), np.ones((1, 1, 2)))
    with pytest.raises(ConfigurationError):
        hold_two_out_cv(dataset, lambda d: [np.zeros((1, 2))])


def test_paired_sign_test():
    good = [TrialRecord((0, 1), True, True, 0.1) for _ in range(20)]
    bad = [TrialRecord((0, 1), False, False, 1.0) for _ in range(20)]
    assert paired_sign_test(good, bad) == pytest.approx(2 * 0.5 ** 20)
    assert paired_sign_test(good, bad, "squared_error") == pytest.approx(2 * 0.5 ** 20)
    assert paired_sign_test(good, good) == 1.0
    with pytest.raises(DimensionError):
        paired_sign_test(good, bad[:3])


def test_compare_holdout(noiseless):
    train, _, truth = noiseless
    perfect = hold_two_out_cv(train, lambda _: truth.B_star, n_trials=8)
    zero = hold_two_out_cv(train, lambda _: np.zeros_like(truth.B_star), n_trials=8)
    frame = compare_holdout(perfect, zero)
    assert isinstance(frame, pd.DataFrame)
    assert len(frame) == train.n_groups
    assert (frame.delta_2v2 == 1.0).all()
    assert (frame.p_2v2 < 0.01).all()


def test_default_lambda_grid():
    anchor = np.sqrt(np.log(20) / 40)
    assert_allclose(default_lambda_grid(20, 40), [c * anchor for c in (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0)])
    assert default_lambda_grid(1, 40) == [0.0]


def test_select_lambda_single_value(noiseless):
    train, _, _ = noiseless
    curve = select_lambda(train, CscConfig(n_atoms=3, max_alternations=3), [0.2], n_folds=3)
    assert curve.best == 0.2
    assert np.array(curve.fold_errors).shape == (1, 3)
    assert list(curve.to_frame().columns) == ["lam", "mean_prediction_error"]


def test_select_lambda_rejects_bad_folds(noiseless):
    train, _, _ = noiseless
    with pytest.raises(ConfigurationError):
        select_lambda(train, CscConfig(n_atoms=3), [0.1], n_folds=1)
    with pytest.raises(ConfigurationError):
        select_lambda(train, CscConfig(n_atoms=3), [0.1], n_folds=train.n + 1)


def test_select_radius_prefers_truth_scale(noiseless):
    train, _, _ = noiseless
    curve = select_radius(train, RrrConfig(), [1e-6, 100.0], n_folds=3)
    assert curve.best == 100.0


def test_diagnostics_report():
    diagnostics = FitDiagnostics()
    diagnostics.record(1.0, np.array([[1.0, 0.0]]), [1, 1], 0.0)
    text = diagnostics_report(diagnostics)
    assert "alternation" in text
    assert "passed" in text
    diagnostics.record(0.9, np.array([[1.0, 1.0]]), [1, 1], 0.0)
    assert "warning" in diagnostics_report(diagnostics).lower()


def test_run_benchmark_tiny():
    base = SimParams(p=4, n_groups=4, n_test=20, true_dictionary_size=5, true_sparsity=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        frame = run_benchmark(base, [10], [0], CscConfig(n_atoms=4, max_alternations=5), RrrConfig())
    assert list(frame.method) == ["csc", "rrr"]
    assert set(frame.columns) >= {
        "scenario", "n", "seed", "method", "lam", "estimation_error", "prediction_error",
        "l0_first", "l0_final", "max_rank", "sparsity_warning",
    }
    assert np.all(np.isfinite(frame.estimation_error))
    csc = frame[frame.method == "csc"].iloc[0]
    assert 0 <= csc.l0_final <= 4
    assert 0 <= csc.max_rank <= 4
    assert csc.sparsity_warning in (True, False)


@pytest.mark.slow
def test_csc_beats_zero_estimator():
    train, test, truth = gen_dataset(SimParams(rng_seed=7))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model, diagnostics = csc_fit(train, CscConfig(n_atoms=40, lam=0.05, tau=1.0, rng_seed=7))
    B_hat = model.regression_matrices()
    assert estimation_error(B_hat, truth.B_star) < estimation_error(np.zeros_like(B_hat), truth.B_star)
    assert prediction_error(B_hat, test) < prediction_error(np.zeros_like(B_hat), test)
    assert diagnostics.mean_l0()[-1] <= diagnostics.mean_l0()[0]


@pytest.mark.parametrize("metric", ["euclidean", "cosine_distance"])
def test_classify_pair_symmetric_under_swap(metric):
    rng = np.random.default_rng(20)
    for _ in range(200):
        y1, y2, yhat1, yhat2 = rng.standard_normal((4, 6))
        assert classify_pair(y1, y2, yhat1, yhat2, metric) == classify_pair(y2, y1, yhat2, yhat1, metric)


def test_errors_invariant_under_group_reordering(noiseless):
    _, test, truth = noiseless
    rng = np.random.default_rng(21)
    B_hat = truth.B_star + 0.1 * rng.standard_normal(truth.B_star.shape)
    order = rng.permutation(test.n_groups)
    shuffled = GroupedDataset(test.X[order], test.Y[order])
    assert estimation_error(B_hat[order], truth.B_star[order]) == pytest.approx(estimation_error(B_hat, truth.B_star))
    assert prediction_error(B_hat[order], shuffled) == pytest.approx(prediction_error(B_hat, test))


def test_select_lambda_deterministic_given_seed(noiseless):
    train, _, _ = noiseless
    config = CscConfig(n_atoms=3, max_alternations=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        first = select_lambda(train, config, [0.01, 0.1, 1.0], n_folds=3, rng_seed=4)
        second = select_lambda(train, config, [0.01, 0.1, 1.0], n_folds=3, rng_seed=4)
    assert first.best == second.best
    assert first.fold_errors == second.fold_errors


@pytest.mark.slow
def test_csc_outperforms_separate_regressions_on_structured_data():
    base = SimParams(p=20, n_groups=50, true_dictionary_size=30, true_sparsity=3, noise_sigma=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        frame = run_benchmark(
            base, [40], [0, 1, 2], CscConfig(n_atoms=40, tau=1.0, lam=0.05, max_alternations=60), RrrConfig()
        )
    csc = frame[frame.method == "csc"].set_index("seed")
    rrr = frame[frame.method == "rrr"].set_index("seed")
    assert np.all(csc.estimation_error < rrr.estimation_error)
    assert np.all(csc.prediction_error < rrr.prediction_error)
    # coefficients become sparser across alternations
    assert np.all(csc.l0_final < csc.l0_first)
    assert not csc.sparsity_warning.any()
