import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from dataio import (
    load_dataset,
    load_estimates,
    load_ground_truth,
    load_model,
    load_regression_matrices,
    load_test_dataset,
    read_matrix,
    save_dataset,
    save_estimates,
    save_model,
    save_simulation,
    write_matrix,
)
from dictlearn import CscConfig, csc_fit
from exceptions import ArchiveVersionError, DataValidationError, MissingArtifactError, NonFiniteError, ParseError
from simulate import SimParams, gen_dataset


@pytest.fixture
def simulation():
    params = SimParams(p=4, q=3, n_groups=3, n_train=9, n_test=6, true_dictionary_size=5, true_sparsity=2, rng_seed=8)
    return params, gen_dataset(params)


def test_read_simple_matrix(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("1,2\n3,4\n")
    assert_array_equal(read_matrix(path), [[1.0, 2.0], [3.0, 4.0]])


def test_round_trip_is_bitwise(tmp_path):
    M = np.random.default_rng(0).standard_normal((5, 7))
    M[0, 0] = -0.0
    M[1, 1] = 1e-300
    path = write_matrix(M, tmp_path / "m.csv")
    loaded = read_matrix(path)
    assert loaded.tobytes() == M.tobytes()


def test_ragged_rows_name_the_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("1,2\n3,4,5\n")
    with pytest.raises(ParseError) as info:
        read_matrix(path)
    assert info.value.line == 2
    assert "line 2" in str(info.value)


@pytest.mark.parametrize("text,line", [("1,x\n", 1), ("", 1), ("1,2\n\n3,4\n", 2), ("1,nan\n", 1)])
def test_malformed_files(tmp_path, text, line):
    path = tmp_path / "m.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        read_matrix(path)
    assert info.value.line == line


def test_write_rejects_non_finite(tmp_path):
    with pytest.raises(NonFiniteError):
        write_matrix(np.array([[np.inf]]), tmp_path / "m.csv")


def test_missing_matrix(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_matrix(tmp_path / "absent.csv")


def test_dataset_round_trip(tmp_path, simulation):
    params, (train, test, truth) = simulation
    manifest = save_simulation(train, test, truth, params, tmp_path)
    loaded = load_dataset(manifest)
    assert_array_equal(loaded.X, train.X)
    assert_array_equal(loaded.Y, train.Y)
    assert_array_equal(load_test_dataset(manifest).Y, test.Y)
    loaded_truth = load_ground_truth(manifest)
    assert_array_equal(loaded_truth.B_star, truth.B_star)
    assert_array_equal(loaded_truth.true_dictionary, truth.true_dictionary)
    assert_array_equal(loaded_truth.true_supports, truth.true_supports)
    provenance = json.loads(manifest.read_text())["provenance"]
    assert provenance["params"]["rng_seed"] == 8


def test_dataset_without_truth(tmp_path, simulation):
    _, (train, _, _) = simulation
    manifest = save_dataset(train, tmp_path)
    assert load_ground_truth(manifest) is None
    assert load_test_dataset(manifest) is None


def test_manifest_shape_mismatch_names_group(tmp_path, simulation):
    _, (train, _, _) = simulation
    manifest = save_dataset(train, tmp_path)
    data = json.loads(manifest.read_text())
    data["p"] = 5
    manifest.write_text(json.dumps(data))
    with pytest.raises(DataValidationError, match="group 0"):
        load_dataset(manifest)


def test_manifest_group_count_mismatch(tmp_path, simulation):
    _, (train, _, _) = simulation
    manifest = save_dataset(train, tmp_path)
    data = json.loads(manifest.read_text())
    data["G"] = 4
    manifest.write_text(json.dumps(data))
    with pytest.raises(DataValidationError):
        load_dataset(manifest)


def test_manifest_version(tmp_path, simulation):
    _, (train, _, _) = simulation
    manifest = save_dataset(train, tmp_path)
    data = json.loads(manifest.read_text())
    data["format_version"] = "2"
    manifest.write_text(json.dumps(data))
    with pytest.raises(ArchiveVersionError):
        load_dataset(manifest)


def test_model_round_trip_is_bitwise(tmp_path, simulation):
    _, (train, _, _) = simulation
    model, diagnostics = csc_fit(train, CscConfig(n_atoms=3, max_alternations=4, rng_seed=2))
    save_model(model, diagnostics, tmp_path)
    loaded, loaded_diagnostics = load_model(tmp_path)
    assert loaded.dictionary.atoms.tobytes() == model.dictionary.atoms.tobytes()
    assert loaded.coefficients.tobytes() == model.coefficients.tobytes()
    assert loaded.config == model.config
    assert loaded.dictionary.tau == model.dictionary.tau
    assert loaded_diagnostics == diagnostics
    assert_array_equal(load_regression_matrices(tmp_path), model.regression_matrices())


def test_model_missing_dictionary_file(tmp_path, simulation):
    _, (train, _, _) = simulation
    model, diagnostics = csc_fit(train, CscConfig(n_atoms=3, max_alternations=2))
    save_model(model, diagnostics, tmp_path)
    (tmp_path / "dictionary_001.csv").unlink()
    with pytest.raises(MissingArtifactError, match="dictionary_001"):
        load_model(tmp_path)


def test_model_version(tmp_path, simulation):
    _, (train, _, _) = simulation
    model, diagnostics = csc_fit(train, CscConfig(n_atoms=3, max_alternations=2))
    manifest = save_model(model, diagnostics, tmp_path)
    data = json.loads(manifest.read_text())
    data["format_version"] = "0"
    manifest.write_text(json.dumps(data))
    with pytest.raises(ArchiveVersionError):
        load_model(manifest)


def test_estimates_round_trip(tmp_path):
    estimates = np.random.default_rng(1).standard_normal((2, 3, 4))
    save_estimates(estimates, tmp_path, {"radius": 1.5})
    assert load_estimates(tmp_path).tobytes() == estimates.tobytes()
    assert load_regression_matrices(tmp_path).shape == (2, 3, 4)


def test_regression_matrices_need_an_archive(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_regression_matrices(tmp_path)
