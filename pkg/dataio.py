"""Persistence: CSV matrices, JSON dataset manifests, model archives and run records.

Matrices are UTF-8 CSV, one row per line, comma separated, no header, LF line
endings. Values are written with Python's shortest round-trip repr, so a
write followed by a read reproduces every float bitwise.
"""

import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveInt, ValidationError

from config import Config
from dictlearn import CscConfig, CscModel, Dictionary, FitDiagnostics
from exceptions import (
    ArchiveVersionError,
    DataValidationError,
    MissingArtifactError,
    NonFiniteError,
    ParseError,
)
from simulate import GroundTruth, GroupedDataset

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_matrix(M, path: PathLike) -> Path:
    A = np.asarray(M, dtype=float)
    if A.ndim != 2:
        raise DataValidationError(f"only 2-d matrices can be written, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteError(f"refusing to write NaN or Inf entries to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(repr(float(v)) for v in row) for row in A]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def read_matrix(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "matrix file")
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    # a single trailing newline is part of the format
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(path, 1, "empty file")

    rows = []
    width = None
    for number, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        if not line.strip():
            raise ParseError(path, number, "blank line")
        tokens = line.split(",")
        if width is None:
            width = len(tokens)
        elif len(tokens) != width:
            raise ParseError(path, number, f"row has {len(tokens)} values, expected {width}")
        row = []
        for token in tokens:
            try:
                value = float(token)
            except ValueError:
                raise ParseError(path, number, f"non-numeric token {token.strip()!r}") from None
            if not np.isfinite(value):
                raise ParseError(path, number, f"non-finite value {token.strip()!r}")
            row.append(value)
        rows.append(row)
    return np.array(rows, dtype=float)


def _write_json(data: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
    return path


def _read_json(path: Path, what: str) -> dict:
    if not path.exists():
        raise MissingArtifactError(path, what)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path}: invalid JSON ({e})") from e


def _check_version(data: dict, path: Path) -> None:
    version = data.get("format_version")
    if version != Config.FORMAT_VERSION:
        raise ArchiveVersionError(
            f"{path}: format_version {version!r} is not supported (expected {Config.FORMAT_VERSION!r})"
        )


def _validated(model_cls, data: dict, path: Path):
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise DataValidationError(f"{path}: {e}") from e


# Datasets


class GroupFiles(BaseModel):
    x: str
    y: str
    b_star: Optional[str] = None


class DatasetManifest(BaseModel):
    format_version: str = Config.FORMAT_VERSION
    p: PositiveInt
    q: PositiveInt
    n: PositiveInt
    G: PositiveInt
    groups: list[GroupFiles]
    true_dictionary: Optional[list[str]] = None
    true_supports: Optional[str] = None
    provenance: Any = None
    test_manifest: Optional[str] = None


def save_dataset(
    dataset: GroupedDataset,
    out_dir: PathLike,
    ground_truth: Optional[GroundTruth] = None,
    provenance: Any = None,
    manifest_name: str = Config.MANIFEST_NAME,
    prefix: str = "",
    test_manifest: Optional[str] = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = []
    for g, (X, Y) in enumerate(dataset):
        entry = GroupFiles(x=f"{prefix}X_{g:03d}.csv", y=f"{prefix}Y_{g:03d}.csv")
        write_matrix(X, out_dir / entry.x)
        write_matrix(Y, out_dir / entry.y)
        if ground_truth is not None:
            entry.b_star = f"B_star_{g:03d}.csv"
            write_matrix(ground_truth.B_star[g], out_dir / entry.b_star)
        groups.append(entry)

    true_dictionary = true_supports = None
    if ground_truth is not None and ground_truth.true_dictionary is not None:
        true_dictionary = []
        for k, atom in enumerate(ground_truth.true_dictionary):
            name = f"true_D_{k:03d}.csv"
            write_matrix(atom, out_dir / name)
            true_dictionary.append(name)
        true_supports = "true_supports.csv"
        write_matrix(ground_truth.true_supports, out_dir / true_supports)

    manifest = DatasetManifest(
        p=dataset.p, q=dataset.q, n=dataset.n, G=dataset.n_groups,
        groups=groups,
        true_dictionary=true_dictionary,
        true_supports=true_supports,
        provenance=provenance,
        test_manifest=test_manifest,
    )
    path = _write_json(manifest.model_dump(mode="json"), out_dir / manifest_name)
    logger.info("Wrote dataset manifest %s (G=%d)", path, dataset.n_groups)
    return path


def save_simulation(train, test, truth: GroundTruth, params, out_dir: PathLike) -> Path:
    """Train manifest (with ground truth) plus a linked test manifest"""
    provenance = {"source": "simulation", "params": params.model_dump(mode="json")}
    save_dataset(test, out_dir, truth, provenance, Config.TEST_MANIFEST_NAME, prefix="test_")
    return save_dataset(
        train, out_dir, truth, provenance, Config.MANIFEST_NAME, test_manifest=Config.TEST_MANIFEST_NAME
    )


def load_manifest(manifest_path: PathLike) -> DatasetManifest:
    path = Path(manifest_path)
    data = _read_json(path, "dataset manifest")
    _check_version(data, path)
    manifest = _validated(DatasetManifest, data, path)
    if len(manifest.groups) != manifest.G:
        raise DataValidationError(f"{path}: declares G={manifest.G} but lists {len(manifest.groups)} groups")
    return manifest


def _read_shaped(path: Path, shape: tuple, what: str) -> np.ndarray:
    A = read_matrix(path)
    if A.shape != shape:
        raise DataValidationError(f"{what}: {path.name} has shape {A.shape}, manifest declares {shape}")
    return A


def load_dataset(manifest_path: PathLike) -> GroupedDataset:
    path = Path(manifest_path)
    manifest = load_manifest(path)
    base = path.parent
    Xs, Ys = [], []
    for g, entry in enumerate(manifest.groups):
        Xs.append(_read_shaped(base / entry.x, (manifest.p, manifest.n), f"group {g} X"))
        Ys.append(_read_shaped(base / entry.y, (manifest.q, manifest.n), f"group {g} Y"))
    return GroupedDataset(np.stack(Xs), np.stack(Ys))


def load_ground_truth(manifest_path: PathLike) -> Optional[GroundTruth]:
    path = Path(manifest_path)
    manifest = load_manifest(path)
    base = path.parent
    if any(entry.b_star is None for entry in manifest.groups):
        return None
    B_star = np.stack([
        _read_shaped(base / entry.b_star, (manifest.q, manifest.p), f"group {g} B_star")
        for g, entry in enumerate(manifest.groups)
    ])
    true_dictionary = true_supports = None
    if manifest.true_dictionary:
        true_dictionary = np.stack([
            _read_shaped(base / name, (manifest.q, manifest.p), f"true dictionary entry {k}")
            for k, name in enumerate(manifest.true_dictionary)
        ])
    if manifest.true_supports:
        true_supports = read_matrix(base / manifest.true_supports).astype(int)
    return GroundTruth(B_star, true_dictionary, true_supports)


def load_test_dataset(manifest_path: PathLike) -> Optional[GroupedDataset]:
    path = Path(manifest_path)
    manifest = load_manifest(path)
    if manifest.test_manifest is None:
        return None
    return load_dataset(path.parent / manifest.test_manifest)


# Models


class ModelArchive(BaseModel):
    format_version: str = Config.FORMAT_VERSION
    kind: Literal["csc"] = "csc"
    config: dict
    tau: float
    n_atoms: PositiveInt
    n_groups: PositiveInt
    p: PositiveInt
    q: PositiveInt
    dictionary_files: list[str]
    coefficients_file: str
    diagnostics: Optional[dict] = None


class EstimatesArchive(BaseModel):
    format_version: str = Config.FORMAT_VERSION
    kind: Literal["rrr"] = "rrr"
    config: dict = Field(default_factory=dict)
    n_groups: PositiveInt
    p: PositiveInt
    q: PositiveInt
    estimate_files: list[str]


def save_model(model: CscModel, diagnostics: Optional[FitDiagnostics], path: PathLike) -> Path:
    """Write model.json plus one CSV per dictionary entry and a (G, K) coefficient CSV"""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    q, p = model.dictionary.shape
    files = []
    for k, atom in enumerate(model.dictionary.atoms):
        name = f"dictionary_{k:03d}.csv"
        write_matrix(atom, out_dir / name)
        files.append(name)
    write_matrix(model.coefficients, out_dir / "coefficients.csv")
    archive = ModelArchive(
        config=model.config.model_dump(mode="json"),
        tau=model.dictionary.tau,
        n_atoms=model.dictionary.n_atoms,
        n_groups=model.n_groups,
        p=p, q=q,
        dictionary_files=files,
        coefficients_file="coefficients.csv",
        diagnostics=diagnostics.to_dict() if diagnostics is not None else None,
    )
    manifest = _write_json(archive.model_dump(mode="json"), out_dir / Config.MODEL_NAME)
    logger.info("Saved model archive %s (K=%d, G=%d)", manifest, model.dictionary.n_atoms, model.n_groups)
    return manifest


def _archive_path(path: PathLike, name: str) -> Path:
    path = Path(path)
    return path / name if path.is_dir() else path


def load_model(path: PathLike) -> tuple[CscModel, Optional[FitDiagnostics]]:
    manifest = _archive_path(path, Config.MODEL_NAME)
    data = _read_json(manifest, "model archive")
    _check_version(data, manifest)
    archive = _validated(ModelArchive, data, manifest)
    base = manifest.parent
    if len(archive.dictionary_files) != archive.n_atoms:
        raise DataValidationError(
            f"{manifest}: declares K={archive.n_atoms} but lists {len(archive.dictionary_files)} entries"
        )
    atoms = np.stack([
        _read_shaped(base / name, (archive.q, archive.p), f"dictionary entry {k}")
        for k, name in enumerate(archive.dictionary_files)
    ])
    coefficients = _read_shaped(
        base / archive.coefficients_file, (archive.n_groups, archive.n_atoms), "coefficients"
    )
    model = CscModel(Dictionary(atoms, archive.tau), coefficients, CscConfig.model_validate(archive.config))
    diagnostics = FitDiagnostics.from_dict(archive.diagnostics) if archive.diagnostics is not None else None
    return model, diagnostics


def save_estimates(estimates, path: PathLike, config: Optional[dict] = None) -> Path:
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    estimates = [np.asarray(B, dtype=float) for B in estimates]
    files = []
    for g, B in enumerate(estimates):
        name = f"B_hat_{g:03d}.csv"
        write_matrix(B, out_dir / name)
        files.append(name)
    q, p = estimates[0].shape
    archive = EstimatesArchive(config=config or {}, n_groups=len(estimates), p=p, q=q, estimate_files=files)
    return _write_json(archive.model_dump(mode="json"), out_dir / Config.ESTIMATES_NAME)


def load_estimates(path: PathLike) -> np.ndarray:
    manifest = _archive_path(path, Config.ESTIMATES_NAME)
    data = _read_json(manifest, "estimates archive")
    _check_version(data, manifest)
    archive = _validated(EstimatesArchive, data, manifest)
    return np.stack([
        _read_shaped(manifest.parent / name, (archive.q, archive.p), f"group {g} estimate")
        for g, name in enumerate(archive.estimate_files)
    ])


def load_regression_matrices(path: PathLike) -> np.ndarray:
    """(G, q, p) estimates from either a CSC model archive or a baseline archive"""
    path = Path(path)
    if (path / Config.MODEL_NAME).exists() or path.name == Config.MODEL_NAME:
        model, _ = load_model(path)
        return model.regression_matrices()
    if (path / Config.ESTIMATES_NAME).exists() or path.name == Config.ESTIMATES_NAME:
        return load_estimates(path)
    raise MissingArtifactError(path, "model or estimates archive")


# Run records


class RunRecord(BaseModel):
    command: list[str]
    config: dict = Field(default_factory=dict)
    seed: Optional[int] = None
    started_at: str
    wall_time_seconds: float
    outputs: list[str] = Field(default_factory=list)
    library_version: str = Config.VERSION


def write_run_record(out_dir: PathLike, record: RunRecord) -> Path:
    return _write_json(record.model_dump(mode="json"), Path(out_dir) / Config.RUN_RECORD_NAME)
