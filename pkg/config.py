import logging
import os

import coloredlogs
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class Config:
    VERSION = "1.0.0"

    # Logging: error, warn, info or debug
    LOG_LEVEL = os.getenv("CSC_LOG", "warn")

    # Worker threads for the opt-in parallel modes (1 keeps runs bitwise reproducible)
    THREADS = int(os.getenv("CSC_THREADS", "1"))

    DATA_DIR = os.getenv("CSC_DATA_DIR", "data")
    RUNS_DIR = os.getenv("CSC_RUNS_DIR", "runs")

    # Archive formats
    FORMAT_VERSION = "1"
    MANIFEST_NAME = "manifest.json"
    TEST_MANIFEST_NAME = "test_manifest.json"
    MODEL_NAME = "model.json"
    ESTIMATES_NAME = "estimates.json"
    RUN_RECORD_NAME = "run.json"

    # Linear algebra
    RANK_RTOL = 1e-6  # numerical rank threshold, relative to the top singular value
    PROJECTION_TOL = 1e-10  # bisection tolerance on the capped-simplex sum
    PROJECTION_MAX_BISECTIONS = 200
    POWER_ITERATIONS = 20
    POWER_TOL = 1e-6

    # Encoding step (lasso coordinate descent)
    ENCODER_TOL = 1e-8
    ENCODER_MAX_SWEEPS = 1000

    # Learning step (monotone FISTA)
    DICT_MAX_INNER_ITERATIONS = 50
    STATIONARITY_TOL = 1e-8
    MIN_STEP_SIZE = 1e-16

    # Alternation
    OBJECTIVE_RTOL = 1e-6
    MAX_ALTERNATIONS = 200

    # Baseline
    RRR_MAX_ITERATIONS = 500
    RRR_RTOL = 1e-6

    # Cross-validation: default lambda grid is c * sqrt(log K / n)
    LAMBDA_GRID_FACTORS = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0)
    CV_FOLDS = 5
    HOLDOUT_TRIALS = 60

    # Simulation defaults
    SIM_P = 20
    SIM_GROUPS = 50
    SIM_N_TRAIN = 40
    SIM_N_TEST = 1000
    SIM_SIGMA = 0.1
    SIM_TRUE_DICTIONARY_SIZE = 30
    SIM_TRUE_SPARSITY = 3
    SIM_TRUE_RANK = 3

    LOG_LEVELS = {
        "error": logging.ERROR,
        "warn": logging.WARNING,
        "warning": logging.WARNING,
        "info": logging.INFO,
        "debug": logging.DEBUG,
    }


def configure_logging(level: str | None = None) -> None:
    """Install coloured console logging at the CSC_LOG level"""
    name = (level or Config.LOG_LEVEL).lower()
    if name not in Config.LOG_LEVELS:
        raise ValueError(
            f"Unknown log level {name!r}. Allowed: {', '.join(sorted(Config.LOG_LEVELS))}"
        )
    coloredlogs.install(
        level=Config.LOG_LEVELS[name],
        fmt="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
