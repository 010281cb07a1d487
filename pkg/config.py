from __future__ import annotations

from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent

DATA_DIR = BASE_DIR / "data"

# Default output directory for experiment artifacts (created on first write)
OUTPUTS_DIR = BASE_DIR / "outputs"

# Numerical defaults
DEFAULT_RATE_CAP = 1e3
DEFAULT_DAMPING = 0.5
DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITERATIONS = 200
DEFAULT_RESTARTS = 16
EXACT_NORM_MAX_N = 14
NEWTON_TOLERANCE = 1e-10
NEWTON_MAX_ITERATIONS = 200
SIMPLEX_TOLERANCE = 1e-6
MONOTONE_TOLERANCE = 1e-10
DEFAULT_BLOCK_SIZE = 1024
DEFAULT_THREADS = 1

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
