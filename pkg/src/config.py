"""Configuration for the fair calibration toolkit"""
import os
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _optional_float(name: str) -> Optional[float]:
    raw = os.getenv(name, "").strip()
    return float(raw) if raw else None


def _optional_int(name: str) -> Optional[int]:
    raw = os.getenv(name, "").strip()
    return int(raw) if raw else None


# Base paths
BASE_DIR = Path(__file__).parent.parent
DATA_DIR = BASE_DIR / "data"
OUTPUTS_DIR = Path(os.getenv("OUTPUTS_DIR", str(BASE_DIR / "outputs")))

# Randomness
FAIRCAL_SEED = int(os.getenv("FAIRCAL_SEED", "0"))
DEFAULT_SEEDS = int(os.getenv("DEFAULT_SEEDS", "10"))

# Output grid Y_K on [-A, A]
GRID_A = float(os.getenv("GRID_A", "100"))
GRID_K = int(os.getenv("GRID_K", "201"))

# Dithering (None = automatic rule, see calibration.default_dither_u)
DITHER_U = _optional_float("DITHER_U")

# Dual solver
SOLVER_MAX_ITERS = int(os.getenv("SOLVER_MAX_ITERS", "2000"))
SOLVER_C0 = float(os.getenv("SOLVER_C0", "1.0"))
SOLVER_TOL = float(os.getenv("SOLVER_TOL", "0.01"))

# Base learner
TREE_MIN_SAMPLES_LEAF = int(os.getenv("TREE_MIN_SAMPLES_LEAF", "20"))
TREE_MAX_DEPTH = _optional_int("TREE_MAX_DEPTH")

# Parallelism (chunked reductions and experiment cells)
N_JOBS = int(os.getenv("N_JOBS", "1"))

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LOG_FILE", "").strip() or None

# Synthetic experiment defaults
SYNTH_N = int(os.getenv("SYNTH_N", "4000"))
DEFAULT_LEVELS = (0.25, 0.5, 0.75)


def validate_config():
    """Check value ranges and create the output directory"""
    if GRID_A <= 0:
        raise ValueError(f"GRID_A must be positive, got {GRID_A}")
    if GRID_K < 2:
        raise ValueError(f"GRID_K must be at least 2, got {GRID_K}")
    if DITHER_U is not None and DITHER_U < 0:
        raise ValueError(f"DITHER_U must be nonnegative, got {DITHER_U}")
    if SOLVER_MAX_ITERS < 1 or SOLVER_C0 <= 0 or SOLVER_TOL <= 0:
        raise ValueError("SOLVER_MAX_ITERS >= 1, SOLVER_C0 > 0 and SOLVER_TOL > 0 are required")
    if TREE_MIN_SAMPLES_LEAF < 1:
        raise ValueError(f"TREE_MIN_SAMPLES_LEAF must be >= 1, got {TREE_MIN_SAMPLES_LEAF}")
    if N_JOBS < 1:
        raise ValueError(f"N_JOBS must be >= 1, got {N_JOBS}")

    OUTPUTS_DIR.mkdir(parents=True, exist_ok=True)

    return True
