"""Shared fixtures for the test-suite"""
import sys
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.calibration import CalibrationSet, DitherConfig, FairPredictor, Provenance
from src.core import DualParams, FairnessSpec, Grid, build_grid


@pytest.fixture
def unit_grid() -> Grid:
    """A=1, K=5: points -1, -0.5, 0, 0.5, 1."""
    return build_grid(1.0, 5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def shifted_calibration(rng) -> CalibrationSet:
    """Two groups whose score laws are shifted against each other."""
    scores = np.concatenate([rng.uniform(-0.8, 0.2, 60), rng.uniform(-0.2, 0.8, 40)])
    groups = ["A"] * 60 + ["B"] * 40
    return CalibrationSet.from_scores(scores, groups)


def make_predictor(
    grid: Grid,
    spec: FairnessSpec,
    groups: Sequence[str],
    matrix,
    weights: Dict[str, float],
) -> FairPredictor:
    dual = DualParams(tuple(groups), np.asarray(matrix, dtype=float), spec.n_level_columns)
    provenance = Provenance(
        iterations=0,
        best_iteration=0,
        final_violation=0.0,
        final_objective=0.0,
        converged=True,
        seed=0,
        n_calibration=0,
        step_scale=1.0,
    )
    return FairPredictor(grid, spec, dual, dict(weights), DitherConfig(), provenance)


def write_text(path: Path, lines: Sequence[str]) -> Path:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
