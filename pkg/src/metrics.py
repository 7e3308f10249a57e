"""Evaluation metrics: constraint violation, KS distance, price of fairness, risk"""
import itertools
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import ks_2samp

from src.core import FairnessSpec, GroupId, Grid, snap_many, sorted_groups
from src.errors import EmptyGroupError, SpecValidationError
from src.utils import format_float


class EvaluationReport(BaseModel):
    kind: str = "evaluation_report"
    variant: str
    rmse_price: float = Field(ge=0.0)
    unfairness: float = Field(ge=0.0)
    violations: List[List[float]]
    groups: List[str]
    thresholds: List[float]
    ks: float = Field(ge=0.0, le=1.0)
    risk_mse: Optional[float] = Field(None, ge=0.0)
    counts: Dict[str, int]


def _as_groups(groups: Sequence[GroupId]) -> np.ndarray:
    return np.asarray([str(g) for g in groups], dtype=object)


def group_cdf(values: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Right-continuous empirical CDF, count(values <= z) / n, at every threshold."""
    ordered = np.sort(np.asarray(values, dtype=float))
    return np.searchsorted(ordered, thresholds, side="right") / ordered.size


def violation_matrix(
    values: np.ndarray,
    groups: Sequence[GroupId],
    spec: FairnessSpec,
    group_labels: Optional[Sequence[GroupId]] = None,
) -> np.ndarray:
    """|P_s(f <= z_m) - target_m| per (group, constraint).

    Level columns target l_m; parity columns target the pooled CDF at z_m.
    """
    values = np.asarray(values, dtype=float)
    groups = _as_groups(groups)
    labels = tuple(group_labels) if group_labels is not None else sorted_groups(groups)
    thresholds = spec.constraint_thresholds

    targets = spec.targets.copy()
    if values.size:
        targets[spec.n_level_columns:] = group_cdf(values, thresholds)[spec.n_level_columns:]

    matrix = np.empty((len(labels), thresholds.size))
    for row, label in enumerate(labels):
        members = values[groups == label]
        if members.size == 0:
            raise EmptyGroupError(f"Group '{label}' has no prediction")
        matrix[row] = np.abs(group_cdf(members, thresholds) - targets)
    return matrix


def unfairness(
    values: np.ndarray,
    groups: Sequence[GroupId],
    spec: FairnessSpec,
    group_labels: Optional[Sequence[GroupId]] = None,
) -> Tuple[np.ndarray, float]:
    """Violation matrix and its maximum U."""
    matrix = violation_matrix(values, groups, spec, group_labels)
    return matrix, float(matrix.max())


def ks_statistic(values: np.ndarray, groups: Sequence[GroupId]) -> float:
    """Largest sup-distance between group CDFs over all pairs of groups."""
    values = np.asarray(values, dtype=float)
    groups = _as_groups(groups)
    labels = sorted_groups(groups)
    if len(labels) < 2:
        raise EmptyGroupError(f"KS needs at least two groups, got {list(labels)}")
    samples = {label: values[groups == label] for label in labels}
    return max(
        float(ks_2samp(samples[a], samples[b], method="asymp").statistic)
        for a, b in itertools.combinations(labels, 2)
    )


def _check_aligned(first: np.ndarray, second: np.ndarray, what: str):
    if first.shape != second.shape:
        raise SpecValidationError(f"{what}: got {first.size} and {second.size} values")


def rmse_price(fair: np.ndarray, base: np.ndarray) -> float:
    """Root mean squared distance between post-processed and base predictions."""
    fair = np.asarray(fair, dtype=float)
    base = np.asarray(base, dtype=float)
    _check_aligned(fair, base, "rmse_price")
    if fair.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(np.square(fair - base))))


def risk_mse(predictions: np.ndarray, targets: np.ndarray) -> float:
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    _check_aligned(predictions, targets, "risk_mse")
    return float(np.mean(np.square(predictions - targets)))


def quantization_risk_gap(scores: np.ndarray, grid: Grid) -> float:
    """Mean squared error of snapping scores to the grid; at most (A / (K - 1))^2."""
    scores = np.asarray(scores, dtype=float)
    return float(np.mean(np.square(snap_many(scores, grid) - scores)))


def evaluate(
    fair: np.ndarray,
    base: np.ndarray,
    groups: Sequence[GroupId],
    spec: FairnessSpec,
    targets: Optional[np.ndarray] = None,
    group_labels: Optional[Sequence[GroupId]] = None,
) -> EvaluationReport:
    fair = np.asarray(fair, dtype=float)
    groups = _as_groups(groups)
    labels = tuple(group_labels) if group_labels is not None else sorted_groups(groups)
    matrix, worst = unfairness(fair, groups, spec, labels)
    return EvaluationReport(
        variant=spec.variant.value,
        rmse_price=rmse_price(fair, base),
        unfairness=worst,
        violations=matrix.tolist(),
        groups=list(labels),
        thresholds=spec.constraint_thresholds.tolist(),
        ks=ks_statistic(fair, groups),
        risk_mse=None if targets is None else risk_mse(fair, targets),
        counts={label: int(np.sum(groups == label)) for label in labels},
    )


REPORT_CSV_FIELDS = ["variant", "rmse_price", "unfairness", "ks", "risk_mse"]


def report_csv_row(report: EvaluationReport) -> Dict[str, str]:
    return {
        "variant": report.variant,
        "rmse_price": format_float(report.rmse_price),
        "unfairness": format_float(report.unfairness),
        "ks": format_float(report.ks),
        "risk_mse": "" if report.risk_mse is None else format_float(report.risk_mse),
    }
