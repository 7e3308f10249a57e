"""Experiment protocols: threshold prescriptions, method comparison and globality sweep"""
import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.base_learner import RegressionTree, fit_tree, predict_many
from src.calibration import DitherConfig, SolverOptions, calibrate, default_dither_u
from src.config import DEFAULT_LEVELS, GRID_A, GRID_K, N_JOBS, TREE_MAX_DEPTH, TREE_MIN_SAMPLES_LEAF
from src.core import FairnessSpec, GroupId, Grid, build_grid
from src.data import LabeledDataset, SplitConfig, SyntheticConfig, generate_synthetic, split
from src.errors import SpecValidationError
from src.metrics import EvaluationReport, evaluate, risk_mse
from src.utils import atomic_write_text, format_float, logger


class PrescriptionMode(str, Enum):
    GLOBAL = "global"
    TARGET = "target"
    EXPLICIT = "explicit"


class Prescription(BaseModel):
    mode: PrescriptionMode = PrescriptionMode.GLOBAL
    levels: Tuple[float, ...] = DEFAULT_LEVELS
    group: Optional[str] = None
    thresholds: Optional[Tuple[float, ...]] = None

    @model_validator(mode="after")
    def _check_mode(self):
        if self.mode is PrescriptionMode.TARGET and not self.group:
            raise ValueError("A target prescription names a group")
        if self.mode is PrescriptionMode.EXPLICIT:
            if self.thresholds is None or len(self.thresholds) != len(self.levels):
                raise ValueError("An explicit prescription carries one threshold per level")
        return self

    @classmethod
    def parse(cls, text: str, levels: Sequence[float] = DEFAULT_LEVELS) -> "Prescription":
        """'global' or 'target:<group>'."""
        text = text.strip()
        if text == "global":
            return cls(mode=PrescriptionMode.GLOBAL, levels=tuple(levels))
        if text.startswith("target:") and text[len("target:"):]:
            return cls(mode=PrescriptionMode.TARGET, levels=tuple(levels), group=text[len("target:"):])
        raise ValueError(f"Unknown prescription '{text}' (expected 'global' or 'target:<group>')")


def lower_quantiles(scores: np.ndarray, levels: Sequence[float]) -> np.ndarray:
    """Smallest score whose empirical CDF reaches each level."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise SpecValidationError("Cannot take quantiles of an empty score set")
    return np.quantile(scores, np.asarray(levels, dtype=float), method="inverted_cdf")


def _strict_thresholds(thresholds: np.ndarray) -> Tuple[float, ...]:
    if np.any(np.diff(thresholds) <= 0):
        raise SpecValidationError(
            f"Prescribed thresholds {thresholds.tolist()} are not strictly increasing; "
            f"dither the scores or use fewer levels"
        )
    return tuple(float(z) for z in thresholds)


def prescribe_thresholds(
    scores: np.ndarray,
    groups: Sequence[GroupId],
    prescription: Prescription,
) -> FairnessSpec:
    """(l, Z) spec whose thresholds are quantiles of the pooled or of one group's scores."""
    scores = np.asarray(scores, dtype=float)
    groups = np.asarray([str(g) for g in groups], dtype=object)
    if prescription.mode is PrescriptionMode.EXPLICIT:
        thresholds = np.asarray(prescription.thresholds, dtype=float)
    elif prescription.mode is PrescriptionMode.TARGET:
        members = scores[groups == prescription.group]
        if members.size == 0:
            raise SpecValidationError(f"Target group '{prescription.group}' has no calibration score")
        thresholds = lower_quantiles(members, prescription.levels)
    else:
        thresholds = lower_quantiles(scores, prescription.levels)
    return FairnessSpec.lz(prescription.levels, _strict_thresholds(thresholds))


class Method(str, Enum):
    UNCONSTRAINED = "unconstrained"
    LZ_FAIR = "lz_fair"
    Z_FAIR = "z_fair"
    Z_FAIR_RANGE = "z_fair_range"
    STRONG_DP = "strong_dp"


class ExperimentConfig(BaseModel):
    grid_a: float = Field(GRID_A, gt=0.0)
    grid_k: int = Field(GRID_K, ge=2)
    # None means the automatic rule for tree scores
    dither_u: Optional[float] = Field(None, ge=0.0)
    solver: SolverOptions = Field(default_factory=SolverOptions)
    min_samples_leaf: int = Field(TREE_MIN_SAMPLES_LEAF, ge=1)
    max_depth: Optional[int] = TREE_MAX_DEPTH
    tree_uses_groups: bool = True
    split: SplitConfig = Field(default_factory=SplitConfig)
    prescription: Prescription = Field(default_factory=Prescription)
    z_fair_m: int = Field(3, ge=1)
    range_levels: Tuple[float, float] = (0.25, 0.75)
    range_inner_m: int = Field(9, ge=1)
    n_jobs: int = Field(N_JOBS, ge=1)

    @property
    def grid(self) -> Grid:
        return build_grid(self.grid_a, self.grid_k)


class SweepPoint(BaseModel):
    method: Method
    descriptor: str
    detail: str
    seed: int
    report: EvaluationReport
    calibration_violation: Optional[float] = None
    converged: Optional[bool] = None


@dataclass
class _SeedContext:
    seed: int
    groups: Tuple[GroupId, ...]
    tree: RegressionTree
    calibration: LabeledDataset
    test: LabeledDataset
    calib_scores: np.ndarray
    test_scores: np.ndarray
    reference: FairnessSpec


def _prepare(dataset: LabeledDataset, seed: int, cfg: ExperimentConfig) -> _SeedContext:
    """Split, train the base tree and score the calibration and test parts."""
    split_cfg = cfg.split.model_copy(update={"seed": seed})
    train, calibration, test = split(dataset, split_cfg)
    tree = fit_tree(train, cfg.min_samples_leaf, cfg.max_depth, cfg.tree_uses_groups)
    calib_scores = predict_many(tree, calibration.features, calibration.groups, clip=cfg.grid_a)
    test_scores = predict_many(tree, test.features, test.groups, clip=cfg.grid_a)
    reference = prescribe_thresholds(calib_scores, calibration.groups, cfg.prescription)
    return _SeedContext(
        seed, dataset.group_labels, tree, calibration, test, calib_scores, test_scores, reference
    )


def method_spec(
    method: Method,
    context_scores: np.ndarray,
    reference: FairnessSpec,
    grid: Grid,
    cfg: ExperimentConfig,
    m: Optional[int] = None,
) -> Tuple[FairnessSpec, str, str]:
    """Spec, descriptor and detail label of one compared method."""
    if method in (Method.UNCONSTRAINED, Method.LZ_FAIR):
        return reference, method.value, f"M={len(reference.thresholds)}"
    if method is Method.Z_FAIR:
        m = m or cfg.z_fair_m
        levels = [k / (m + 1) for k in range(1, m + 1)]
        thresholds = _strict_thresholds(lower_quantiles(context_scores, levels))
        return FairnessSpec.zdp(thresholds), f"{method.value}:M={m:03d}", str(m)
    if method is Method.Z_FAIR_RANGE:
        borders = _strict_thresholds(lower_quantiles(context_scores, cfg.range_levels))
        spec = FairnessSpec.border(borders, cfg.range_levels, cfg.range_inner_m)
        return spec, method.value, f"range[{borders[0]:.4g},{borders[1]:.4g}]"
    # Interior grid points; the endpoint constraints hold trivially
    return FairnessSpec.zdp(grid.points[1:-1]), method.value, "full"


def _run_method(context: _SeedContext, method: Method, cfg: ExperimentConfig, m: Optional[int] = None) -> SweepPoint:
    grid = cfg.grid
    spec, descriptor, detail = method_spec(method, context.calib_scores, context.reference, grid, cfg, m)

    if method is Method.UNCONSTRAINED:
        report = evaluate(context.test_scores, context.test_scores, context.test.groups, spec,
                          context.test.targets, context.groups)
        return SweepPoint(method=method, descriptor=descriptor, detail=detail, seed=context.seed, report=report)

    u = cfg.dither_u if cfg.dither_u is not None else default_dither_u(cfg.grid_a, atomic_scores=True)
    predictor, trace = calibrate(
        context.calib_scores,
        context.calibration.groups,
        grid,
        spec,
        cfg.solver,
        DitherConfig(u=u, seed=context.seed),
        declared_groups=context.groups,
    )
    fair = predictor.predict_many(context.test_scores, context.test.groups)
    report = evaluate(fair, context.test_scores, context.test.groups, spec, context.test.targets, context.groups)
    return SweepPoint(
        method=method,
        descriptor=descriptor,
        detail=detail,
        seed=context.seed,
        report=report,
        calibration_violation=predictor.provenance.final_violation,
        converged=trace.converged,
    )


def run_cell(
    dataset: LabeledDataset, method: Method, seed: int, cfg: ExperimentConfig, m: Optional[int] = None
) -> SweepPoint:
    return _run_method(_prepare(dataset, seed, cfg), method, cfg, m)


Source = Union[LabeledDataset, SyntheticConfig]
MethodCell = Tuple[Method, Optional[int]]


def _dataset_for(source: Source, seed: int) -> LabeledDataset:
    if isinstance(source, SyntheticConfig):
        return generate_synthetic(source.model_copy(update={"seed": seed}))
    return source


def _run_cells(
    source: Source,
    cells: Sequence[MethodCell],
    seeds: Sequence[int],
    cfg: ExperimentConfig,
    on_point: Optional[Callable[[SweepPoint], None]] = None,
) -> List[SweepPoint]:
    """One job per seed; each job owns its dataset, split and RNG streams."""

    def run_seed(seed: int) -> List[SweepPoint]:
        logger.info(f"[Protocol] seed {seed}")
        context = _prepare(_dataset_for(source, seed), seed, cfg)
        return [_run_method(context, method, cfg, m) for method, m in cells]

    points: List[SweepPoint] = []
    with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
        # map yields in seed order; finished seeds are flushed before an error propagates
        for seed_points in pool.map(run_seed, seeds):
            for point in seed_points:
                points.append(point)
                if on_point is not None:
                    on_point(point)
    return sorted(points, key=lambda p: (p.descriptor, p.seed))


def run_protocol(
    source: Source,
    methods: Sequence[Method],
    seeds: Sequence[int],
    cfg: Optional[ExperimentConfig] = None,
    on_point: Optional[Callable[[SweepPoint], None]] = None,
) -> List[SweepPoint]:
    """Every method on every seed: split, train, dither and calibrate, evaluate on test."""
    cfg = cfg or ExperimentConfig()
    logger.section(f"PROTOCOL: {[m.value for m in methods]} x {len(seeds)} seed(s)")
    return _run_cells(source, [(method, None) for method in methods], seeds, cfg, on_point)


def sweep_globality(
    synthetic: SyntheticConfig,
    m_values: Sequence[int],
    seeds: Sequence[int],
    cfg: Optional[ExperimentConfig] = None,
    on_point: Optional[Callable[[SweepPoint], None]] = None,
) -> List[SweepPoint]:
    """Z-fair at each M plus full-grid strong DP, for the fairness/accuracy trade-off."""
    cfg = cfg or ExperimentConfig()
    if any(m < 1 or m > cfg.grid_k - 2 for m in m_values):
        raise SpecValidationError(f"M values must lie in [1, {cfg.grid_k - 2}], got {list(m_values)}")
    logger.section(f"GLOBALITY SWEEP: M in {list(m_values)} + full grid, {len(seeds)} seed(s)")
    cells: List[MethodCell] = [(Method.Z_FAIR, m) for m in m_values] + [(Method.STRONG_DP, None)]
    return _run_cells(synthetic, cells, seeds, cfg, on_point)


def discretization_gap(
    synthetic: SyntheticConfig,
    k_values: Sequence[int],
    seeds: Sequence[int],
    cfg: Optional[ExperimentConfig] = None,
) -> Dict[int, float]:
    """Mean test risk of the (l, Z)-fair predictor minus the base model's risk, per grid size."""
    cfg = cfg or ExperimentConfig()
    gaps: Dict[int, List[float]] = {k: [] for k in k_values}
    for seed in seeds:
        # the grid only enters calibration, so one context serves every K
        context = _prepare(_dataset_for(synthetic, seed), seed, cfg)
        base_risk = risk_mse(context.test_scores, context.test.targets)
        for k in k_values:
            point = _run_method(context, Method.LZ_FAIR, cfg.model_copy(update={"grid_k": k}))
            gaps[k].append(point.report.risk_mse - base_risk)
    return {k: float(np.mean(values)) for k, values in gaps.items()}


def _mean_sd(values: List[float]) -> Tuple[float, float]:
    array = np.asarray(values, dtype=float)
    sd = float(np.std(array, ddof=1)) if array.size > 1 else 0.0
    return float(np.mean(array)), sd


def aggregate(points: Sequence[SweepPoint]) -> List[Dict]:
    """One row per descriptor: mean and standard deviation across seeds."""
    rows = []
    for descriptor in sorted({p.descriptor for p in points}):
        group = [p for p in points if p.descriptor == descriptor]
        row: Dict = {
            "descriptor": descriptor,
            "method": group[0].method.value,
            "detail": group[0].detail,
            "n_seeds": len(group),
        }
        for name, values in (
            ("rmse_price", [p.report.rmse_price for p in group]),
            ("unfairness", [p.report.unfairness for p in group]),
            ("ks", [p.report.ks for p in group]),
            ("risk_mse", [p.report.risk_mse for p in group if p.report.risk_mse is not None]),
        ):
            if values:
                row[f"{name}_mean"], row[f"{name}_sd"] = _mean_sd(values)
        rows.append(row)
    return rows


SWEEP_CSV_FIELDS = ["variant", "M_or_range", "seed", "rmse_price", "U", "ks", "risk_mse"]


def sweep_csv_row(point: SweepPoint) -> Dict[str, str]:
    return {
        "variant": point.method.value,
        "M_or_range": point.detail,
        "seed": str(point.seed),
        "rmse_price": format_float(point.report.rmse_price),
        "U": format_float(point.report.unfairness),
        "ks": format_float(point.report.ks),
        "risk_mse": "" if point.report.risk_mse is None else format_float(point.report.risk_mse),
    }


def sweep_csv_text(points: Sequence[SweepPoint]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=SWEEP_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(sweep_csv_row(p) for p in points)
    return buffer.getvalue()


def write_sweep_csv(points: Sequence[SweepPoint], path: Path):
    atomic_write_text(Path(path), sweep_csv_text(points))


def write_summary_json(points: Sequence[SweepPoint], path: Path):
    summary = {"rows": aggregate(points), "points": [p.model_dump(mode="json") for p in points]}
    atomic_write_text(Path(path), json.dumps(summary, indent=2, sort_keys=True))
