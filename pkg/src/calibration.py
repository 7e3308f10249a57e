"""Dual calibration of regression scores under (l, Z), Z-DP and border Z-DP constraints

The empirical dual objective is

    H(lambda) = sum_s (1/N_s) sum_{i in I_s} max_y [ -pi_s (y - f_i)^2 - <lambda_s, a(y) - t> ]

where a(y) stacks 1{y <= z_m} over all constraint thresholds and t holds the
target level of level columns (0 for parity columns). H is convex in lambda;
it is minimized by projected subgradient descent and the minimizer defines the
calibrated predictor argmin_y { pi_s (y - f)^2 + <lambda_s, a(y)> } on the grid.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src.config import N_JOBS, SOLVER_C0, SOLVER_MAX_ITERS, SOLVER_TOL
from src.core import (
    DualParams,
    FairnessSpec,
    GroupId,
    Grid,
    Variant,
    build_grid,
    indicator_matrix,
    indicator_vector,
    sorted_groups,
)
from src.errors import EmptyGroupError, SchemaVersionError, SpecValidationError, UnknownGroupError
from src.metrics import violation_matrix
from src.utils import atomic_write_text, chunk_slices, exact_sum, logger, ordered_map, seed_stream

PREDICTOR_SCHEMA_VERSION = 1


class DitherConfig(BaseModel):
    u: float = Field(0.0, ge=0.0)
    seed: int = 0
    at_prediction: bool = False


class SolverOptions(BaseModel):
    max_iters: int = Field(SOLVER_MAX_ITERS, ge=1)
    c0: float = Field(SOLVER_C0, gt=0.0)
    tol: float = Field(SOLVER_TOL, gt=0.0)
    # None means A times the grid spacing
    step_scale: Optional[float] = Field(None, gt=0.0)
    track_best: bool = True
    n_jobs: int = Field(N_JOBS, ge=1)


class Provenance(BaseModel):
    iterations: int
    best_iteration: int
    final_violation: float
    final_objective: float
    converged: bool
    seed: int
    n_calibration: int
    step_scale: float


def default_dither_u(A: float, atomic_scores: bool) -> float:
    """Tree outputs have atoms and get a tiny dither; external scores get none."""
    return 1e-6 * 2.0 * A if atomic_scores else 0.0


def dither_scores(scores: np.ndarray, cfg: DitherConfig, A: float, rng: np.random.Generator) -> np.ndarray:
    """clip(score + xi, -A, A) with xi ~ U[0, u]; u = 0 is the identity and draws nothing."""
    scores = np.asarray(scores, dtype=float)
    if cfg.u == 0.0:
        return scores.copy()
    noise = rng.uniform(0.0, cfg.u, size=scores.shape)
    return np.clip(scores + noise, -A, A)


def dither(score: float, cfg: DitherConfig, A: float, rng: np.random.Generator) -> float:
    return float(dither_scores(np.array([score]), cfg, A, rng)[0])


def group_weights(
    groups: Sequence[GroupId],
    declared: Optional[Sequence[GroupId]] = None,
) -> Tuple[Dict[GroupId, int], Dict[GroupId, float]]:
    """Counts N_s and weights pi_s = N_s / N."""
    groups = np.asarray([str(g) for g in groups], dtype=object)
    if groups.size == 0:
        raise EmptyGroupError("No calibration samples")
    labels = sorted_groups(groups, declared)
    counts = {label: int(np.sum(groups == label)) for label in labels}
    empty = [label for label, count in counts.items() if count == 0]
    if empty:
        raise EmptyGroupError(f"Declared group(s) {empty} have no calibration sample")
    total = len(groups)
    return counts, {label: count / total for label, count in counts.items()}


@dataclass(frozen=True)
class CalibrationSet:
    """Dithered, clipped scores of the unlabeled sample with their groups."""

    scores: np.ndarray
    groups: np.ndarray
    group_labels: Tuple[GroupId, ...]
    counts: Dict[GroupId, int] = field(repr=False)
    weights: Dict[GroupId, float] = field(repr=False)
    index_sets: Dict[GroupId, np.ndarray] = field(repr=False)

    @classmethod
    def from_scores(
        cls,
        scores: np.ndarray,
        groups: Sequence[GroupId],
        declared_groups: Optional[Sequence[GroupId]] = None,
    ) -> "CalibrationSet":
        scores = np.asarray(scores, dtype=float)
        groups = np.asarray([str(g) for g in groups], dtype=object)
        if scores.shape != groups.shape:
            raise SpecValidationError(f"Got {scores.size} scores for {groups.size} groups")
        if not np.all(np.isfinite(scores)):
            raise SpecValidationError("Calibration scores must be finite")
        counts, weights = group_weights(groups, declared_groups)
        labels = tuple(counts)
        index_sets = {label: np.flatnonzero(groups == label) for label in labels}
        return cls(scores, groups, labels, counts, weights, index_sets)

    def __len__(self) -> int:
        return self.scores.size


@dataclass
class _Evaluation:
    objective: float
    argmin: np.ndarray
    subgradient: np.ndarray


def _penalties(dual: DualParams, indicators: np.ndarray) -> np.ndarray:
    """penalty[s, k] = <lambda_s, a(y_k)>."""
    return dual.matrix @ indicators.T.astype(float)


def _grid_argmin(scores: np.ndarray, weight: float, penalty: np.ndarray, points: np.ndarray):
    """Per-score minimizer of weight (y - f)^2 + penalty(y); first index wins ties (smallest y)."""
    costs = weight * np.square(points[None, :] - scores[:, None]) + penalty[None, :]
    idx = np.argmin(costs, axis=1)
    return idx, costs[np.arange(scores.size), idx]


class _DualProblem:

    def __init__(self, calib: CalibrationSet, grid: Grid, spec: FairnessSpec, n_jobs: int = 1):
        self.calib = calib
        self.grid = grid
        self.spec = spec
        self.n_jobs = n_jobs
        self.indicators = indicator_matrix(grid.points, spec.constraint_thresholds)
        self.targets = spec.targets
        self.chunks = [
            (row, label, positions[piece])
            for row, label in enumerate(calib.group_labels)
            for positions in [calib.index_sets[label]]
            for piece in chunk_slices(positions.size)
        ]

    def evaluate(self, dual: DualParams) -> _Evaluation:
        dual.check_compatible(self.calib.group_labels, self.spec)
        penalties = _penalties(dual, self.indicators)
        argmin = np.empty(len(self.calib), dtype=int)

        def run_chunk(chunk):
            row, label, positions = chunk
            idx, mins = _grid_argmin(
                self.calib.scores[positions], self.calib.weights[label], penalties[row], self.grid.points
            )
            argmin[positions] = idx
            return float(np.sum(mins))

        partials = ordered_map(run_chunk, self.chunks, self.n_jobs)

        objective_terms = []
        subgradient = np.empty_like(dual.matrix)
        for row, label in enumerate(self.calib.group_labels):
            n_s = self.calib.counts[label]
            group_partials = [p for (r, _, _), p in zip(self.chunks, partials) if r == row]
            objective_terms.append(-exact_sum(group_partials) / n_s)
            objective_terms.append(float(dual.matrix[row] @ self.targets))

            hits = np.bincount(argmin[self.calib.index_sets[label]], minlength=self.grid.K)
            below = hits @ self.indicators.astype(int)
            subgradient[row] = self.targets - below / n_s

        return _Evaluation(exact_sum(objective_terms), argmin, subgradient)


def dual_score(
    dual: DualParams,
    score: float,
    group: GroupId,
    y: float,
    spec: FairnessSpec,
    weights: Dict[GroupId, float],
) -> float:
    """Phi_{s,lambda}(y) = -pi_s (y - f)^2 - <lambda_s, a(y) - t>."""
    lam = dual.row(group)
    a = indicator_vector(y, spec.constraint_thresholds)
    return float(-weights[group] * (y - score) ** 2 - lam @ (a - spec.targets))


def dual_objective(dual: DualParams, calib: CalibrationSet, grid: Grid, spec: FairnessSpec, n_jobs: int = 1) -> float:
    return _DualProblem(calib, grid, spec, n_jobs).evaluate(dual).objective


def dual_subgradient(
    dual: DualParams, calib: CalibrationSet, grid: Grid, spec: FairnessSpec, n_jobs: int = 1
) -> np.ndarray:
    """g[s, m] = t_m - P_s(y* <= z_m), unprojected."""
    return _DualProblem(calib, grid, spec, n_jobs).evaluate(dual).subgradient


def _center_exactly(column: np.ndarray) -> np.ndarray:
    """column - mean(column), rounded onto a power-of-two lattice so the entries sum to exactly 0.

    The lattice step is a few ulps of the largest entry; lattice multiples add up
    without rounding, so the last entry can absorb the residual exactly.
    """
    n = column.size
    centered = column - math.fsum(column) / n
    scale = float(np.max(np.abs(centered)))
    if scale == 0.0:
        return centered
    step = math.ldexp(1.0, math.frexp(scale)[1] - 51 + math.ceil(math.log2(n)))
    if step == 0.0:
        return centered
    lattice = np.round(centered / step) * step
    lattice[-1] = -math.fsum(lattice[:-1])
    return lattice


def project_delta(dual: DualParams) -> DualParams:
    """Euclidean projection of the parity columns onto zero sums across groups.

    Columns that already sum to exactly zero are left untouched, and every
    projected column sums to exactly zero, so projecting twice changes nothing.
    """
    matrix = np.array(dual.matrix, dtype=float)
    for j in range(dual.n_level_columns, matrix.shape[1]):
        if math.fsum(matrix[:, j]) != 0.0:
            matrix[:, j] = _center_exactly(matrix[:, j])
    return dual.with_matrix(matrix)


@dataclass
class SolverTrace:
    objectives: List[float] = field(default_factory=list)
    violations: List[float] = field(default_factory=list)
    best_iteration: int = 0
    converged: bool = False
    # set by calibrate: the dithered sample the multipliers were fitted on
    calibration: Optional[CalibrationSet] = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return len(self.objectives)

    def summary(self) -> Dict:
        return {
            "iterations": self.iterations,
            "best_iteration": self.best_iteration,
            "converged": self.converged,
            "initial_objective": self.objectives[0] if self.objectives else None,
            "final_objective": self.objectives[self.best_iteration - 1] if self.objectives else None,
            "min_objective": min(self.objectives) if self.objectives else None,
            "initial_violation": self.violations[0] if self.violations else None,
            "final_violation": self.violations[self.best_iteration - 1] if self.violations else None,
        }


def solve_dual(
    calib: CalibrationSet,
    grid: Grid,
    spec: FairnessSpec,
    opts: Optional[SolverOptions] = None,
) -> Tuple[DualParams, SolverTrace]:
    """Projected subgradient descent from lambda = 0 with step c0 * scale / sqrt(t).

    Returns the iterate with the smallest empirical constraint violation and
    stops as soon as the violation drops to ``opts.tol``.
    """
    opts = opts or SolverOptions()
    problem = _DualProblem(calib, grid, spec, opts.n_jobs)
    scale = opts.step_scale or grid.A * grid.spacing
    logger.debug(f"[Solver] step = {opts.c0} * {scale:.6g} / sqrt(t)")

    dual = DualParams.zeros(calib.group_labels, spec)
    best_dual, best_violation = dual, math.inf
    trace = SolverTrace()

    for t in range(1, opts.max_iters + 1):
        evaluation = problem.evaluate(dual)
        predictions = grid.points[evaluation.argmin]
        _, violation = _violation(predictions, calib, spec)
        trace.objectives.append(evaluation.objective)
        trace.violations.append(violation)

        if violation < best_violation or not opts.track_best:
            best_dual, best_violation, trace.best_iteration = dual, violation, t
        if violation <= opts.tol:
            trace.converged = True
            break
        if t % 100 == 0:
            logger.debug(f"[Solver] iter {t}: objective {evaluation.objective:.6f}, violation {violation:.4f}")
        if t == opts.max_iters:
            break

        step = opts.c0 * scale / math.sqrt(t)
        dual = project_delta(dual.with_matrix(dual.matrix - step * evaluation.subgradient))

    if trace.converged:
        logger.info(f"[Solver] converged at iteration {trace.iterations} (violation {best_violation:.4f})")
    else:
        logger.warning(
            f"[Solver] no convergence after {trace.iterations} iteration(s); "
            f"best violation {best_violation:.4f} > tol {opts.tol}"
        )
    return best_dual, trace


def _violation(values: np.ndarray, calib: CalibrationSet, spec: FairnessSpec) -> Tuple[np.ndarray, float]:
    matrix = violation_matrix(values, calib.groups, spec, calib.group_labels)
    return matrix, float(matrix.max())


@dataclass(frozen=True)
class FairPredictor:
    grid: Grid
    spec: FairnessSpec
    dual: DualParams
    weights: Dict[GroupId, float]
    dither: DitherConfig
    provenance: Provenance

    @property
    def groups(self) -> Tuple[GroupId, ...]:
        return self.dual.groups

    def _check_groups(self, groups: np.ndarray):
        unknown = sorted(set(groups.tolist()) - set(self.groups))
        if unknown:
            raise UnknownGroupError(f"Unknown group(s) {unknown}; calibrated groups are {list(self.groups)}")

    def predict_many(
        self,
        scores: np.ndarray,
        groups: Sequence[GroupId],
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        scores = np.asarray(scores, dtype=float)
        groups = np.asarray([str(g) for g in groups], dtype=object)
        self._check_groups(groups)
        if np.any(np.abs(scores) > self.grid.A) or not np.all(np.isfinite(scores)):
            raise SpecValidationError(f"Scores must be clipped to [-{self.grid.A}, {self.grid.A}] before prediction")
        if self.dither.at_prediction:
            rng = rng or seed_stream(self.dither.seed, "predict_dither")
            scores = dither_scores(scores, self.dither, self.grid.A, rng)
        return self.assign(scores, groups)

    def assign(self, scores: np.ndarray, groups: np.ndarray) -> np.ndarray:
        """Grid minimizer for already clipped (and dithered) scores."""
        indicators = indicator_matrix(self.grid.points, self.spec.constraint_thresholds)
        penalties = _penalties(self.dual, indicators)
        out = np.empty(scores.size)
        for row, label in enumerate(self.groups):
            members = np.flatnonzero(groups == label)
            if members.size:
                idx, _ = _grid_argmin(scores[members], self.weights[label], penalties[row], self.grid.points)
                out[members] = self.grid.points[idx]
        return out

    def to_document(self) -> "PredictorDocument":
        return PredictorDocument(
            grid=GridDocument(A=self.grid.A, K=self.grid.K),
            spec=SpecDocument(**self.spec.to_dict()),
            groups=list(self.groups),
            multipliers=self.dual.matrix.tolist(),
            n_level_columns=self.dual.n_level_columns,
            weights=dict(self.weights),
            dither=self.dither,
            provenance=self.provenance,
        )

    @classmethod
    def from_document(cls, document: "PredictorDocument") -> "FairPredictor":
        if set(document.weights) != set(document.groups):
            raise SchemaVersionError(
                f"Predictor weights cover {sorted(document.weights)}, groups are {sorted(document.groups)}"
            )
        spec = FairnessSpec.from_dict(document.spec.model_dump())
        dual = DualParams(tuple(document.groups), np.array(document.multipliers, dtype=float), document.n_level_columns)
        dual.check_compatible(document.groups, spec)
        return cls(
            grid=build_grid(document.grid.A, document.grid.K),
            spec=spec,
            dual=dual,
            weights=dict(document.weights),
            dither=document.dither,
            provenance=document.provenance,
        )

    def save(self, path: Path):
        atomic_write_text(Path(path), self.to_document().model_dump_json(indent=2))

    @classmethod
    def load(cls, path: Path) -> "FairPredictor":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("kind") != "fair_predictor" or payload.get("schema_version") != PREDICTOR_SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{path} is not a fair predictor document of schema version {PREDICTOR_SCHEMA_VERSION}"
            )
        return cls.from_document(PredictorDocument.model_validate(payload))


class GridDocument(BaseModel):
    A: float = Field(gt=0.0)
    K: int = Field(ge=2)


class SpecDocument(BaseModel):
    variant: Variant
    thresholds: List[float]
    levels: List[float] = Field(default_factory=list)
    inner_m: int = Field(0, ge=0)


class PredictorDocument(BaseModel):
    kind: Literal["fair_predictor"] = "fair_predictor"
    schema_version: int = PREDICTOR_SCHEMA_VERSION
    grid: GridDocument
    spec: SpecDocument
    groups: List[str]
    multipliers: List[List[float]]
    n_level_columns: int
    weights: Dict[str, float]
    dither: DitherConfig
    provenance: Provenance


def predict_fair(predictor: FairPredictor, score: float, group: GroupId) -> float:
    return float(predictor.predict_many(np.array([score]), [group])[0])


def penalized_risk(predictor: FairPredictor, calib: CalibrationSet) -> float:
    """sum_s pi_s E_s[(y - f)^2] + sum_s <lambda_s, P_s(a(y)) - t>; equals -H(lambda) at the argmin."""
    values = predictor.assign(calib.scores, calib.groups)
    thresholds = predictor.spec.constraint_thresholds
    terms = []
    for label in calib.group_labels:
        members = calib.index_sets[label]
        squared = np.square(values[members] - calib.scores[members])
        terms.append(predictor.weights[label] * exact_sum(squared.tolist()) / members.size)
        cdf = indicator_matrix(values[members], thresholds).mean(axis=0)
        terms.append(float(predictor.dual.row(label) @ (cdf - predictor.spec.targets)))
    return exact_sum(terms)


def calibrate(
    scores: np.ndarray,
    groups: Sequence[GroupId],
    grid: Grid,
    spec: FairnessSpec,
    solver: Optional[SolverOptions] = None,
    dither_cfg: Optional[DitherConfig] = None,
    declared_groups: Optional[Sequence[GroupId]] = None,
) -> Tuple[FairPredictor, SolverTrace]:
    """Clip, dither, estimate the multipliers and freeze the calibrated predictor."""
    solver = solver or SolverOptions()
    dither_cfg = dither_cfg or DitherConfig()
    spec.check_grid(grid)

    scores = np.asarray(scores, dtype=float)
    n_clipped = int(np.sum(np.abs(scores) > grid.A))
    if n_clipped:
        logger.info(f"Clipped {n_clipped} score(s) to [-{grid.A}, {grid.A}]")
    scores = np.clip(scores, -grid.A, grid.A)
    dithered = dither_scores(scores, dither_cfg, grid.A, seed_stream(dither_cfg.seed, "dither"))

    calib = CalibrationSet.from_scores(dithered, groups, declared_groups)
    logger.info(
        f"Calibrating {spec.variant.value} spec with {spec.n_columns} constraint(s) "
        f"on {len(calib)} samples, groups {dict(calib.counts)}"
    )
    dual, trace = solve_dual(calib, grid, spec, solver)
    trace.calibration = calib

    best = trace.best_iteration - 1
    provenance = Provenance(
        iterations=trace.iterations,
        best_iteration=trace.best_iteration,
        final_violation=trace.violations[best],
        final_objective=trace.objectives[best],
        converged=trace.converged,
        seed=dither_cfg.seed,
        n_calibration=len(calib),
        step_scale=solver.step_scale or grid.A * grid.spacing,
    )
    predictor = FairPredictor(grid, spec, dual, dict(calib.weights), dither_cfg, provenance)
    return predictor, trace
