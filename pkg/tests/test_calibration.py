import json
import math

import numpy as np
import pytest

from conftest import make_predictor
from src.calibration import (
    CalibrationSet,
    DitherConfig,
    FairPredictor,
    SolverOptions,
    calibrate,
    dither,
    dither_scores,
    dual_objective,
    dual_score,
    dual_subgradient,
    group_weights,
    penalized_risk,
    predict_fair,
    project_delta,
    solve_dual,
)
from src.core import DualParams, FairnessSpec, build_grid, indicator_matrix, snap_many
from src.errors import EmptyGroupError, SchemaVersionError, SpecValidationError, UnknownGroupError
from src.metrics import unfairness


class _FixedDraw:
    """Generator stand-in whose uniform draws are a known constant."""

    def __init__(self, value: float):
        self.value = value

    def uniform(self, low, high, size=None):
        return np.full(size, self.value)


class TestDither:

    def test_zero_width_is_identity(self, rng):
        assert dither(0.4, DitherConfig(u=0.0), 1.0, rng) == 0.4

    def test_upper_endpoint_is_pinned(self, rng):
        assert dither(1.0, DitherConfig(u=0.1), 1.0, rng) == 1.0

    def test_additive_noise(self):
        assert dither(0.0, DitherConfig(u=0.1), 1.0, _FixedDraw(0.07)) == pytest.approx(0.07)

    def test_breaks_ties_of_atomic_scores(self, rng):
        atoms = rng.choice([0.0, 0.001, 0.002], size=10 ** 5)
        dithered = dither_scores(atoms, DitherConfig(u=1e-4), 100.0, rng)
        assert np.unique(dithered).size == atoms.size
        assert np.all((dithered >= atoms) & (dithered <= atoms + 1e-4))

    def test_negative_width_rejected(self):
        with pytest.raises(ValueError):
            DitherConfig(u=-1.0)


class TestGroupWeights:

    def test_counts_and_weights(self):
        counts, weights = group_weights(["A", "A", "B", "A"])
        assert counts == {"A": 3, "B": 1}
        assert weights == {"A": 0.75, "B": 0.25}

    def test_even_split(self):
        _, weights = group_weights(["A", "B"])
        assert weights == {"A": 0.5, "B": 0.5}

    def test_declared_group_without_samples(self):
        with pytest.raises(EmptyGroupError):
            group_weights(["A"], declared=["A", "B"])


class TestDualScore:

    def test_zero_multipliers(self):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        dual = DualParams.zeros(("A",), spec)
        assert dual_score(dual, 0.3, "A", 0.5, spec, {"A": 1.0}) == pytest.approx(-0.04)

    def test_level_constraints(self):
        spec = FairnessSpec.lz((0.25, 0.75), (0.0, 0.5))
        dual = DualParams(("A",), np.array([[1.0, 0.0]]), 2)
        assert dual_score(dual, 0.0, "A", -1.0, spec, {"A": 1.0}) == pytest.approx(-1.75)

    def test_parity_constraints(self):
        spec = FairnessSpec.zdp((0.0, 0.5))
        dual = DualParams(("A",), np.array([[1.0, 0.0]]), 0)
        assert dual_score(dual, 0.0, "A", -1.0, spec, {"A": 1.0}) == pytest.approx(-2.0)


class TestDualObjective:

    def test_single_sample(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        calib = CalibrationSet.from_scores([0.3], ["A"])
        dual = DualParams.zeros(calib.group_labels, spec)
        assert dual_objective(dual, calib, unit_grid, spec) == pytest.approx(-0.04)

    def test_two_groups(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        calib = CalibrationSet.from_scores([0.3, -0.3], ["A", "B"])
        dual = DualParams.zeros(calib.group_labels, spec)
        assert dual_objective(dual, calib, unit_grid, spec) == pytest.approx(-0.04)

    def test_shape_mismatch(self, unit_grid):
        calib = CalibrationSet.from_scores([0.3, -0.3], ["A", "B"])
        dual = DualParams.zeros(("A", "B"), FairnessSpec.zdp((0.0, 0.5)))
        with pytest.raises(SpecValidationError):
            dual_objective(dual, calib, unit_grid, FairnessSpec.zdp((0.0,)))

    def test_declared_empty_group(self):
        with pytest.raises(EmptyGroupError):
            CalibrationSet.from_scores([0.3], ["A"], declared_groups=["A", "B"])

    def test_independent_of_thread_count(self, shifted_calibration, rng):
        grid = build_grid(1.0, 11)
        spec = FairnessSpec.border((-0.4, 0.4), (0.25, 0.75), 3)
        dual = DualParams(shifted_calibration.group_labels, rng.normal(0, 0.5, (2, 5)), 2)
        assert dual_objective(dual, shifted_calibration, grid, spec, n_jobs=1) == dual_objective(
            dual, shifted_calibration, grid, spec, n_jobs=4
        )


class TestSubgradient:

    def test_single_sample(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        calib = CalibrationSet.from_scores([0.3], ["A"])
        g = dual_subgradient(DualParams.zeros(("A",), spec), calib, unit_grid, spec)
        assert g.tolist() == [[0.5]]

    def test_balanced_group_is_stationary(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        calib = CalibrationSet.from_scores([-0.6, -0.3, 0.4, 0.8], ["A"] * 4)
        g = dual_subgradient(DualParams.zeros(("A",), spec), calib, unit_grid, spec)
        assert g.tolist() == [[0.0]]

    def test_components_are_constraint_gaps(self, shifted_calibration, rng):
        grid = build_grid(1.0, 11)
        spec = FairnessSpec.lz((0.25, 0.5, 0.75), (-0.4, 0.0, 0.4))
        dual = DualParams(shifted_calibration.group_labels, rng.normal(0, 0.3, (2, 3)), 3)
        g = dual_subgradient(dual, shifted_calibration, grid, spec)

        predictor = make_predictor(grid, spec, dual.groups, dual.matrix, shifted_calibration.weights)
        values = predictor.assign(shifted_calibration.scores, shifted_calibration.groups)
        for row, label in enumerate(dual.groups):
            members = values[shifted_calibration.groups == label]
            cdf = indicator_matrix(members, spec.constraint_thresholds).mean(axis=0)
            assert g[row].tolist() == pytest.approx((spec.targets - cdf).tolist(), abs=1e-15)


@pytest.fixture
def border_problem(shifted_calibration):
    grid = build_grid(1.0, 11)
    spec = FairnessSpec.border((-0.4, 0.4), (0.25, 0.75), 3)
    return shifted_calibration, grid, spec


def _random_dual(rng, calib, spec, scale=0.5):
    matrix = rng.normal(0, scale, (len(calib.group_labels), spec.n_columns))
    return DualParams(calib.group_labels, matrix, spec.n_level_columns)


def test_dual_objective_is_convex(border_problem, rng):
    calib, grid, spec = border_problem
    for _ in range(200):
        first, second = _random_dual(rng, calib, spec), _random_dual(rng, calib, spec)
        h_first = dual_objective(first, calib, grid, spec)
        h_second = dual_objective(second, calib, grid, spec)
        for theta in (0.25, 0.5, 0.75):
            mixed = first.with_matrix(theta * first.matrix + (1 - theta) * second.matrix)
            assert dual_objective(mixed, calib, grid, spec) <= theta * h_first + (1 - theta) * h_second + 1e-9


def test_subgradient_inequality(border_problem, rng):
    calib, grid, spec = border_problem
    for _ in range(100):
        here, there = _random_dual(rng, calib, spec), _random_dual(rng, calib, spec)
        g = dual_subgradient(here, calib, grid, spec)
        lower = dual_objective(here, calib, grid, spec) + float(np.sum(g * (there.matrix - here.matrix)))
        assert dual_objective(there, calib, grid, spec) >= lower - 1e-9


class TestProjectDelta:

    def test_two_groups(self):
        dual = DualParams(("A", "B"), np.array([[1.0], [0.0]]), 0)
        assert project_delta(dual).matrix.tolist() == [[0.5], [-0.5]]

    def test_three_groups(self):
        dual = DualParams(("A", "B", "C"), np.array([[3.0], [0.0], [0.0]]), 0)
        assert project_delta(dual).matrix.tolist() == [[2.0], [-1.0], [-1.0]]

    def test_idempotent_with_zero_column_sums(self, rng):
        dual = DualParams(("A", "B", "C"), rng.normal(0, 5, (3, 4)), 0)
        once = project_delta(dual)
        assert np.all(np.abs(once.column_sums()) <= 1e-12)
        assert np.array_equal(project_delta(once).matrix, once.matrix)

    @pytest.mark.parametrize("n_groups", [2, 3, 5, 11])
    def test_projected_columns_sum_to_exactly_zero(self, rng, n_groups):
        labels = tuple(f"g{i}" for i in range(n_groups))
        for _ in range(250):
            matrix = rng.normal(0, 1, (n_groups, 4)) * 10.0 ** rng.integers(-6, 6)
            once = project_delta(DualParams(labels, matrix, 0))
            assert all(math.fsum(column) == 0.0 for column in once.matrix.T)
            assert np.array_equal(project_delta(once).matrix, once.matrix)
            assert np.allclose(once.matrix, matrix - matrix.mean(axis=0), rtol=0, atol=1e-12 * np.abs(matrix).max())

    def test_constant_column(self):
        dual = DualParams(("A", "B", "C"), np.full((3, 1), 0.1), 0)
        once = project_delta(dual)
        assert math.fsum(once.matrix[:, 0]) == 0.0
        assert np.array_equal(project_delta(once).matrix, once.matrix)

    def test_level_columns_untouched(self, rng):
        matrix = rng.normal(0, 1, (2, 5))
        projected = project_delta(DualParams(("A", "B"), matrix, 2))
        assert np.array_equal(projected.level_block, matrix[:, :2])
        assert np.all(np.abs(projected.parity_block.sum(axis=0)) <= 1e-12)

    def test_lz_unchanged(self, rng):
        matrix = rng.normal(0, 1, (2, 3))
        assert np.array_equal(project_delta(DualParams(("A", "B"), matrix, 3)).matrix, matrix)


class TestSolver:

    def test_matches_brute_force_search(self, shifted_calibration):
        calib = shifted_calibration
        grid = build_grid(1.0, 21)
        z = float(np.median(calib.scores))
        spec = FairnessSpec.lz((0.5,), (z,))

        dual, trace = solve_dual(calib, grid, spec, SolverOptions(max_iters=3000, tol=1e-9))
        solved = dual_objective(dual, calib, grid, spec)

        # the objective separates across groups, so the 2-d search is two 1-d scans
        lambdas = np.linspace(-3.0, 3.0, 1201)
        below = (grid.points <= z).astype(float) - 0.5
        brute = 0.0
        for label in calib.group_labels:
            f = calib.scores[calib.index_sets[label]]
            quadratic = -calib.weights[label] * (grid.points[None, :] - f[:, None]) ** 2
            values = quadratic[None, :, :] - lambdas[:, None, None] * below[None, None, :]
            brute += float(values.max(axis=2).mean(axis=1).min())

        assert solved <= brute + 1e-2
        assert trace.iterations >= 1

    def test_already_fair_scores(self, rng, unit_grid):
        scores = rng.uniform(-1, 1, 50)
        calib = CalibrationSet.from_scores(np.concatenate([scores, scores]), ["A"] * 50 + ["B"] * 50)
        spec = FairnessSpec.zdp((0.0,))
        dual, trace = solve_dual(calib, unit_grid, spec)
        assert trace.converged
        assert trace.iterations == 1
        assert np.all(dual.matrix == 0.0)

    def test_single_iteration_is_flagged(self, shifted_calibration, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        dual, trace = solve_dual(shifted_calibration, unit_grid, spec, SolverOptions(max_iters=1))
        assert trace.iterations == 1
        assert not trace.converged
        assert trace.best_iteration == 1
        assert np.all(dual.matrix == 0.0)

    def test_parity_multipliers_stay_in_delta(self, shifted_calibration):
        spec = FairnessSpec.zdp((-0.3, 0.0, 0.3))
        dual, _ = solve_dual(shifted_calibration, build_grid(1.0, 21), spec, SolverOptions(max_iters=200))
        assert np.all(np.abs(dual.column_sums()) <= 1e-12)

    def test_lz_violation_reaches_tolerance(self, shifted_calibration):
        grid = build_grid(1.0, 41)
        spec = FairnessSpec.lz((0.25, 0.5, 0.75), (-0.4, 0.0, 0.4))
        _, trace = solve_dual(shifted_calibration, grid, spec, SolverOptions(max_iters=3000, tol=0.05))
        assert trace.converged
        assert min(trace.violations) <= 0.05


class TestPrediction:

    def test_zero_multipliers_round(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        predictor = make_predictor(unit_grid, spec, ["A"], [[0.0]], {"A": 1.0})
        assert predict_fair(predictor, 0.3, "A") == 0.5

    def test_penalty_pushes_above_threshold(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        predictor = make_predictor(unit_grid, spec, ["A"], [[10.0]], {"A": 1.0})
        assert predict_fair(predictor, -0.1, "A") == 0.5

    def test_reward_pulls_down_to_threshold(self, unit_grid):
        spec = FairnessSpec.lz((0.5,), (0.0,))
        predictor = make_predictor(unit_grid, spec, ["A"], [[-10.0]], {"A": 1.0})
        assert predict_fair(predictor, 0.1, "A") == 0.0

    def test_zero_multipliers_equal_snapping(self, unit_grid):
        spec = FairnessSpec.zdp((0.0,))
        predictor = make_predictor(unit_grid, spec, ["A", "B"], [[0.0], [0.0]], {"A": 0.5, "B": 0.5})
        lattice = np.linspace(-1.0, 1.0, 2001)
        fair = predictor.predict_many(lattice, ["B"] * lattice.size)
        assert np.array_equal(fair, snap_many(lattice, unit_grid))

    def test_monotone_in_score(self, rng):
        grid = build_grid(1.0, 11)
        spec = FairnessSpec.border((-0.4, 0.4), (0.25, 0.75), 3)
        predictor = make_predictor(grid, spec, ["A", "B"], rng.normal(0, 0.5, (2, 5)), {"A": 0.6, "B": 0.4})
        lattice = np.linspace(-1.0, 1.0, 4001)
        for label in ("A", "B"):
            fair = predictor.predict_many(lattice, [label] * lattice.size)
            assert np.all(np.diff(fair) >= 0)
            assert np.all(np.isin(fair, grid.points))

    def test_unknown_group(self, unit_grid):
        predictor = make_predictor(unit_grid, FairnessSpec.zdp((0.0,)), ["A", "B"], [[0.0], [0.0]],
                                   {"A": 0.5, "B": 0.5})
        with pytest.raises(UnknownGroupError, match="C"):
            predict_fair(predictor, 0.1, "C")

    def test_unclipped_score(self, unit_grid):
        predictor = make_predictor(unit_grid, FairnessSpec.zdp((0.0,)), ["A", "B"], [[0.0], [0.0]],
                                   {"A": 0.5, "B": 0.5})
        with pytest.raises(SpecValidationError):
            predict_fair(predictor, 1.5, "A")


class TestCalibrate:

    @pytest.fixture
    def calibrated(self, shifted_calibration):
        grid = build_grid(1.0, 21)
        spec = FairnessSpec.lz((0.25, 0.5, 0.75), (-0.3, 0.0, 0.3))
        predictor, trace = calibrate(
            shifted_calibration.scores,
            shifted_calibration.groups,
            grid,
            spec,
            SolverOptions(max_iters=500),
            DitherConfig(u=0.0, seed=3),
        )
        return predictor, trace, shifted_calibration

    def test_provenance(self, calibrated):
        predictor, trace, calib = calibrated
        provenance = predictor.provenance
        assert provenance.iterations == trace.iterations
        assert provenance.n_calibration == len(calib)
        assert provenance.seed == 3
        assert provenance.step_scale == pytest.approx(0.1)
        assert sum(predictor.weights.values()) == pytest.approx(1.0)

    def test_trace_keeps_the_calibration_sample(self, calibrated):
        predictor, trace, calib = calibrated
        assert np.array_equal(trace.calibration.scores, calib.scores)
        assert penalized_risk(predictor, trace.calibration) == pytest.approx(-trace.summary()["final_objective"], abs=1e-12)

    def test_penalized_risk_is_negative_dual(self, calibrated):
        predictor, _, calib = calibrated
        h = dual_objective(predictor.dual, calib, predictor.grid, predictor.spec)
        assert penalized_risk(predictor, calib) == pytest.approx(-h, abs=1e-12)

    def test_document_round_trip(self, calibrated, tmp_path):
        predictor, _, calib = calibrated
        path = tmp_path / "predictor.json"
        predictor.save(path)
        loaded = FairPredictor.load(path)
        assert np.array_equal(loaded.dual.matrix, predictor.dual.matrix)
        assert loaded.weights == predictor.weights
        assert loaded.spec == predictor.spec
        assert np.array_equal(loaded.predict_many(calib.scores, calib.groups),
                              predictor.predict_many(calib.scores, calib.groups))

    def test_load_rejects_other_kinds(self, calibrated, tmp_path):
        predictor, _, _ = calibrated
        path = tmp_path / "predictor.json"
        payload = json.loads(predictor.to_document().model_dump_json())
        payload["kind"] = "regression_tree"
        path.write_text(json.dumps(payload))
        with pytest.raises(SchemaVersionError):
            FairPredictor.load(path)

    def test_scores_are_clipped(self):
        grid = build_grid(1.0, 5)
        predictor, _ = calibrate([-3.0, 0.2, 4.0, -0.1], ["A", "A", "B", "B"], grid,
                                 FairnessSpec.zdp((0.0,)), SolverOptions(max_iters=5))
        assert predictor.provenance.n_calibration == 4

    def test_prediction_dithering_is_seeded(self, calibrated):
        predictor, _, calib = calibrated
        noisy = FairPredictor(predictor.grid, predictor.spec, predictor.dual, predictor.weights,
                              DitherConfig(u=0.05, seed=1, at_prediction=True), predictor.provenance)
        first = noisy.predict_many(calib.scores, calib.groups)
        second = noisy.predict_many(calib.scores, calib.groups)
        assert np.array_equal(first, second)


def _random_spec(rng):
    kind = rng.integers(3)
    if kind == 0:
        m = int(rng.integers(1, 4))
        thresholds = np.sort(rng.choice(np.linspace(-0.8, 0.8, 17), m, replace=False))
        return FairnessSpec.lz([k / (m + 1) for k in range(1, m + 1)], thresholds)
    if kind == 1:
        return FairnessSpec.zdp(np.sort(rng.choice(np.linspace(-0.8, 0.8, 17), 3, replace=False)))
    return FairnessSpec.border((-0.5, 0.5), (0.2, 0.8), int(rng.integers(1, 5)))


@pytest.mark.parametrize("seed", range(20))
def test_solver_violation_matches_unfairness(seed):
    rng = np.random.default_rng(seed)
    n_groups = int(rng.integers(2, 4))
    labels = [f"g{i}" for i in range(n_groups)]
    groups = np.repeat(labels, 40)
    scores = np.concatenate([rng.uniform(-1, 1, 40) * 0.6 + 0.3 * i for i in range(n_groups)]).clip(-1, 1)
    grid = build_grid(1.0, 21)
    spec = _random_spec(rng)

    predictor, _ = calibrate(scores, groups, grid, spec, SolverOptions(max_iters=50))
    values = predictor.assign(scores, groups)
    _, worst = unfairness(values, groups, spec, predictor.groups)
    assert worst == predictor.provenance.final_violation
