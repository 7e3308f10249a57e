import csv
import io
import json

import numpy as np
import pytest
from pydantic import ValidationError

from src.calibration import SolverOptions
from src.core import Variant, build_grid
from src.data import SyntheticConfig, generate_synthetic
from src.errors import SpecValidationError
from src.experiments import (
    SWEEP_CSV_FIELDS,
    ExperimentConfig,
    Method,
    Prescription,
    PrescriptionMode,
    aggregate,
    lower_quantiles,
    method_spec,
    prescribe_thresholds,
    run_cell,
    run_protocol,
    sweep_csv_text,
    sweep_globality,
    write_summary_json,
)


@pytest.fixture
def quick_config():
    return ExperimentConfig(grid_k=41, solver=SolverOptions(max_iters=150))


@pytest.fixture
def synthetic():
    return SyntheticConfig(n=1500)


class TestPrescriptions:

    def test_lower_quantiles(self):
        assert lower_quantiles(np.array([1.0, 2.0, 3.0, 4.0]), (0.25, 0.5, 0.75)).tolist() == [1.0, 2.0, 3.0]

    def test_global(self):
        spec = prescribe_thresholds(np.array([4.0, 1.0, 3.0, 2.0]), ["A", "B", "A", "B"], Prescription())
        assert spec.variant is Variant.LZ
        assert spec.thresholds == (1.0, 2.0, 3.0)
        assert spec.levels == (0.25, 0.5, 0.75)

    def test_target_singleton_group(self):
        prescription = Prescription.parse("target:A", levels=(0.5,))
        spec = prescribe_thresholds(np.array([7.5, 1.0, 2.0]), ["A", "B", "B"], prescription)
        assert spec.thresholds == (7.5,)

    def test_constant_scores_are_rejected(self):
        with pytest.raises(SpecValidationError, match="dither"):
            prescribe_thresholds(np.full(10, 3.0), ["A", "B"] * 5, Prescription())

    def test_target_group_without_scores(self):
        with pytest.raises(SpecValidationError):
            prescribe_thresholds(np.array([1.0, 2.0]), ["A", "A"], Prescription.parse("target:B", (0.5,)))

    def test_target_quantiles_are_consistent(self, rng):
        scores = rng.normal(0, 1, 301)
        groups = np.where(np.arange(301) % 3 == 0, "A", "B")
        prescription = Prescription.parse("target:A")
        spec = prescribe_thresholds(scores, groups, prescription)
        members = scores[groups == "A"]
        for level, z in zip(spec.levels, spec.thresholds):
            cdf = np.mean(members <= z)
            assert level <= cdf < level + 1 / members.size

    @pytest.mark.parametrize("text", ["local", "target:", ""])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            Prescription.parse(text)

    def test_explicit_needs_thresholds(self):
        with pytest.raises(ValidationError):
            Prescription(mode=PrescriptionMode.EXPLICIT, levels=(0.5,))


class TestMethodSpecs:

    def test_strong_dp_uses_interior_points(self, quick_config):
        grid = build_grid(100.0, 41)
        reference = prescribe_thresholds(np.arange(10.0), ["A", "B"] * 5, Prescription())
        spec, descriptor, _ = method_spec(Method.STRONG_DP, np.arange(10.0), reference, grid, quick_config)
        assert spec.variant is Variant.ZDP
        assert spec.thresholds == tuple(grid.points[1:-1])
        assert descriptor == "strong_dp"

    def test_z_fair_descriptor_sorts_by_m(self, quick_config):
        grid = build_grid(100.0, 41)
        scores = np.linspace(-50, 50, 101)
        reference = prescribe_thresholds(scores, ["A"] * 101, Prescription())
        _, descriptor, detail = method_spec(Method.Z_FAIR, scores, reference, grid, quick_config, m=7)
        assert descriptor == "z_fair:M=007"
        assert detail == "7"

    def test_range_uses_border_spec(self, quick_config):
        grid = build_grid(100.0, 41)
        scores = np.linspace(-50, 50, 101)
        reference = prescribe_thresholds(scores, ["A"] * 101, Prescription())
        spec, _, _ = method_spec(Method.Z_FAIR_RANGE, scores, reference, grid, quick_config)
        assert spec.variant is Variant.BORDER
        assert spec.levels == (0.25, 0.75)
        assert spec.inner_m == 9


class TestProtocol:

    def test_unconstrained_has_zero_price(self, synthetic, quick_config):
        dataset = generate_synthetic(synthetic)
        point = run_cell(dataset, Method.UNCONSTRAINED, 3, quick_config)
        assert point.report.rmse_price == 0.0
        assert point.calibration_violation is None

    def test_unconstrained_baseline_carries_the_group_gap(self, quick_config):
        dataset = generate_synthetic(SyntheticConfig(n=4000, seed=0))
        aware = run_cell(dataset, Method.UNCONSTRAINED, 0, quick_config)
        blind = run_cell(dataset, Method.UNCONSTRAINED, 0,
                         quick_config.model_copy(update={"tree_uses_groups": False}))
        assert aware.report.ks >= 0.3
        assert blind.report.ks < aware.report.ks

    def test_repeated_seed_gives_identical_points(self, synthetic, quick_config):
        points = run_protocol(synthetic, [Method.UNCONSTRAINED, Method.LZ_FAIR], [7, 7], quick_config)
        assert len(points) == 4
        by_method = {}
        for point in points:
            by_method.setdefault(point.descriptor, []).append(point.model_dump())
        for first, second in by_method.values():
            assert first == second

    def test_points_are_sorted_and_flushed(self, synthetic, quick_config):
        flushed = []
        points = run_protocol(synthetic, [Method.LZ_FAIR, Method.UNCONSTRAINED], [2, 1], quick_config,
                              on_point=flushed.append)
        assert [(p.descriptor, p.seed) for p in points] == [
            ("lz_fair", 1), ("lz_fair", 2), ("unconstrained", 1), ("unconstrained", 2)
        ]
        assert len(flushed) == 4

    def test_parallel_seeds_match_sequential(self, synthetic, quick_config):
        sequential = run_protocol(synthetic, [Method.LZ_FAIR], [1, 2], quick_config)
        parallel = run_protocol(synthetic, [Method.LZ_FAIR], [1, 2], quick_config.model_copy(update={"n_jobs": 2}))
        assert [p.model_dump() for p in sequential] == [p.model_dump() for p in parallel]


class TestSweep:

    def test_invalid_m_values(self, synthetic, quick_config):
        with pytest.raises(SpecValidationError):
            sweep_globality(synthetic, [0], [1], quick_config)
        with pytest.raises(SpecValidationError):
            sweep_globality(synthetic, [40], [1], quick_config)

    def test_one_aggregated_row_per_descriptor(self, synthetic, quick_config, tmp_path):
        points = sweep_globality(synthetic, [1, 3], [1, 2], quick_config)
        assert len(points) == 6
        rows = aggregate(points)
        assert [row["descriptor"] for row in rows] == ["strong_dp", "z_fair:M=001", "z_fair:M=003"]
        assert all(row["n_seeds"] == 2 for row in rows)
        assert all(row["rmse_price_sd"] >= 0.0 for row in rows)

        summary_path = tmp_path / "summary.json"
        write_summary_json(points, summary_path)
        summary = json.loads(summary_path.read_text())
        assert len(summary["rows"]) == 3
        assert len(summary["points"]) == 6

    def test_csv_layout(self, synthetic, quick_config):
        points = sweep_globality(synthetic, [1], [4], quick_config)
        rows = list(csv.DictReader(io.StringIO(sweep_csv_text(points))))
        assert list(rows[0].keys()) == SWEEP_CSV_FIELDS
        assert {row["variant"] for row in rows} == {"z_fair", "strong_dp"}
        assert all(row["seed"] == "4" for row in rows)
