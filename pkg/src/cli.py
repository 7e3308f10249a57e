"""Command-line interface: synth, split, train, calibrate, predict, evaluate, protocol, sweep"""
import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src import config
from src.base_learner import RegressionTree, fit_tree, predict_many, scores_from_file
from src.calibration import (
    DitherConfig,
    FairPredictor,
    SolverOptions,
    calibrate,
    default_dither_u,
    penalized_risk,
)
from src.core import FairnessSpec, Variant, auto_grid_size, build_grid
from src.data import (
    LabeledDataset,
    SplitConfig,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    missing_mask,
    numeric_column,
    read_frame,
    split,
    write_csv,
)
from src.errors import IngestionError
from src.experiments import (
    ExperimentConfig,
    Method,
    Prescription,
    prescribe_thresholds,
    run_protocol,
    sweep_globality,
    sweep_csv_row,
    SWEEP_CSV_FIELDS,
    write_summary_json,
    write_sweep_csv,
)
from src.metrics import REPORT_CSV_FIELDS, evaluate, report_csv_row
from src.utils import atomic_write_text, format_float, logger

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_TOLERANCE = 2


def parse_floats(raw: Optional[str]) -> Optional[Tuple[float, ...]]:
    if raw is None:
        return None
    return tuple(float(part) for part in raw.replace(";", ",").split(",") if part.strip())


def parse_names(raw: Optional[str]) -> List[str]:
    return [part.strip() for part in (raw or "").split(",") if part.strip()]


def parse_seed_list(raw: Optional[str]) -> List[int]:
    """'1,2,5', '1..3' or a mix; None gives the configured default count."""
    if raw is None:
        return list(range(config.DEFAULT_SEEDS))
    seeds: List[int] = []
    for part in raw.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            start, stop = part.split("..", 1)
            seeds.extend(range(int(start), int(stop) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("No valid seeds provided")
    return seeds


@dataclass(frozen=True)
class RunConfig:
    """Validated view of the parsed flags shared by the subcommands."""

    command: str
    seed: int
    grid_a: float
    grid_k: Optional[int]
    grid_auto: bool
    solver: SolverOptions
    dither_u: Optional[float]
    dither_at_predict: bool

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        solver = SolverOptions(
            max_iters=getattr(args, "solver_iters", config.SOLVER_MAX_ITERS),
            c0=getattr(args, "solver_c0", config.SOLVER_C0),
            step_scale=getattr(args, "step_scale", None),
            tol=getattr(args, "tol", config.SOLVER_TOL),
            n_jobs=getattr(args, "n_jobs", config.N_JOBS),
        )
        return cls(
            command=args.command,
            seed=args.seed,
            grid_a=args.grid_a,
            grid_k=getattr(args, "grid_k", None),
            grid_auto=getattr(args, "grid_auto", False),
            solver=solver,
            dither_u=getattr(args, "dither_u", None),
            dither_at_predict=getattr(args, "dither_at_predict", False),
        )

    def grid_for(self, n_calibration: int):
        k = auto_grid_size(n_calibration) if self.grid_auto else (self.grid_k or config.GRID_K)
        return build_grid(self.grid_a, k)


def _write_rows(path: Path, fieldnames: Sequence[str], rows: Sequence[dict]):
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    atomic_write_text(Path(path), buffer.getvalue())


def _write_json(path: Path, payload: dict):
    atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True))


def _load_scores(args: argparse.Namespace, A: float):
    """Base scores from an external prediction column or from a saved tree.

    Returns (scores clipped to [-A, A], groups, targets or None, atomic flag).
    """
    if args.pred_col:
        table = scores_from_file(Path(args.input), args.pred_col, args.group_col)
        targets = None
        if getattr(args, "target_col", None):
            frame = read_frame(Path(args.input), [args.target_col])
            targets = numeric_column(frame, args.target_col)
        return np.clip(table.scores, -A, A), table.groups, targets, False

    if not args.model or not args.features:
        raise IngestionError("Provide either --pred-col or both --model and --features")
    tree = RegressionTree.load(Path(args.model))
    dataset, _ = load_csv(Path(args.input), parse_names(args.features), args.group_col,
                          getattr(args, "target_col", None))
    return predict_many(tree, dataset.features, dataset.groups, clip=A), dataset.groups, dataset.targets, True


def _spec_from_args(args: argparse.Namespace, scores: np.ndarray, groups: np.ndarray) -> FairnessSpec:
    variant = Variant(args.spec_variant)
    levels = parse_floats(args.levels) or config.DEFAULT_LEVELS

    if args.thresholds is not None:
        thresholds = parse_floats(args.thresholds)
        if variant is Variant.LZ:
            return FairnessSpec.lz(levels, thresholds)
        if variant is Variant.ZDP:
            return FairnessSpec.zdp(thresholds)
        # without --levels the borders take the outer default levels
        border_levels = levels if args.levels else (levels[0], levels[-1])
        return FairnessSpec.border(thresholds, border_levels, args.inner_m)

    prescribed = prescribe_thresholds(scores, groups, Prescription.parse(args.prescription or "global", levels))
    if variant is Variant.LZ:
        return prescribed
    if variant is Variant.ZDP:
        return FairnessSpec.zdp(prescribed.thresholds)
    if len(levels) < 2:
        raise IngestionError("A border spec needs at least two levels")
    borders = (prescribed.thresholds[0], prescribed.thresholds[-1])
    return FairnessSpec.border(borders, (levels[0], levels[-1]), args.inner_m)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SyntheticConfig(n=args.n, p_group_b=args.p_group_b, noise_sd=args.noise_sd, A=args.grid_a, seed=args.seed)
    dataset = generate_synthetic(cfg)
    write_csv(dataset, Path(args.output))
    logger.info(f"Wrote {len(dataset)} rows to {args.output}")
    print(len(dataset))
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    features = parse_names(args.features)
    dataset, _ = load_csv(Path(args.input), features, args.group_col, args.target_col)
    cfg = SplitConfig(seed=args.seed, stratify=args.stratify)
    out_dir = Path(args.output)
    for name, part in zip(("train", "calibration", "test"), split(dataset, cfg)):
        write_csv(part, out_dir / f"{name}.csv", features)
        logger.info(f"{name}: {len(part)} rows")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    dataset, _ = load_csv(Path(args.input), parse_names(args.features), args.group_col, args.target_col)
    if dataset.targets is None:
        raise IngestionError("Training needs --target-col")
    dataset = LabeledDataset(dataset.features, dataset.groups, np.clip(dataset.targets, -args.grid_a, args.grid_a))
    tree = fit_tree(dataset, args.min_samples_leaf, args.max_depth, use_groups=not args.group_blind)
    tree.save(Path(args.output))
    logger.info(f"Tree with {tree.n_leaves} leaves (depth {tree.depth}) written to {args.output}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    run = RunConfig.from_args(args)
    scores, groups, _, atomic = _load_scores(args, run.grid_a)
    grid = run.grid_for(len(scores))
    spec = _spec_from_args(args, scores, groups)
    u = run.dither_u if run.dither_u is not None else default_dither_u(grid.A, atomic)
    dither_cfg = DitherConfig(u=u, seed=run.seed, at_prediction=run.dither_at_predict)

    predictor, trace = calibrate(scores, groups, grid, spec, run.solver, dither_cfg)
    predictor.save(Path(args.output))

    calib = trace.calibration
    report = {
        "grid": {"A": grid.A, "K": grid.K},
        "spec": spec.to_dict(),
        "provenance": predictor.provenance.model_dump(),
        "trace": trace.summary(),
        "penalized_risk": penalized_risk(predictor, calib),
        "counts": dict(calib.counts),
    }
    if args.report:
        _write_json(Path(args.report), report)

    if not predictor.provenance.converged:
        logger.warning(f"Violation {predictor.provenance.final_violation:.4f} above tol {run.solver.tol}")
        return EXIT_TOLERANCE
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    predictor = FairPredictor.load(Path(args.predictor))
    scores, groups, targets, _ = _load_scores(args, predictor.grid.A)
    fair = predictor.predict_many(scores, groups)

    rows = []
    for i, (s, base, value) in enumerate(zip(groups, scores, fair)):
        row = {"id": str(i), "s": s, "base_score": format_float(base), "fair_value": format_float(value)}
        if targets is not None:
            row["y"] = format_float(targets[i])
        rows.append(row)
    fields = ["id", "s", "base_score", "fair_value"] + (["y"] if targets is not None else [])
    _write_rows(Path(args.output), fields, rows)
    logger.info(f"Wrote {len(rows)} predictions to {args.output}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    predictor = FairPredictor.load(Path(args.predictor))
    frame = read_frame(Path(args.input), ["s", "base_score", "fair_value"])
    if len(frame) == 0:
        raise IngestionError(f"No rows in {args.input}")
    if missing_mask(frame, ["s"]).any():
        raise IngestionError("Missing group label in column 's'")
    groups = frame["s"].str.strip().to_numpy(dtype=object)
    base = numeric_column(frame, "base_score")
    fair = numeric_column(frame, "fair_value")
    targets = numeric_column(frame, "y") if "y" in frame.columns else None

    report = evaluate(fair, base, groups, predictor.spec, targets, predictor.groups)
    atomic_write_text(Path(args.output), report.model_dump_json(indent=2))
    if args.csv_row:
        _write_rows(Path(args.csv_row), REPORT_CSV_FIELDS, [report_csv_row(report)])
    logger.info(f"rmse_price={report.rmse_price:.4f} U={report.unfairness:.4f} ks={report.ks:.4f}")
    return EXIT_OK


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    run = RunConfig.from_args(args)
    levels = parse_floats(args.levels) or config.DEFAULT_LEVELS
    return ExperimentConfig(
        grid_a=run.grid_a,
        grid_k=run.grid_k or config.GRID_K,
        dither_u=run.dither_u,
        solver=run.solver,
        min_samples_leaf=args.min_samples_leaf,
        max_depth=args.max_depth,
        tree_uses_groups=not args.group_blind,
        split=SplitConfig(stratify=args.stratify),
        prescription=Prescription.parse(args.prescription or "global", levels),
        n_jobs=run.solver.n_jobs,
    )


def _streaming_csv(path: Path):
    """Sink that rewrites the CSV after every finished point, so partial results survive errors."""
    rows: List[dict] = []

    def sink(point):
        rows.append(sweep_csv_row(point))
        _write_rows(path, SWEEP_CSV_FIELDS, rows)

    return sink


def cmd_protocol(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    seeds = parse_seed_list(args.seeds)
    methods = [Method(name) for name in parse_names(args.methods)] or list(Method)
    if args.input:
        source, _ = load_csv(Path(args.input), parse_names(args.features), args.group_col, args.target_col)
        if source.targets is None:
            raise IngestionError("Protocol runs on a labeled file need --target-col")
    else:
        source = SyntheticConfig(n=args.n, A=cfg.grid_a)

    points = run_protocol(source, methods, seeds, cfg, on_point=_streaming_csv(Path(args.output)))
    write_sweep_csv(points, Path(args.output))
    if args.summary:
        write_summary_json(points, Path(args.summary))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _experiment_config(args)
    seeds = parse_seed_list(args.seeds)
    m_values = [int(m) for m in parse_names(args.m_values)]
    synthetic = SyntheticConfig(n=args.n, A=cfg.grid_a)

    points = sweep_globality(synthetic, m_values, seeds, cfg, on_point=_streaming_csv(Path(args.output)))
    write_sweep_csv(points, Path(args.output))
    if args.summary:
        write_summary_json(points, Path(args.summary))
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, default=config.FAIRCAL_SEED)
    parser.add_argument("--grid-a", type=float, default=config.GRID_A)


def _add_columns(parser: argparse.ArgumentParser, target: bool = True):
    parser.add_argument("--features", help="comma-separated feature columns")
    parser.add_argument("--group-col", default="s")
    if target:
        parser.add_argument("--target-col")


def _add_calibration(parser: argparse.ArgumentParser):
    grid_k = parser.add_mutually_exclusive_group()
    grid_k.add_argument("--grid-k", type=int)
    grid_k.add_argument("--grid-auto", action="store_true", help="K = N^(1/3) rounded up to an odd integer")
    parser.add_argument("--dither-u", type=float, default=config.DITHER_U)
    parser.add_argument("--dither-at-predict", action="store_true")
    parser.add_argument("--solver-iters", type=int, default=config.SOLVER_MAX_ITERS)
    parser.add_argument("--solver-c0", type=float, default=config.SOLVER_C0)
    parser.add_argument("--step-scale", type=float,
                        help="step at iteration t is c0 * scale / sqrt(t); default A times the grid spacing")
    parser.add_argument("--tol", type=float, default=config.SOLVER_TOL)
    parser.add_argument("--n-jobs", type=int, default=config.N_JOBS)
    parser.add_argument("--levels")


def _add_experiment(parser: argparse.ArgumentParser):
    _add_calibration(parser)
    parser.add_argument("--prescription", default="global")
    parser.add_argument("--seeds", help="e.g. '1,2,3' or '1..10'")
    parser.add_argument("--n", type=int, default=config.SYNTH_N)
    parser.add_argument("--min-samples-leaf", type=int, default=config.TREE_MIN_SAMPLES_LEAF)
    parser.add_argument("--max-depth", type=int, default=config.TREE_MAX_DEPTH)
    parser.add_argument("--group-blind", action="store_true", help="train the tree on the features only")
    parser.add_argument("--stratify", action="store_true")
    parser.add_argument("--output", required=True)
    parser.add_argument("--summary")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fair-calibrate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="write a synthetic dataset")
    _add_common(synth)
    synth.add_argument("--n", type=int, default=config.SYNTH_N)
    synth.add_argument("--p-group-b", type=float, default=0.5)
    synth.add_argument("--noise-sd", type=float, default=5.0)
    synth.add_argument("--output", required=True)
    synth.set_defaults(handler=cmd_synth)

    split_parser = sub.add_parser("split", help="seeded 60/20/20 split into train/calibration/test")
    _add_common(split_parser)
    split_parser.add_argument("--input", required=True)
    _add_columns(split_parser)
    split_parser.add_argument("--stratify", action="store_true")
    split_parser.add_argument("--output", required=True, help="output directory")
    split_parser.set_defaults(handler=cmd_split)

    train = sub.add_parser("train", help="fit the base regression tree")
    _add_common(train)
    train.add_argument("--input", required=True)
    _add_columns(train)
    train.add_argument("--min-samples-leaf", type=int, default=config.TREE_MIN_SAMPLES_LEAF)
    train.add_argument("--max-depth", type=int, default=config.TREE_MAX_DEPTH)
    train.add_argument("--group-blind", action="store_true", help="train on the features only")
    train.add_argument("--output", required=True)
    train.set_defaults(handler=cmd_train)

    calib = sub.add_parser("calibrate", help="estimate the multipliers and write a fair predictor")
    _add_common(calib)
    calib.add_argument("--input", required=True)
    _add_columns(calib, target=False)
    calib.add_argument("--model")
    calib.add_argument("--pred-col")
    _add_calibration(calib)
    calib.add_argument("--spec-variant", choices=[v.value for v in Variant], default="lz")
    source = calib.add_mutually_exclusive_group()
    source.add_argument("--thresholds")
    source.add_argument("--prescription", help="'global' or 'target:<group>'")
    calib.add_argument("--inner-m", type=int, default=9)
    calib.add_argument("--output", required=True)
    calib.add_argument("--report")
    calib.set_defaults(handler=cmd_calibrate)

    predict = sub.add_parser("predict", help="apply a fair predictor")
    _add_common(predict)
    predict.add_argument("--input", required=True)
    _add_columns(predict)
    predict.add_argument("--model")
    predict.add_argument("--pred-col")
    predict.add_argument("--predictor", required=True)
    predict.add_argument("--output", required=True)
    predict.set_defaults(handler=cmd_predict)

    evaluate_parser = sub.add_parser("evaluate", help="report metrics of a predictions file")
    _add_common(evaluate_parser)
    evaluate_parser.add_argument("--input", required=True)
    evaluate_parser.add_argument("--predictor", required=True)
    evaluate_parser.add_argument("--output", required=True)
    evaluate_parser.add_argument("--csv-row")
    evaluate_parser.set_defaults(handler=cmd_evaluate)

    protocol = sub.add_parser("protocol", help="compare methods across seeds")
    _add_common(protocol)
    protocol.add_argument("--input")
    _add_columns(protocol)
    protocol.add_argument("--methods", help=f"comma-separated subset of {[m.value for m in Method]}")
    _add_experiment(protocol)
    protocol.set_defaults(handler=cmd_protocol)

    sweep = sub.add_parser("sweep", help="fairness/accuracy trade-off over constraint globality")
    _add_common(sweep)
    sweep.add_argument("--m-values", default="1,3")
    _add_experiment(sweep)
    sweep.set_defaults(handler=cmd_sweep)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # usage errors are input errors; --help exits 0
        return EXIT_OK if e.code in (0, None) else EXIT_INPUT_ERROR
    logger.write_header(args.command)
    try:
        return args.handler(args)
    except (ValueError, OSError) as e:
        # FairCalibrationError and pydantic.ValidationError are both ValueErrors
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
