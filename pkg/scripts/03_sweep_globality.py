"""Globality sweep - fairness/accuracy trade-off as the number of Z-DP thresholds grows"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import DEFAULT_SEEDS, FAIRCAL_SEED, OUTPUTS_DIR, SYNTH_N, validate_config
from src.data import SyntheticConfig
from src.experiments import (
    ExperimentConfig,
    aggregate,
    discretization_gap,
    sweep_globality,
    write_summary_json,
    write_sweep_csv,
)
from src.utils import logger

M_VALUES = [1, 3, 7, 15]
K_VALUES = [21, 51, 101, 201]


def run_sweep():
    """Z-fair at increasing M, strong DP, and the risk gap of coarser grids"""
    validate_config()
    seeds = list(range(FAIRCAL_SEED, FAIRCAL_SEED + DEFAULT_SEEDS))
    synthetic = SyntheticConfig(n=SYNTH_N)
    cfg = ExperimentConfig()

    points = sweep_globality(synthetic, M_VALUES, seeds, cfg)
    write_sweep_csv(points, OUTPUTS_DIR / "sweep_globality.csv")
    write_summary_json(points, OUTPUTS_DIR / "sweep_globality_summary.json")

    logger.info("\nTrade-off:")
    for row in aggregate(points):
        logger.info(f"  {row['descriptor']:<16} rmse_price={row['rmse_price_mean']:.3f} ks={row['ks_mean']:.3f}")

    gaps = discretization_gap(synthetic, K_VALUES, seeds[:3], cfg)
    logger.info("\nRisk gap of the (l, Z)-fair predictor by grid size:")
    for k, gap in gaps.items():
        logger.info(f"  K={k:<4} gap={gap:.4f}")


if __name__ == "__main__":
    run_sweep()
