"""Method comparison - unconstrained, (l, Z)-fair, Z-fair, border Z-fair and strong DP"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import DEFAULT_SEEDS, FAIRCAL_SEED, OUTPUTS_DIR, SYNTH_N, validate_config
from src.data import SyntheticConfig
from src.experiments import (
    ExperimentConfig,
    Method,
    Prescription,
    aggregate,
    run_protocol,
    write_summary_json,
    write_sweep_csv,
)
from src.utils import logger


def run_protocols():
    """Run every method under the global and the target prescription"""
    validate_config()
    seeds = list(range(FAIRCAL_SEED, FAIRCAL_SEED + DEFAULT_SEEDS))
    synthetic = SyntheticConfig(n=SYNTH_N)

    for name in ("global", "target:A"):
        cfg = ExperimentConfig(prescription=Prescription.parse(name))
        points = run_protocol(synthetic, list(Method), seeds, cfg)

        tag = name.replace(":", "_")
        write_sweep_csv(points, OUTPUTS_DIR / f"protocol_{tag}.csv")
        write_summary_json(points, OUTPUTS_DIR / f"protocol_{tag}_summary.json")

        logger.info(f"\n{name} prescription:")
        for row in aggregate(points):
            logger.info(
                f"  {row['descriptor']:<16} rmse_price={row['rmse_price_mean']:.3f} "
                f"U={row['unfairness_mean']:.3f} ks={row['ks_mean']:.3f}"
            )


if __name__ == "__main__":
    run_protocols()
