"""Synthetic dataset generation - writes one CSV per seed and a group summary"""
import sys
from pathlib import Path
import csv

sys.path.insert(0, str(Path(__file__).parent.parent))

import numpy as np

from src.config import DATA_DIR, DEFAULT_SEEDS, FAIRCAL_SEED, OUTPUTS_DIR, SYNTH_N, validate_config
from src.data import SyntheticConfig, generate_synthetic, write_csv
from src.utils import logger


def generate_datasets():
    """Generate the synthetic datasets used by the protocol scripts"""
    validate_config()
    logger.info("Generating synthetic datasets...")

    synthetic_dir = DATA_DIR / "synthetic"
    summary_rows = []

    for seed in range(FAIRCAL_SEED, FAIRCAL_SEED + DEFAULT_SEEDS):
        dataset = generate_synthetic(SyntheticConfig(n=SYNTH_N, seed=seed))
        path = synthetic_dir / f"synthetic_seed{seed:03d}.csv"
        write_csv(dataset, path)

        for label in dataset.group_labels:
            targets = dataset.targets[dataset.groups == label]
            summary_rows.append({
                'seed': seed,
                'group': label,
                'n': targets.size,
                'y_mean': f"{np.mean(targets):.4f}",
                'y_sd': f"{np.std(targets, ddof=1):.4f}",
            })
        logger.info(f"Saved: {path}")

    summary_path = OUTPUTS_DIR / "synthetic_summary.csv"
    with open(summary_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=['seed', 'group', 'n', 'y_mean', 'y_sd'])
        writer.writeheader()
        writer.writerows(summary_rows)

    logger.info(f"Saved: {summary_path}")


if __name__ == "__main__":
    generate_datasets()
