"""Run all experiment scripts in sequence"""
import sys
from pathlib import Path
import subprocess
import time

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.utils import logger

SCRIPTS = [
    ("01_generate_synthetic.py", "Synthetic Datasets"),
    ("02_run_protocols.py", "Method Comparison"),
    ("03_sweep_globality.py", "Globality Sweep"),
]


def run_script(script_path: Path, description: str) -> float:
    """Run one script; returns its duration, raises CalledProcessError on failure"""
    logger.info(f"\nRunning: {description}")
    start_time = time.time()
    # output is streamed, the experiment scripts log their progress
    subprocess.run([sys.executable, str(script_path)], check=True)
    elapsed = time.time() - start_time
    logger.info(f"Completed in {elapsed:.2f}s")
    return elapsed


def main() -> int:
    """Run all experiment scripts"""
    scripts_dir = Path(__file__).parent
    results = []

    for filename, description in SCRIPTS:
        script_path = scripts_dir / filename
        if not script_path.exists():
            logger.error(f"Script not found: {script_path}")
            results.append((description, None))
            continue
        try:
            results.append((description, run_script(script_path, description)))
        except subprocess.CalledProcessError as e:
            logger.error(f"Failed: {description} (exit code {e.returncode})")
            results.append((description, None))

    logger.info("\nExecution Summary:")
    for description, elapsed in results:
        status = "FAILED" if elapsed is None else f"{elapsed:7.1f}s"
        logger.info(f"  [{status}] {description}")

    failed = sum(1 for _, elapsed in results if elapsed is None)
    if failed == 0:
        logger.info("Check outputs/ directory for results")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
