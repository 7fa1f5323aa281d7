# rchc/run_pipeline.py

"""Run the whole experiment as a sequence of CLI stages, stopping at the first failure.

    python -m rchc.run_pipeline --config configs/blobs.env --work-dir runs/blobs
"""

import argparse
import os
import subprocess
import sys
from pathlib import Path

from .config import load_config
from .training import FINAL_CHECKPOINT

# --- Configuration ---

CLI_MODULE = "rchc.cli"


def build_stages(config_path, work_dir, first_seed):
    """(name, cli arguments) in execution order."""
    work = Path(work_dir)
    data, source = work / "data", work / "source"
    shot, rchc = work / "shot", work / "rchc"
    checkpoint = source / "source.npz"
    adapted = rchc / f"seed_{first_seed}" / FINAL_CHECKPOINT
    target_csv = data / "target.csv"
    config = ["--config", str(config_path)]
    return [
        ("gen-data", ["gen-data", *config, "--out-dir", str(data)]),
        ("train-source", ["train-source", *config, "--out-dir", str(source)]),
        ("eval-source", ["eval", "--checkpoint", str(checkpoint), "--data", str(target_csv),
                         "--out", str(source / "target_eval.json")]),
        ("adapt-shot", ["adapt", *config, "--mode", "shot", "--source-checkpoint", str(checkpoint),
                        "--out-dir", str(shot)]),
        ("adapt-rchc", ["adapt", *config, "--mode", "rchc", "--source-checkpoint", str(checkpoint),
                        "--out-dir", str(rchc)]),
        ("threshold-stats", ["threshold-stats", "--checkpoint", str(adapted), "--data", str(target_csv),
                             "--has-labels", "--out", str(rchc / "ratio_histogram.csv")]),
        ("export-embeddings", ["export-embeddings", "--checkpoint", str(adapted), "--data", str(target_csv),
                               "--has-labels", "--out", str(rchc / "embeddings.csv")]),
    ]


def run_stages(stages, cwd=None):
    """Run each stage with the current interpreter; return the first non-zero exit code, else 0."""
    print("Starting pipeline...")
    for name, arguments in stages:
        print(f"--- Running {name} ---")
        result = subprocess.run(
            [sys.executable, "-m", CLI_MODULE, *arguments],
            capture_output=True,
            text=True,
            env=os.environ,
            cwd=cwd,
        )
        if result.stdout:
            print(result.stdout)
        # tqdm progress and hints arrive on stderr
        if result.stderr:
            print(result.stderr, file=sys.stderr)
        if result.returncode != 0:
            print(f"Error running {name}: return code {result.returncode}", file=sys.stderr)
            print("Stopping execution due to error.", file=sys.stderr)
            return result.returncode
        print(f"--- Finished {name} ---")
    print("--- All pipeline stages completed successfully! ---")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate data, train, adapt (SHOT and RCHC) and export.")
    parser.add_argument("--config", required=True, help="Run configuration file.")
    parser.add_argument("--work-dir", required=True, help="Directory receiving every stage's outputs.")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    return run_stages(build_stages(args.config, args.work_dir, min(config.seeds)))


if __name__ == "__main__":
    sys.exit(main())
