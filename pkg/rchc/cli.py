# rchc/cli.py

"""Command-line entry point.

    rchc gen-data          --config run.env --out-dir data/
    rchc train-source      --config run.env --out-dir runs/source
    rchc adapt             --config run.env --source-checkpoint runs/source/source.npz --out-dir runs/rchc
    rchc eval              --checkpoint model.npz --data target.csv
    rchc threshold-stats   --checkpoint model.npz --data target.csv --out histogram.csv
    rchc export-embeddings --checkpoint model.npz --data target.csv --out embeddings.csv
    rchc sweep-thresholds  --config run.env --out-dir runs/sweep

Every config key can be overridden with a flag of the same name
(--r-th 0.6, --seeds 2019,2020). Flags beat RCHC_* environment variables,
which beat the config file.
"""

import argparse
import json
import logging
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dotenv import load_dotenv

from .config import config_hash, field_names, load_config, save_config
from .data import export_csv_dataset, load_csv_dataset
from .errors import ConfigError, ParseError, RCHCError
from .model import load_checkpoint, save_checkpoint
from .pseudo_label import DEFAULT_R_TH, threshold_stats, write_histogram
from .training import (
    DEFAULT_SWEEP_THRESHOLDS,
    build_datasets,
    evaluate,
    export_embeddings,
    label_state,
    run_seeds,
    sweep_thresholds,
    to_json,
    train_source,
)

# --- Configuration ---

load_dotenv()

DEFAULT_LOG_DIR = "logs"
LOG_FILE = "rchc.log"
MANIFEST_FILE = "manifest.json"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.env"
SOURCE_CHECKPOINT = "source.npz"

logger = logging.getLogger("rchc")


def setup_logging():
    log_dir = Path(os.getenv("RCHC_LOG_DIR", DEFAULT_LOG_DIR))
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_dir / LOG_FILE),
            logging.StreamHandler(sys.stdout),
        ],
    )


# --- Manifest ---

@dataclass
class RunManifest:
    """Everything needed to rerun a command: the merged config, its hash and the data it saw."""

    command: str
    config: dict
    config_hash: str
    mode: str
    seeds: list
    out_dir: str
    datasets: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, command, config, out_dir, datasets=(), **inputs):
        return cls(
            command=command,
            config=config.to_mapping(),
            config_hash=config_hash(config),
            mode=config.mode,
            seeds=list(config.seeds),
            out_dir=str(out_dir),
            datasets=[describe_dataset(d, origin) for d, origin in datasets if d is not None],
            inputs={k: str(v) for k, v in inputs.items() if v is not None},
        )

    def write(self, out_dir):
        path = Path(out_dir) / MANIFEST_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def describe_dataset(data, origin):
    return {
        "domain": data.domain_tag,
        "origin": origin,
        "samples": len(data),
        "in_dim": data.in_dim,
        "labeled": data.has_labels,
        "grid_shape": list(data.grid_shape) if data.grid_shape else None,
    }


def _origin(config, domain):
    if config.dataset == "csv":
        return config.source_csv if domain == "source" else config.target_csv
    return f"{config.dataset}:data_seed={config.data_seed}"


def _load(args):
    overrides = {name: getattr(args, name) for name in field_names() if getattr(args, name, None) is not None}
    config = load_config(args.config, overrides)
    logger.info(f"Loaded config {args.config} (hash {config_hash(config)[:12]}, mode {config.mode})")
    return config


def _write_record(record, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_json(record) + "\n")
    return path


def _labeled_csv(path):
    try:
        return load_csv_dataset(path, has_labels=True)
    except ParseError as e:
        e.hint = "This command needs labels: the last column of every row must be the integer class label."
        raise


# --- Commands ---

def cmd_gen_data(args):
    config = _load(args)
    if config.dataset == "csv":
        raise ConfigError("dataset", "gen-data writes synthetic data; choose blobs or bars")
    out_dir = Path(args.out_dir)
    source, target = build_datasets(config)
    export_csv_dataset(source, out_dir / "source.csv")
    export_csv_dataset(target, out_dir / "target.csv")
    save_config(config, out_dir / CONFIG_FILE)
    RunManifest.for_config(
        "gen-data", config, out_dir, [(source, _origin(config, "source")), (target, _origin(config, "target"))]
    ).write(out_dir)
    return 0


def cmd_train_source(args):
    config = _load(args)
    out_dir = Path(args.out_dir)
    source, _ = build_datasets(config)
    if source is None:
        raise ConfigError("source_csv", "required to train a source model when dataset=csv")
    model = train_source(config, source, progress=True)
    result = evaluate(model, source)
    logger.info(f"Source accuracy {result.accuracy:.4f} (per-class {result.per_class_accuracy:.4f})")
    checkpoint = save_checkpoint(model, out_dir / SOURCE_CHECKPOINT, config_hash(config))
    save_config(config, out_dir / CONFIG_FILE)
    RunManifest.for_config(
        "train-source", config, out_dir, [(source, _origin(config, "source"))], checkpoint=checkpoint
    ).write(out_dir)
    return 0


def cmd_adapt(args):
    config = _load(args)
    out_dir = Path(args.out_dir)
    source, target = build_datasets(config)
    source_models = None
    if args.source_checkpoint:
        model, saved_hash = load_checkpoint(args.source_checkpoint)
        logger.info(f"Source checkpoint {args.source_checkpoint} (config hash {saved_hash[:12] or 'n/a'})")
        source_models = {seed: model for seed in config.seeds}
    elif source is None:
        raise ConfigError("source_csv", "give --source-checkpoint or a labeled source_csv")

    summary = run_seeds(config, config.seeds, source, target, source_models, output_dir=out_dir, progress=True)
    record = {"mode": config.mode, "r_th": config.effective_r_th, **summary.as_record()}
    _write_record(record, out_dir / SUMMARY_FILE)
    save_config(config, out_dir / CONFIG_FILE)
    RunManifest.for_config(
        "adapt", config, out_dir,
        [(source, _origin(config, "source")), (target, _origin(config, "target"))],
        source_checkpoint=args.source_checkpoint,
    ).write(out_dir)
    for key, value in summary.mean.items():
        print(f"{key}: {value:.4f} +/- {summary.std[key]:.4f}")
    return 0


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    data = _labeled_csv(args.data)
    result = evaluate(model, data)
    record = {"samples": len(data), **asdict(result)}
    print(f"Accuracy: {result.accuracy:.4f}")
    print(f"Per-class accuracy: {result.per_class_accuracy:.4f}")
    if args.out:
        _write_record(record, args.out)
    return 0


def cmd_threshold_stats(args):
    model, _ = load_checkpoint(args.checkpoint)
    data = load_csv_dataset(args.data, has_labels=args.has_labels)
    _, table, hypotheses, flags = label_state(model, data.inputs, args.r_th)
    stats = threshold_stats(table.ratios, table.pseudo_labels == hypotheses)
    write_histogram(stats, args.out)
    print(f"Non-conflict samples: {stats.count} of {len(data)}")
    print(f"Conflicted at r_th={args.r_th}: {int(flags.sum())}")
    print(f"Mean ratio: {stats.mean:.4f}")
    print(f"Median ratio: {stats.median:.4f}")
    for start, end, count in zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts):
        print(f"  [{start:.2f}, {end:.2f}) {count}")
    if args.record:
        _write_record(
            {
                "count": stats.count, "mean": stats.mean, "median": stats.median, "counts": stats.counts.tolist(),
                "r_th": args.r_th, "conflict_count": int(flags.sum()),
            },
            args.record,
        )
    return 0


def cmd_export_embeddings(args):
    model, _ = load_checkpoint(args.checkpoint)
    data = load_csv_dataset(args.data, has_labels=args.has_labels)
    export_embeddings(model, data, args.out, r_th=args.r_th)
    return 0


def cmd_sweep_thresholds(args):
    config = _load(args)
    out_dir = Path(args.out_dir)
    thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    source, target = build_datasets(config)
    if source is None:
        raise ConfigError("source_csv", "the sweep trains source models and needs a labeled source_csv")
    results = sweep_thresholds(config, thresholds, config.seeds, source, target, progress=True)
    _write_record({str(t): summary.as_record() for t, summary in results.items()}, out_dir / "sweep.json")
    RunManifest.for_config(
        "sweep-thresholds", config, out_dir,
        [(source, _origin(config, "source")), (target, _origin(config, "target"))],
    ).write(out_dir)
    for r_th, summary in results.items():
        accuracy = summary.mean.get("accuracy")
        print(f"r_th={r_th}: " + ("n/a" if accuracy is None else f"{accuracy:.4f} +/- {summary.std['accuracy']:.4f}"))
    return 0


# --- Parser ---

def _add_config_flags(parser):
    parser.add_argument("--config", required=True, help="Flat KEY=VALUE run configuration file.")
    overrides = parser.add_argument_group("config overrides")
    for name in field_names():
        overrides.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None, metavar="VALUE")


def _add_model_data_flags(parser, with_labels_flag=True):
    parser.add_argument("--checkpoint", required=True, help="Model checkpoint (.npz).")
    parser.add_argument("--data", required=True, help="Dataset CSV.")
    if with_labels_flag:
        parser.add_argument(
            "--has-labels", action="store_true", help="The last CSV column is a class label (default: unlabeled)."
        )
        parser.add_argument(
            "--r-th", type=float, default=DEFAULT_R_TH, help=f"Uncertainty ratio threshold (default: {DEFAULT_R_TH})."
        )


def build_parser():
    parser = argparse.ArgumentParser(prog="rchc", description="Source-free domain adaptation with SHOT and RCHC.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="Write the configured synthetic source/target datasets as CSV.")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser("train-source", help="Train a source model and write its checkpoint.")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_train_source)

    p = commands.add_parser("adapt", help="Adapt to the target domain for every seed.")
    _add_config_flags(p)
    p.add_argument("--source-checkpoint", default=None, help="Reuse this source model for every seed.")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_adapt)

    p = commands.add_parser("eval", help="Overall and per-class accuracy on a labeled CSV.")
    _add_model_data_flags(p, with_labels_flag=False)
    p.add_argument("--out", default=None, help="Also write the result as a JSON record.")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("threshold-stats", help="Uncertainty ratio statistics of non-conflict samples.")
    _add_model_data_flags(p)
    p.add_argument("--out", required=True, help="Histogram CSV.")
    p.add_argument("--record", default=None, help="Also write mean/median/counts as a JSON record.")
    p.set_defaults(handler=cmd_threshold_stats)

    p = commands.add_parser("export-embeddings", help="Per-sample embeddings, pseudo-labels and conflict flags.")
    _add_model_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_export_embeddings)

    p = commands.add_parser("sweep-thresholds", help="RCHC accuracy across several thresholds.")
    _add_config_flags(p)
    p.add_argument("--thresholds", default=",".join(str(t) for t in DEFAULT_SWEEP_THRESHOLDS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_sweep_thresholds)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging()
    start_time = time.time()
    try:
        return args.handler(args)
    except RCHCError as e:
        print(f"Error: {e}", file=sys.stderr)
        if e.hint:
            print(f"Hint: {e.hint}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        print("Hint: Check the path; relative paths resolve against the current directory.", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("Process interrupted by user.", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"An unexpected error occurred: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1
    finally:
        logger.info(f"{args.command} finished in {time.time() - start_time:.2f} seconds")


if __name__ == "__main__":
    sys.exit(main())
