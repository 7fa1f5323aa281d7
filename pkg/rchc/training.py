# rchc/training.py

"""Source training, target adaptation (SHOT or RCHC), evaluation and exports.

Adaptation refreshes pseudo-labels and uncertainty ratios at the start of
every epoch from an evaluation-mode pass over the whole target set. Within
the epoch each mini-batch compares its live hypotheses against those frozen
pseudo-labels; conflicted samples with a ratio under the threshold have their
entropy term sign-flipped.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .autodiff import SGD, ParamGroup, no_grad
from .config import config_hash
from .data import (
    SOURCE,
    TARGET,
    gen_bar_images,
    gen_shifted_blobs,
    load_csv_dataset,
    make_rotation_batch,
    write_table,
)
from .errors import ClusteringError, ConfigError, ContractError, StatisticsError
from .losses import (
    LossBreakdown,
    info_entropy_loss,
    label_smoothing_ce,
    pseudo_label_ce,
    rotation_loss,
    signed_entropy_loss,
    total_loss,
)
from .model import (
    classify,
    feature_extract,
    init_model,
    init_target_from_source,
    rotation_classify,
    save_checkpoint,
)
from .pseudo_label import (
    DEFAULT_R_TH,
    conflict_flags,
    generate_pseudo_labels,
    threshold_stats,
    write_pseudo_label_table,
)

logger = logging.getLogger(__name__)

# --- Configuration ---

SIGNIFICANT_DIGITS = 9
DEFAULT_SWEEP_THRESHOLDS = (0.6, 0.65, 0.7)
METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "target_final.npz"

# Independent random streams derived from the run seed.
INIT_STREAM = 0
SHUFFLE_STREAM = 1
ROTATION_STREAM = 2
HEAD_STREAM = 3


def stream(seed, which):
    return np.random.default_rng([seed, which])


def _rounded(value):
    if isinstance(value, dict):
        return {k: _rounded(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_rounded(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return value


def to_json(record):
    """One deterministic JSON line; floats at 9 significant digits, no timestamps."""
    return json.dumps(_rounded(record), separators=(", ", ": "))


# --- Records ---

@dataclass
class Evaluation:
    accuracy: float
    per_class_accuracy: float  # mean of within-class accuracies over present classes
    class_accuracies: list  # None for classes absent from the data
    missing_classes: list = field(default_factory=list)


@dataclass
class MetricsRecord:
    epoch: int
    accuracy: float | None
    per_class_accuracy: float | None
    class_accuracies: list | None
    pseudo_label_accuracy: float | None
    conflict_count: int
    r_th: float
    ratio_median_nonconflict: float | None
    loss_breakdown: LossBreakdown

    def as_record(self):
        record = asdict(self)
        record["loss_breakdown"] = self.loss_breakdown.as_record()
        return record

    def to_json(self):
        return to_json(self.as_record())


# --- Evaluation ---

def forward_dataset(model, inputs):
    """Evaluation-mode (embeddings, probabilities) for a whole dataset."""
    with no_grad():
        emb = feature_extract(model, inputs, training=False)
        probs = ad.softmax(classify(model, emb))
    return emb.embeddings.data, probs.data


def predict(model, inputs):
    return forward_dataset(model, inputs)[1].argmax(axis=1)


def score_predictions(predictions, labels, num_classes):
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ContractError("predictions and labels must be aligned and non-empty")
    if labels.max() >= num_classes:
        raise ContractError(f"label {labels.max()} outside [0, {num_classes})")
    correct = predictions == labels
    class_accuracies, missing = [], []
    for k in range(num_classes):
        members = labels == k
        if not members.any():
            class_accuracies.append(None)
            missing.append(k)
            continue
        class_accuracies.append(float(correct[members].mean()))
    if missing:
        logger.warning(f"Classes {missing} are absent from the evaluation data; excluded from per-class accuracy")
    present = [a for a in class_accuracies if a is not None]
    return Evaluation(
        accuracy=float(correct.mean()),
        per_class_accuracy=float(np.mean(present)),
        class_accuracies=class_accuracies,
        missing_classes=missing,
    )


def evaluate(model, data):
    """Overall and per-class accuracy of argmax predictions."""
    if not data.has_labels:
        raise ContractError(
            "evaluation needs labeled data", hint="Pass a CSV whose last column is the integer class label."
        )
    return score_predictions(predict(model, data.inputs), data.labels, model.num_classes)


# --- Optimization helpers ---

def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _optimizer(model, config, new_layers):
    return SGD(
        [
            ParamGroup("backbone", model.backbone_parameters(), config.lr_backbone),
            ParamGroup("new_layers", new_layers, config.lr_new_layers),
        ],
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def _mean_breakdown(steps):
    if not steps:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0)
    return LossBreakdown(
        l_ent=float(np.mean([s.l_ent for s in steps])),
        l_info=float(np.mean([s.l_info for s in steps])),
        l_ce=float(np.mean([s.l_ce for s in steps])),
        l_rot=float(np.mean([s.l_rot for s in steps])),
        total=float(np.mean([s.total for s in steps])),
        conflict_count=sum(s.conflict_count for s in steps),
        batch_size=sum(s.batch_size for s in steps),
    )


# --- Source stage ---

def train_source(config, source_data, progress=False):
    """Supervised training on labeled source data with label-smoothed cross-entropy."""
    if not source_data.has_labels:
        raise ContractError("source training needs labeled data")
    if source_data.labels.max() >= config.num_classes:
        raise ConfigError("num_classes", f"source labels reach {source_data.labels.max()}")
    model = init_model(
        source_data.in_dim,
        config.num_classes,
        stream(config.seed, INIT_STREAM),
        hidden_width=config.hidden_width,
        hidden_layers=config.hidden_layers,
        embedding_dim=config.embedding_dim,
    )
    new_layers = [p for p in model.new_layer_parameters() if p not in model.rotation_head_parameters()]
    optimizer = _optimizer(model, config, new_layers)
    shuffle = stream(config.seed, SHUFFLE_STREAM)

    epochs = tqdm(range(1, config.source_epochs + 1), desc="Source training", unit=" epoch", disable=not progress)
    for epoch in epochs:
        losses = []
        for idx in _batches(shuffle, len(source_data), config.batch_size):
            optimizer.zero_grad()
            emb = feature_extract(model, source_data.inputs[idx], training=True)
            loss = label_smoothing_ce(classify(model, emb), source_data.labels[idx], config.alpha_smooth)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        logger.info(f"Source epoch {epoch}/{config.source_epochs}: loss {np.mean(losses):.6f}")
    return model


# --- Target stage ---

def _auto_threshold(table, hypotheses, fallback):
    try:
        stats = threshold_stats(table.ratios, table.pseudo_labels == hypotheses)
    except StatisticsError:
        logger.warning(f"No non-conflict samples for automatic threshold; keeping r_th={fallback}")
        return fallback
    logger.info(f"Automatic threshold: median non-conflict ratio {stats.median:.4f} over {stats.count} samples")
    return stats.median


def _adaptation_step(model, optimizer, config, inputs, idx, table, r_th, rotation_rng, grid_shape):
    optimizer.zero_grad()
    batch = inputs[idx]
    emb = feature_extract(model, batch, training=True, sample_ids=idx)
    logits = classify(model, emb)
    probs = ad.softmax(logits)

    pseudo = table.pseudo_labels[idx]
    flags = conflict_flags(pseudo, logits.data.argmax(axis=1), table.ratios[idx], r_th)
    delta = np.where(flags, -1.0, 1.0)

    l_ent = signed_entropy_loss(probs, delta)
    l_info = info_entropy_loss(probs)
    l_ce = pseudo_label_ce(logits, pseudo)
    if config.rotation_enabled:
        rotation = make_rotation_batch(batch, grid_shape, rotation_rng)
        rotated = feature_extract(model, rotation.rotated, training=True)
        rot_logits = rotation_classify(model, emb.embeddings, rotated.embeddings)
        l_rot, beta = rotation_loss(rot_logits, rotation.rotation_label), config.beta_rot
    else:
        l_rot, beta = 0.0, 0.0

    breakdown = total_loss(
        l_ent, l_info, l_ce, l_rot, config.alpha_ce, beta,
        conflict_count=int(flags.sum()), batch_size=len(idx),
    )
    breakdown.graph.backward()
    optimizer.step()
    return breakdown


def adapt_target(
    config,
    source_model,
    target_data,
    ground_truth=None,
    metrics_path=None,
    checkpoint_dir=None,
    snapshot_dir=None,
    on_step=None,
    progress=False,
):
    """Adapt a copy of `source_model` to unlabeled target data.

    `ground_truth` is seen only by the per-epoch evaluator. Returns the
    adapted model and one MetricsRecord per epoch; when `metrics_path` is set
    each record is appended to it as a JSON line.
    """
    target = target_data.without_labels()
    if target.in_dim != source_model.in_dim:
        raise ContractError(
            f"target inputs have {target.in_dim} features, source model expects {source_model.in_dim}",
            hint="Use the dataset settings the source checkpoint was trained with.",
        )
    if (source_model.num_classes, source_model.embedding_dim) != (config.num_classes, config.embedding_dim):
        raise ContractError(
            f"source model has K={source_model.num_classes}, d={source_model.embedding_dim}; "
            f"config has K={config.num_classes}, d={config.embedding_dim}",
            hint="Set num_classes and embedding_dim to the values the source checkpoint was trained with.",
        )
    if config.rotation_enabled and target.grid_shape is None:
        raise ConfigError("rotation_enabled", "target data has no image grid to rotate")

    model = init_target_from_source(source_model, stream(config.seed, HEAD_STREAM))
    new_layers = [p for p in model.new_layer_parameters() if p not in model.classifier_parameters()]
    optimizer = _optimizer(model, config, new_layers)
    shuffle_rng = stream(config.seed, SHUFFLE_STREAM)
    rotation_rng = stream(config.seed, ROTATION_STREAM)
    inputs = target.inputs
    r_th = config.effective_r_th
    records = []

    epochs = tqdm(range(1, config.epochs + 1), desc=f"Adapting ({config.mode})", unit=" epoch", disable=not progress)
    for epoch in epochs:
        embeddings, probs = forward_dataset(model, inputs)
        try:
            table, _ = generate_pseudo_labels(embeddings, probs, epoch=epoch)
        except ClusteringError as e:
            raise ClusteringError(str(e), epoch=epoch, hint=e.hint) from e
        hypotheses = probs.argmax(axis=1)
        if epoch == 1 and config.r_th_auto and config.mode == "rchc":
            r_th = _auto_threshold(table, hypotheses, r_th)
        flags = conflict_flags(table.pseudo_labels, hypotheses, table.ratios, r_th)
        agree = table.pseudo_labels == hypotheses
        if snapshot_dir is not None:
            write_pseudo_label_table(table, flags, Path(snapshot_dir) / f"pseudo_labels_epoch_{epoch}.csv")

        steps = []
        for idx in _batches(shuffle_rng, len(target), config.batch_size):
            breakdown = _adaptation_step(
                model, optimizer, config, inputs, idx, table, r_th, rotation_rng, target.grid_shape
            )
            logger.debug(f"Epoch {epoch} step {len(steps) + 1}: total {breakdown.total:.6f}")
            steps.append(breakdown)
            if on_step is not None:
                on_step(breakdown)

        record = MetricsRecord(
            epoch=epoch,
            accuracy=None,
            per_class_accuracy=None,
            class_accuracies=None,
            pseudo_label_accuracy=None,
            conflict_count=int(flags.sum()),
            r_th=float(r_th),
            ratio_median_nonconflict=float(np.median(table.ratios[agree])) if agree.any() else None,
            loss_breakdown=_mean_breakdown(steps),
        )
        if ground_truth is not None:
            result = score_predictions(predict(model, inputs), ground_truth, model.num_classes)
            record.accuracy = result.accuracy
            record.per_class_accuracy = result.per_class_accuracy
            record.class_accuracies = result.class_accuracies
            record.pseudo_label_accuracy = float(np.mean(table.pseudo_labels == np.asarray(ground_truth)))
        records.append(record)

        if metrics_path is not None:
            append_metrics(metrics_path, record)
        if checkpoint_dir is not None and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"target_epoch_{epoch}.npz", config_hash(config))
        accuracy = "n/a" if record.accuracy is None else f"{record.accuracy:.4f}"
        logger.info(
            f"Epoch {epoch}/{config.epochs}: conflicts {record.conflict_count}, "
            f"loss {record.loss_breakdown.total:.6f}, accuracy {accuracy}"
        )
    return model, records


def append_metrics(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as handle:
        handle.write(record.to_json() + "\n")


def read_metrics(path):
    with open(path) as handle:
        return [json.loads(line) for line in handle if line.strip()]


# --- Multi-seed runs ---

@dataclass
class SeedRun:
    seed: int
    source_only: Evaluation | None
    adapted: Evaluation | None
    records: list
    model: object = field(default=None, repr=False)

    def final_metrics(self):
        metrics = {}
        if self.source_only is not None:
            metrics["source_only_accuracy"] = self.source_only.accuracy
            metrics["source_only_per_class_accuracy"] = self.source_only.per_class_accuracy
        if self.adapted is not None:
            metrics["accuracy"] = self.adapted.accuracy
            metrics["per_class_accuracy"] = self.adapted.per_class_accuracy
        if self.records:
            metrics["first_conflict_count"] = self.records[0].conflict_count
            metrics["final_conflict_count"] = self.records[-1].conflict_count
        return metrics


@dataclass
class SeedSummary:
    seeds: list
    runs: list
    mean: dict
    std: dict

    def as_record(self):
        return {
            "seeds": self.seeds,
            "mean": self.mean,
            "std": self.std,
            "runs": [{"seed": run.seed, **run.final_metrics()} for run in self.runs],
        }


def _aggregate(runs):
    per_seed = [run.final_metrics() for run in runs]
    keys = [k for k in per_seed[0] if all(k in m for m in per_seed)]
    mean = {k: float(np.mean([m[k] for m in per_seed])) for k in keys}
    std = {k: float(np.std([m[k] for m in per_seed])) for k in keys}
    return mean, std


def run_seeds(config, seeds=None, source_data=None, target_data=None, source_models=None, output_dir=None,
              progress=False):
    """Source training (unless `source_models` maps seed -> model) and adaptation per seed.

    Seeds run in sorted order so the aggregate does not depend on the order given.
    With `output_dir`, each seed writes seed_<s>/metrics.jsonl and seed_<s>/target_final.npz.
    """
    seeds = sorted(int(s) for s in (seeds if seeds is not None else config.seeds))
    if not seeds:
        raise ConfigError("seeds", "at least one seed is required")
    if target_data is None or (source_data is None and source_models is None):
        source_data, target_data = build_datasets(config)
    ground_truth = target_data.labels

    runs = []
    for seed in tqdm(seeds, desc="Seeds", unit=" seed", disable=not progress):
        run_config = config.with_overrides(seed=seed)
        if source_models is not None and seed in source_models:
            source_model = source_models[seed]
        else:
            source_model = train_source(run_config, source_data, progress=progress)
        source_only = evaluate(source_model, target_data) if target_data.has_labels else None

        seed_dir = metrics_path = None
        if output_dir is not None:
            seed_dir = Path(output_dir) / f"seed_{seed}"
            metrics_path = seed_dir / METRICS_FILE
            seed_dir.mkdir(parents=True, exist_ok=True)
            metrics_path.unlink(missing_ok=True)

        model, records = adapt_target(
            run_config, source_model, target_data, ground_truth=ground_truth,
            metrics_path=metrics_path, checkpoint_dir=seed_dir, progress=progress,
        )
        if seed_dir is not None:
            save_checkpoint(model, seed_dir / FINAL_CHECKPOINT, config_hash(run_config))
        adapted = evaluate(model, target_data) if target_data.has_labels else None
        if adapted is not None:
            logger.info(
                f"Seed {seed}: source-only {source_only.accuracy:.4f} -> adapted {adapted.accuracy:.4f} "
                f"(per-class {adapted.per_class_accuracy:.4f})"
            )
        runs.append(SeedRun(seed=seed, source_only=source_only, adapted=adapted, records=records, model=model))

    mean, std = _aggregate(runs)
    return SeedSummary(seeds=seeds, runs=runs, mean=mean, std=std)


def sweep_thresholds(config, thresholds=DEFAULT_SWEEP_THRESHOLDS, seeds=None, source_data=None, target_data=None,
                     progress=False):
    """RCHC mean final metrics per threshold; source models are trained once per seed and shared."""
    seeds = sorted(int(s) for s in (seeds if seeds is not None else config.seeds))
    if source_data is None or target_data is None:
        source_data, target_data = build_datasets(config)
    source_models = {
        seed: train_source(config.with_overrides(seed=seed), source_data, progress=progress) for seed in seeds
    }
    results = {}
    for r_th in thresholds:
        run_config = config.with_overrides(mode="rchc", r_th=float(r_th), r_th_auto=False)
        results[float(r_th)] = run_seeds(
            run_config, seeds, source_data, target_data, source_models=source_models, progress=progress
        )
        logger.info(f"r_th={r_th}: mean accuracy {results[float(r_th)].mean.get('accuracy', float('nan')):.4f}")
    return results


# --- Datasets ---

def build_datasets(config):
    """(source, target) datasets described by the config; source is None for csv without source_csv."""
    if config.dataset == "blobs":
        return gen_shifted_blobs(
            config.data_seed,
            config.num_classes,
            n_source=config.n_source,
            n_target=config.n_target,
            translation=config.shift_translation,
            rotation_deg=config.shift_rotation_deg,
            class_ratios=config.target_class_ratios,
            dim=config.blob_dim,
            radius=config.blob_radius,
            std=config.blob_std,
        )
    if config.dataset == "bars":
        source = gen_bar_images(
            config.data_seed, config.num_classes, config.n_source,
            thickness=config.source_thickness, noise=config.source_noise, size=config.grid_size, domain_tag=SOURCE,
        )
        target = gen_bar_images(
            config.data_seed + 1, config.num_classes, config.n_target,
            thickness=config.target_thickness, noise=config.target_noise, size=config.grid_size, domain_tag=TARGET,
        )
        return source, target
    grid = (config.grid_size, config.grid_size) if config.rotation_enabled else None
    source = load_csv_dataset(config.source_csv, True, SOURCE, grid) if config.source_csv else None
    target = load_csv_dataset(config.target_csv, config.target_csv_labeled, TARGET, grid)
    return source, target


# --- Exports ---

def embedding_header(embedding_dim):
    columns = ["sample_id", *(f"e_{i}" for i in range(embedding_dim))]
    return ",".join(columns + ["pseudo_label", "hypothesis", "ratio", "conflict_flag", "true_label"])


def label_state(model, inputs, r_th):
    """(embeddings, table, hypotheses, flags) for a model on a full dataset."""
    embeddings, probs = forward_dataset(model, inputs)
    table, _ = generate_pseudo_labels(embeddings, probs)
    hypotheses = probs.argmax(axis=1)
    flags = conflict_flags(table.pseudo_labels, hypotheses, table.ratios, r_th)
    return embeddings, table, hypotheses, flags


def export_embeddings(model, data, path, r_th=DEFAULT_R_TH):
    """One row per sample; true_label is -1 when the data carries no labels."""
    embeddings, table, hypotheses, flags = label_state(model, data.inputs, r_th)
    true_labels = data.labels if data.has_labels else np.full(len(data), -1)
    rows = np.column_stack([
        table.sample_ids, embeddings, table.pseudo_labels, hypotheses, table.ratios, flags.astype(np.int64),
        true_labels,
    ])
    d = embeddings.shape[1]
    fmt = ["%d"] + ["%.9g"] * d + ["%d", "%d", "%.9g", "%d", "%d"]
    write_table(path, rows, embedding_header(d), fmt)
    logger.info(f"Wrote {len(data)} embeddings ({flags.sum()} conflicted) to {path}")
    return Path(path)
