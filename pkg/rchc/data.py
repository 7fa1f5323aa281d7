# rchc/data.py

"""Synthetic domain-shifted datasets, quarter-turn rotations and CSV ingestion.

CSV convention: one sample per line, comma-separated float features,
optionally followed by an integer class label in the last column. No header.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ExportError, ParseError

logger = logging.getLogger(__name__)

# --- Configuration ---

SOURCE = "source"
TARGET = "target"

DEFAULT_N_SOURCE = 600
DEFAULT_N_TARGET = 600
DEFAULT_BLOB_RADIUS = 4.0
DEFAULT_BLOB_STD = 0.8
DEFAULT_GRID_SIZE = 8
RATIO_TOLERANCE = 1e-6


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # [n, in_dim]
    labels: np.ndarray | None
    domain_tag: str
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ContractError(f"inputs must be [n, in_dim], got {self.inputs.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise ContractError(f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} samples")
            if self.labels.size and self.labels.min() < 0:
                raise ContractError("labels must be non-negative class indices")
        if self.grid_shape is not None and int(np.prod(self.grid_shape)) != self.inputs.shape[1]:
            raise ContractError(f"grid {self.grid_shape} does not match input width {self.inputs.shape[1]}")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def in_dim(self):
        return self.inputs.shape[1]

    @property
    def has_labels(self):
        return self.labels is not None

    def without_labels(self):
        """The view handed to the adaptation loop."""
        return replace(self, labels=None)


@dataclass
class RotationBatch:
    original: np.ndarray  # [batch, H*W]
    rotated: np.ndarray  # [batch, H*W]
    rotation_label: np.ndarray  # quarter-turns in [0, 4)


# --- Blobs ---

def _class_means(num_classes, dim, radius):
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _rotation_matrix(dim, degrees):
    theta = np.deg2rad(degrees)
    matrix = np.eye(dim)
    matrix[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    return matrix


def _allocate(n, ratios):
    """Per-class counts summing to n, largest remainders first (ties to lower index)."""
    raw = np.asarray(ratios) * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _sample_blobs(rng, means, std, counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    points = means[labels] + rng.normal(0.0, std, size=(labels.size, means.shape[1]))
    order = rng.permutation(labels.size)
    return points[order], labels[order]


def gen_shifted_blobs(
    seed,
    num_classes,
    n_source=DEFAULT_N_SOURCE,
    n_target=DEFAULT_N_TARGET,
    translation=(0.0, 0.0),
    rotation_deg=0.0,
    class_ratios=None,
    dim=2,
    radius=DEFAULT_BLOB_RADIUS,
    std=DEFAULT_BLOB_STD,
):
    """Gaussian blobs on a circle; the target is rotated about the origin, then translated.

    Source classes are balanced; target classes follow `class_ratios`.
    """
    if num_classes < 2:
        raise ConfigError("num_classes", f"needs at least 2 classes, got {num_classes}")
    if dim < 2:
        raise ConfigError("blob_dim", f"blobs live in at least 2 dimensions, got {dim}")
    translation = np.zeros(dim) if translation is None or len(translation) == 0 else np.asarray(translation, float)
    if translation.shape != (dim,):
        raise ConfigError("shift_translation", f"expected {dim} components, got {translation.size}")
    if class_ratios is None or len(class_ratios) == 0:
        class_ratios = np.full(num_classes, 1.0 / num_classes)
    class_ratios = np.asarray(class_ratios, dtype=np.float64)
    if class_ratios.shape != (num_classes,) or np.any(class_ratios < 0) or abs(class_ratios.sum() - 1.0) > RATIO_TOLERANCE:
        raise ConfigError("target_class_ratios", f"need {num_classes} non-negative ratios summing to 1")

    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, radius)
    source_x, source_y = _sample_blobs(rng, means, std, _allocate(n_source, np.full(num_classes, 1.0 / num_classes)))
    target_x, target_y = _sample_blobs(rng, means, std, _allocate(n_target, class_ratios))
    target_x = target_x @ _rotation_matrix(dim, rotation_deg).T + translation
    return (
        LabeledDataset(source_x, source_y, SOURCE),
        LabeledDataset(target_x, target_y, TARGET),
    )


# --- Oriented bars ---

def _bar_mask(size, kind, offset, thickness):
    mask = np.zeros((size, size), dtype=bool)
    rows, cols = np.indices((size, size))
    for t in range(thickness):
        if kind == "horizontal":
            mask |= rows == offset + t
        else:
            mask |= cols - rows == offset + t
    return mask


# (kind, offset): horizontal bars start at row `offset`, diagonals run along
# col - row == offset. For stroke thickness up to 2 on an 8x8 grid no
# prototype is a quarter-turn of another and none is symmetric under a
# half-turn, so a rotated image identifies its quarter-turn count.
BAR_PROTOTYPES = (
    ("horizontal", 1),
    ("diagonal", 2),
    ("diagonal", 4),
    ("horizontal", 2),
    ("diagonal", 1),
    ("diagonal", 3),
    ("horizontal", 0),
    ("diagonal", 5),
)


def bar_prototypes(num_classes, size=DEFAULT_GRID_SIZE, thickness=1):
    if num_classes > len(BAR_PROTOTYPES):
        raise ConfigError("num_classes", f"at most {len(BAR_PROTOTYPES)} bar classes are available")
    return np.stack([
        _bar_mask(size, kind, offset, thickness).astype(np.float64)
        for kind, offset in BAR_PROTOTYPES[:num_classes]
    ])


def gen_bar_images(seed, num_classes, n, thickness=1, noise=0.0, size=DEFAULT_GRID_SIZE, domain_tag=SOURCE):
    """Balanced H x W bar images, flattened; domains differ by stroke thickness and noise."""
    prototypes = bar_prototypes(num_classes, size, thickness)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), _allocate(n, np.full(num_classes, 1.0 / num_classes)))
    labels = labels[rng.permutation(n)]
    images = prototypes[labels] + noise * rng.normal(size=(n, size, size))
    return LabeledDataset(images.reshape(n, size * size), labels, domain_tag, grid_shape=(size, size))


# --- Rotations ---

def rotate90(grid, quarter_turns):
    """Counter-clockwise rotation by exact index permutation: [[a, b], [c, d]] -> [[b, d], [a, c]]."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ContractError(f"rotate90 needs a square grid, got {grid.shape}")
    if quarter_turns not in (0, 1, 2, 3):
        raise ContractError(f"quarter_turns must be 0..3, got {quarter_turns}")
    return np.rot90(grid, quarter_turns).copy()


def make_rotation_batch(inputs, grid_shape, rng):
    """Pair every flattened image with a copy rotated by a uniformly drawn quarter-turn count."""
    if grid_shape is None:
        raise ContractError("rotation batches need image inputs with a grid shape")
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = rng.integers(0, 4, size=inputs.shape[0])
    rotated = np.stack([
        rotate90(image.reshape(grid_shape), int(k)).reshape(-1) for image, k in zip(inputs, labels)
    ]) if inputs.shape[0] else inputs.copy()
    return RotationBatch(original=inputs, rotated=rotated, rotation_label=labels)


# --- CSV ---

def load_csv_dataset(path, has_labels, domain_tag=TARGET, grid_shape=None):
    """Read the CSV convention above; width is fixed by the first row."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path, newline="") as handle:
        for line_no, fields in enumerate(csv.reader(handle), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if width is None:
                width = len(fields)
                if has_labels and width < 2:
                    raise ParseError(path, "a labeled row needs at least one feature and a label", line_no)
            elif len(fields) != width:
                raise ParseError(path, f"expected {width} fields, found {len(fields)}", line_no)
            try:
                values = [float(f) for f in fields]
            except ValueError:
                bad = next(f for f in fields if not _is_float(f))
                raise ParseError(path, f"non-numeric field '{bad.strip()}'", line_no) from None
            if not np.isfinite(values).all():
                bad = next(f for f, v in zip(fields, values) if not np.isfinite(v))
                raise ParseError(path, f"non-finite field '{bad.strip()}'", line_no)
            if has_labels:
                label = values.pop()
                if not label.is_integer():
                    raise ParseError(path, f"label '{fields[-1].strip()}' is not an integer", line_no)
                labels.append(int(label))
            rows.append(values)
    if not rows:
        raise ParseError(path, "file contains no samples")
    try:
        return LabeledDataset(np.array(rows), np.array(labels) if has_labels else None, domain_tag, grid_shape)
    except ContractError as e:
        raise ParseError(path, str(e)) from e


def export_csv_dataset(dataset, path):
    """Inverse of load_csv_dataset; 17 significant digits keep the round trip exact."""
    path = Path(path)
    fmt = ["%.17g"] * dataset.in_dim
    rows = dataset.inputs
    if dataset.has_labels:
        rows = np.column_stack([rows, dataset.labels])
        fmt.append("%d")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, rows, delimiter=",", fmt=fmt)
    except OSError as e:
        raise ExportError(f"could not write dataset {path}: {e}") from e
    logger.info(f"Wrote {len(dataset)} {dataset.domain_tag} samples to {path}")
    return path


def _is_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def write_table(path, rows, header, fmt):
    """Comma-separated table with a single header line."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=fmt)
    except OSError as e:
        raise ExportError(f"could not write {path}: {e}") from e
    return path
