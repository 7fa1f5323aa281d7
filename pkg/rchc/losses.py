# rchc/losses.py

"""Source, information-maximization, pseudo-label, rotation and signed entropy losses.

All losses are batch means of autodiff tensors so their gradients flow back
through the model.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

# --- Configuration ---

DEFAULT_ALPHA_SMOOTH = 0.1
DEFAULT_ALPHA_CE = 0.3
DEFAULT_BETA_ROT = 0.6
ROW_SUM_TOLERANCE = 1e-6


@dataclass
class LossBreakdown:
    l_ent: float
    l_info: float
    l_ce: float
    l_rot: float
    total: float
    conflict_count: int
    batch_size: int
    graph: Tensor = field(default=None, repr=False, compare=False)

    def as_record(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "graph"}


def _labels(labels, batch, num_classes, what):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ContractError(f"{what}: expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"{what}: labels must be integer class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"{what}: labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


def _one_hot(labels, num_classes):
    return np.eye(num_classes)[labels]


def _soft_cross_entropy(logits, targets):
    log_probs = ad.log(ad.softmax(logits))
    return -ad.mean(ad.sum(log_probs * Tensor(targets), axis=1))


def label_smoothing_ce(logits, labels, alpha_smooth=DEFAULT_ALPHA_SMOOTH):
    """Cross-entropy against q_k = alpha/K + (1 - alpha) * onehot_k."""
    if not 0.0 <= alpha_smooth < 1.0:
        raise ContractError(f"alpha_smooth must lie in [0, 1), got {alpha_smooth}")
    batch, num_classes = logits.shape
    labels = _labels(labels, batch, num_classes, "label_smoothing_ce")
    targets = alpha_smooth / num_classes + (1.0 - alpha_smooth) * _one_hot(labels, num_classes)
    return _soft_cross_entropy(logits, targets)


def conditional_entropy_per_sample(probs):
    """H_i = -sum_k p_ik log p_ik for every row."""
    if probs.ndim != 2:
        raise ContractError(f"probabilities must be [batch, K], got {probs.shape}")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOLERANCE):
        raise ContractError("probability rows must sum to 1")
    return -ad.sum(probs * ad.log(probs), axis=1)


def info_entropy_loss(probs):
    """sum_k p̂_k log p̂_k with p̂ the batch-mean prediction; minimal when p̂ is uniform."""
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("info_entropy_loss needs a non-empty batch")
    marginal = ad.mean(probs, axis=0)
    return ad.sum(marginal * ad.log(marginal))


def signed_entropy_loss(probs, delta):
    """Batch mean of delta_i * H_i; delta = -1 turns minimization into maximization."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (probs.shape[0],):
        raise ContractError(f"delta has shape {delta.shape}, batch is {probs.shape[0]}")
    if not np.all((delta == 1.0) | (delta == -1.0)):
        raise ContractError("delta entries must be +1 or -1")
    return ad.mean(conditional_entropy_per_sample(probs) * Tensor(delta))


def pseudo_label_ce(logits, pseudo_labels):
    batch, num_classes = logits.shape
    labels = _labels(pseudo_labels, batch, num_classes, "pseudo_label_ce")
    return _soft_cross_entropy(logits, _one_hot(labels, num_classes))


def rotation_loss(rot_logits, rot_labels):
    if rot_logits.ndim != 2 or rot_logits.shape[1] != 4:
        raise ContractError(f"rotation logits must be [batch, 4], got {rot_logits.shape}")
    labels = _labels(rot_labels, rot_logits.shape[0], 4, "rotation_loss")
    return _soft_cross_entropy(rot_logits, _one_hot(labels, 4))


def total_loss(l_ent, l_info, l_ce, l_rot, alpha_ce=DEFAULT_ALPHA_CE, beta_rot=DEFAULT_BETA_ROT,
               conflict_count=0, batch_size=0):
    """L = l_ent + l_info + alpha_ce * l_ce + beta_rot * l_rot.

    Terms may be tensors (the combined graph is kept on `graph`) or floats.
    """
    if alpha_ce < 0 or beta_rot < 0:
        raise ContractError(f"loss weights must be non-negative, got alpha={alpha_ce}, beta={beta_rot}")
    terms = [t if isinstance(t, Tensor) else Tensor(t) for t in (l_ent, l_info, l_ce, l_rot)]
    combined = terms[0] + terms[1] + alpha_ce * terms[2] + beta_rot * terms[3]
    return LossBreakdown(
        l_ent=terms[0].item(),
        l_info=terms[1].item(),
        l_ce=terms[2].item(),
        l_rot=terms[3].item(),
        total=combined.item(),
        conflict_count=int(conflict_count),
        batch_size=int(batch_size),
        graph=combined,
    )
