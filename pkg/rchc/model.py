# rchc/model.py

"""Network f (feature extractor + bottleneck + batch norm), classifier g and rotation head g_c.

The prediction for a batch is argmax(g(f(x))). During target adaptation the
classifier is frozen and a fresh rotation head is attached.
"""

import copy
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ExportError, ParseError

logger = logging.getLogger(__name__)

# --- Configuration ---

DEFAULT_HIDDEN_WIDTH = 64
DEFAULT_HIDDEN_LAYERS = 2
DEFAULT_EMBEDDING_DIM = 16
ROTATION_CLASSES = 4
ROTATION_INIT_SCALE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __call__(self, x, training):
        if not training:
            return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        out = ad.batch_norm(x, self.gamma, self.beta, eps=self.eps)
        batch = x.data
        if batch.shape[0] < 2:
            return out
        unbiased = batch.var(axis=0, ddof=1)
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * batch.mean(axis=0)
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        return out


@dataclass
class WeightNormLinear:
    direction: Tensor  # [K, d]
    magnitude: Tensor  # [K]
    bias: Tensor  # [K]

    def __call__(self, x):
        return ad.weight_norm_linear(x, self.direction, self.magnitude, self.bias)


@dataclass
class ModelParams:
    feature_extractor: list
    bottleneck: Linear
    batch_norm: BatchNorm
    classifier: WeightNormLinear
    rotation_head: Linear
    frozen_classifier: bool = False

    @property
    def in_dim(self):
        first = self.feature_extractor[0] if self.feature_extractor else self.bottleneck
        return first.weight.shape[0]

    @property
    def embedding_dim(self):
        return self.bottleneck.weight.shape[1]

    @property
    def num_classes(self):
        return self.classifier.direction.shape[0]

    def named_parameters(self):
        params = {}
        for i, layer in enumerate(self.feature_extractor):
            params[f"feature_extractor.{i}.weight"] = layer.weight
            params[f"feature_extractor.{i}.bias"] = layer.bias
        params["bottleneck.weight"] = self.bottleneck.weight
        params["bottleneck.bias"] = self.bottleneck.bias
        params["batch_norm.gamma"] = self.batch_norm.gamma
        params["batch_norm.beta"] = self.batch_norm.beta
        params["classifier.direction"] = self.classifier.direction
        params["classifier.magnitude"] = self.classifier.magnitude
        params["classifier.bias"] = self.classifier.bias
        params["rotation_head.weight"] = self.rotation_head.weight
        params["rotation_head.bias"] = self.rotation_head.bias
        return params

    def named_buffers(self):
        return {
            "batch_norm.running_mean": self.batch_norm.running_mean,
            "batch_norm.running_var": self.batch_norm.running_var,
        }

    def backbone_parameters(self):
        return [t for layer in self.feature_extractor for t in (layer.weight, layer.bias)]

    def new_layer_parameters(self):
        """Bottleneck, normalization, classifier and rotation head (trained at the higher rate)."""
        return [
            self.bottleneck.weight,
            self.bottleneck.bias,
            self.batch_norm.gamma,
            self.batch_norm.beta,
            self.classifier.direction,
            self.classifier.magnitude,
            self.classifier.bias,
            self.rotation_head.weight,
            self.rotation_head.bias,
        ]

    def classifier_parameters(self):
        return [self.classifier.direction, self.classifier.magnitude, self.classifier.bias]

    def rotation_head_parameters(self):
        return [self.rotation_head.weight, self.rotation_head.bias]

    def freeze_classifier(self):
        self.frozen_classifier = True
        for t in self.classifier_parameters():
            t.requires_grad = False
            t.grad = None


@dataclass
class EmbeddingBatch:
    embeddings: Tensor  # [batch, d]
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.embeddings.shape[0]
        if self.sample_ids is None:
            self.sample_ids = np.arange(n)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.shape != (n,):
            raise ContractError(f"{self.sample_ids.shape[0]} sample ids for {n} embeddings")
        if np.unique(self.sample_ids).size != n:
            raise ContractError("sample ids must be unique within a batch")


# --- Construction ---

def _linear(rng, fan_in, fan_out, scale=None):
    std = np.sqrt(2.0 / fan_in) if scale is None else scale
    return Linear(
        weight=Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True),
        bias=Tensor(np.zeros(fan_out), requires_grad=True),
    )


def init_rotation_head(embedding_dim, rng):
    """Small random head over [original, rotated] embedding pairs."""
    return _linear(rng, 2 * embedding_dim, ROTATION_CLASSES, scale=ROTATION_INIT_SCALE)


def init_model(
    in_dim,
    num_classes,
    rng,
    hidden_width=DEFAULT_HIDDEN_WIDTH,
    hidden_layers=DEFAULT_HIDDEN_LAYERS,
    embedding_dim=DEFAULT_EMBEDDING_DIM,
):
    if in_dim < 1 or num_classes < 2 or embedding_dim < 1 or hidden_layers < 0:
        raise ContractError(
            f"invalid architecture: in_dim={in_dim}, K={num_classes}, d={embedding_dim}, layers={hidden_layers}"
        )
    features = []
    width = in_dim
    for _ in range(hidden_layers):
        features.append(_linear(rng, width, hidden_width))
        width = hidden_width
    direction = rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(num_classes, embedding_dim))
    return ModelParams(
        feature_extractor=features,
        bottleneck=_linear(rng, width, embedding_dim),
        batch_norm=BatchNorm(
            gamma=Tensor(np.ones(embedding_dim), requires_grad=True),
            beta=Tensor(np.zeros(embedding_dim), requires_grad=True),
            running_mean=np.zeros(embedding_dim),
            running_var=np.ones(embedding_dim),
        ),
        classifier=WeightNormLinear(
            direction=Tensor(direction, requires_grad=True),
            magnitude=Tensor(np.linalg.norm(direction, axis=1), requires_grad=True),
            bias=Tensor(np.zeros(num_classes), requires_grad=True),
        ),
        rotation_head=init_rotation_head(embedding_dim, rng),
    )


def init_target_from_source(source, rng):
    """Deep copy of a trained source model with the classifier frozen and a new rotation head."""
    target = copy.deepcopy(source)
    target.freeze_classifier()
    target.rotation_head = init_rotation_head(target.embedding_dim, rng)
    return target


# --- Forward passes ---

def _as_input(inputs):
    return inputs if isinstance(inputs, Tensor) else Tensor(inputs)


def feature_extract(params, inputs, training, sample_ids=None):
    """f(x): hidden relu layers, bottleneck, then batch normalization."""
    x = _as_input(inputs)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"feature_extract expects a non-empty [batch, in_dim] input, got {x.shape}")
    if x.shape[1] != params.in_dim:
        raise ContractError(f"input dimension {x.shape[1]} does not match model in_dim {params.in_dim}")
    for layer in params.feature_extractor:
        x = ad.relu(layer(x))
    z = params.batch_norm(params.bottleneck(x), training)
    return EmbeddingBatch(embeddings=z, sample_ids=sample_ids)


def classify(params, emb):
    z = emb.embeddings if isinstance(emb, EmbeddingBatch) else _as_input(emb)
    if z.ndim != 2 or z.shape[1] != params.embedding_dim:
        raise ContractError(f"embedding shape {z.shape} does not match classifier dimension {params.embedding_dim}")
    return params.classifier(z)


def rotation_classify(params, emb_original, emb_rotated):
    """g_c([f(x), f(x_r)]) logits over the four relative quarter-turns."""
    original, rotated = _as_input(emb_original), _as_input(emb_rotated)
    if original.shape != rotated.shape:
        raise ContractError(f"embedding batches differ: {original.shape} vs {rotated.shape}")
    if original.ndim != 2 or 2 * original.shape[1] != params.rotation_head.weight.shape[0]:
        raise ContractError(
            f"rotation head expects width {params.rotation_head.weight.shape[0]}, got 2x{original.shape[-1]}"
        )
    return params.rotation_head(ad.concat([original, rotated], axis=1))


# --- Checkpoints ---

def save_checkpoint(params, path, config_hash=""):
    """Write every parameter and buffer to an .npz file keyed by name."""
    arrays = {f"param/{name}": t.data for name, t in params.named_parameters().items()}
    arrays.update({f"buffer/{name}": value for name, value in params.named_buffers().items()})
    arrays["meta/frozen_classifier"] = np.array(params.frozen_classifier)
    arrays["meta/config_hash"] = np.array(config_hash)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.savez(handle, **arrays)
    except OSError as e:
        raise ExportError(f"could not write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written to {path} (config hash {config_hash or 'n/a'})")
    return path


def load_checkpoint(path):
    """Return (ModelParams, config_hash) from a checkpoint written by save_checkpoint."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (ValueError, zipfile.BadZipFile) as e:
        raise ParseError(path, f"not a checkpoint archive: {e}") from e

    def array(key):
        if key not in arrays:
            raise ParseError(path, f"missing array '{key}'")
        return np.array(arrays[key])

    def param(name):
        return Tensor(array(f"param/{name}"), requires_grad=True)

    layers = sorted({int(k.split(".")[1]) for k in arrays if k.startswith("param/feature_extractor.")})
    params = ModelParams(
        feature_extractor=[
            Linear(param(f"feature_extractor.{i}.weight"), param(f"feature_extractor.{i}.bias")) for i in layers
        ],
        bottleneck=Linear(param("bottleneck.weight"), param("bottleneck.bias")),
        batch_norm=BatchNorm(
            gamma=param("batch_norm.gamma"),
            beta=param("batch_norm.beta"),
            running_mean=array("buffer/batch_norm.running_mean"),
            running_var=array("buffer/batch_norm.running_var"),
        ),
        classifier=WeightNormLinear(
            param("classifier.direction"), param("classifier.magnitude"), param("classifier.bias")
        ),
        rotation_head=Linear(param("rotation_head.weight"), param("rotation_head.bias")),
    )
    if bool(array("meta/frozen_classifier")):
        params.freeze_classifier()
    return params, str(array("meta/config_hash"))
