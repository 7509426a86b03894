"""
Convolutional Classifier

A small convolutional network over topographic images, written directly in
numpy: valid 3x3 convolutions with ReLU and 2x2 max pooling, a ReLU dense
layer and a softmax output, trained with RMSprop on cross-entropy.

Includes stratified and subject-held-out dataset splits, a deterministic
training loop, evaluation with a confusion matrix, and checkpoint files.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, field_validator, model_validator

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Raised for invalid model inputs, datasets or configurations."""


class ShapeMismatchError(ModelError):
    """Raised when array shapes or class counts do not fit the model."""


class CheckpointError(ModelError):
    """Raised for unreadable or corrupt checkpoint files."""


class ModelConfig(BaseModel):
    input_shape: Tuple[int, int, int] = (32, 32, 3)
    conv_filters: List[int] = Field(default_factory=lambda: [16, 32])
    kernel_size: int = Field(default=3, ge=1)
    pool_size: int = Field(default=2, ge=1)
    dense_hidden: int = Field(default=64, ge=1)
    num_classes: int = Field(ge=2)

    @model_validator(mode="after")
    def _spatial_dims_stay_positive(self):
        self.feature_shape()
        return self

    def feature_shape(self) -> Tuple[int, int, int]:
        """Shape of the last pooled feature map, before flattening."""
        height, width, channels = self.input_shape
        if min(self.input_shape) < 1 or not self.conv_filters or min(self.conv_filters) < 1:
            raise ValueError("input dims and filter counts must be positive")
        for filters in self.conv_filters:
            height, width = height - self.kernel_size + 1, width - self.kernel_size + 1
            if min(height, width) < self.pool_size:
                raise ValueError(f"spatial dims collapse in the conv stack of {self.input_shape}")
            height, width, channels = height // self.pool_size, width // self.pool_size, filters
        return height, width, channels

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        channels = self.input_shape[2]
        for i, filters in enumerate(self.conv_filters, start=1):
            shapes[f"conv{i}.kernel"] = (self.kernel_size, self.kernel_size, channels, filters)
            shapes[f"conv{i}.bias"] = (filters,)
            channels = filters
        flat = int(np.prod(self.feature_shape()))
        shapes["hidden.weight"] = (self.dense_hidden, flat)
        shapes["hidden.bias"] = (self.dense_hidden,)
        shapes["output.weight"] = (self.num_classes, self.dense_hidden)
        shapes["output.bias"] = (self.num_classes,)
        return shapes


class TrainConfig(BaseModel):
    lr: float = Field(default=1e-3, ge=0)
    rho: float = Field(default=0.9, gt=0, lt=1)
    epsilon: float = Field(default=1e-8, ge=0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=20, ge=0)
    seed: int = 0
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    @field_validator("split_fractions")
    @classmethod
    def _fractions_partition_one(cls, value):
        if min(value) <= 0:
            raise ValueError(f"split fractions must be positive, got {value}")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(value)}")
        return value


@dataclass(eq=False)
class Model:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    rms_state: Dict[str, np.ndarray]


class Dataset(NamedTuple):
    images: np.ndarray
    labels: np.ndarray


@dataclass
class Evaluation:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray

    def to_dict(self) -> Dict:
        return {
            "accuracy": self.accuracy,
            "mean_loss": self.mean_loss,
            "confusion": self.confusion.tolist(),
        }


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """He-style uniform initialisation (limit sqrt(6 / fan_in)); zero biases."""
    rng = np.random.default_rng([seed, 0x1417])
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1])) if name.startswith("conv") else shape[1]
        limit = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape)
    rms_state = {name: np.zeros_like(value) for name, value in params.items()}
    return Model(config=config, params=params, rms_state=rms_state)


# Layers. Images are batched [N, H, W, C]; single images are accepted too.

def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    return x, False


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    # [N, H-k+1, W-k+1, k, k, C]
    return sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid, stride-1 convolution: out[i,j,f] = bias[f] + sum_{a,b,c} x[i+a, j+b, c] * kernels[a,b,c,f]."""
    x, single = _batched(x)
    k = kernels.shape[0]
    if kernels.shape[2] != x.shape[3] or kernels.shape[1] != k or bias.shape != (kernels.shape[3],):
        raise ShapeMismatchError(
            f"kernels {kernels.shape} / bias {bias.shape} do not fit input channels {x.shape[3]}"
        )
    if k > min(x.shape[1], x.shape[2]):
        raise ShapeMismatchError(f"kernel size {k} exceeds input {x.shape[1:3]}")
    out = np.tensordot(_patches(x, k), kernels, axes=([3, 4, 5], [0, 1, 2])) + bias
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, dout: np.ndarray):
    """Gradients (dx, dkernels, dbias) of a valid convolution given dL/dout."""
    k = kernels.shape[0]
    dkernels = np.tensordot(_patches(x, k), dout, axes=([0, 1, 2], [0, 1, 2]))
    dbias = dout.sum(axis=(0, 1, 2))
    padded = np.pad(dout, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    dx = np.tensordot(_patches(padded, k), kernels[::-1, ::-1], axes=([3, 4, 5], [0, 1, 3]))
    return dx, dkernels, dbias


def maxpool_forward(x, size: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Non-overlapping max pooling. A trailing odd row or column is cropped.

    Returns:
        (pooled output, argmax index within each window); ties go to the
        first position in row-major window order
    """
    x, single = _batched(x)
    n, height, width, channels = x.shape
    h, w = height // size, width // size
    windows = (x[:, :h * size, :w * size]
               .reshape(n, h, size, w, size, channels)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(n, h, w, channels, size * size))
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool_backward(dout: np.ndarray, argmax: np.ndarray, input_shape, size: int = 2) -> np.ndarray:
    """Route each incoming gradient to the stored argmax position of its window."""
    n, h, w, channels = dout.shape
    routed = np.zeros((n, h, w, channels, size * size))
    np.put_along_axis(routed, argmax[..., None], dout[..., None], axis=-1)
    routed = (routed.reshape(n, h, w, channels, size, size)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, h * size, w * size, channels))
    dx = np.zeros(input_shape)
    dx[:, :h * size, :w * size] = routed
    return dx


def dense_forward(x, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeMismatchError(f"dense weight {weight.shape} does not fit input of size {x.shape[-1]}")
    return x @ weight.T + bias


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits, label):
    """
    Softmax probabilities and cross-entropy loss.

    Args:
        logits: Vector [K] or batch [N, K]
        label: Class id, or one id per row for a batch

    Returns:
        (probs, loss); for a batch, loss is the mean over rows
    """
    logits = np.asarray(logits, dtype=np.float64)
    log_probs = _log_softmax(logits)
    probs = np.exp(log_probs)
    if logits.ndim == 1:
        return probs, float(-log_probs[label])
    labels = np.asarray(label)
    return probs, float(-log_probs[np.arange(len(labels)), labels].mean())


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def forward(model: Model, images) -> Tuple[np.ndarray, Dict]:
    """Logits [N, K] and the activations backward needs."""
    x, _ = _batched(images)
    if x.shape[1:] != tuple(model.config.input_shape):
        raise ShapeMismatchError(
            f"images of shape {x.shape[1:]} do not fit model input {tuple(model.config.input_shape)}"
        )
    p = model.params
    size = model.config.pool_size
    conv_cache = []
    a = x
    for i in range(1, len(model.config.conv_filters) + 1):
        z = conv2d_forward(a, p[f"conv{i}.kernel"], p[f"conv{i}.bias"])
        pooled, argmax = maxpool_forward(_relu(z), size)
        conv_cache.append((a, z, argmax))
        a = pooled
    flat = a.reshape(len(x), -1)
    hidden_z = dense_forward(flat, p["hidden.weight"], p["hidden.bias"])
    hidden = _relu(hidden_z)
    logits = dense_forward(hidden, p["output.weight"], p["output.bias"])
    cache = {"conv": conv_cache, "pooled_shape": a.shape, "flat": flat,
             "hidden_z": hidden_z, "hidden": hidden}
    return logits, cache


def backward(model: Model, images, labels) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Reverse-mode gradients of the mean batch cross-entropy.

    Args:
        model: Current model
        images: Batch [N, H, W, C]
        labels: Class ids [N]

    Returns:
        (gradients keyed like model.params, mean batch loss)
    """
    labels = np.asarray(labels)
    logits, cache = forward(model, images)
    probs, loss = softmax_xent(logits, labels)
    p = model.params
    size = model.config.pool_size

    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)

    grads = {
        "output.weight": dlogits.T @ cache["hidden"],
        "output.bias": dlogits.sum(axis=0),
    }
    dhidden_z = (dlogits @ p["output.weight"]) * (cache["hidden_z"] > 0)
    grads["hidden.weight"] = dhidden_z.T @ cache["flat"]
    grads["hidden.bias"] = dhidden_z.sum(axis=0)
    da = (dhidden_z @ p["hidden.weight"]).reshape(cache["pooled_shape"])

    for i in range(len(model.config.conv_filters), 0, -1):
        a_in, z, argmax = cache["conv"][i - 1]
        dz = maxpool_backward(da, argmax, z.shape, size) * (z > 0)
        da, grads[f"conv{i}.kernel"], grads[f"conv{i}.bias"] = conv2d_backward(a_in, p[f"conv{i}.kernel"], dz)
    return grads, loss


def rmsprop_step(model: Model, gradients: Dict[str, np.ndarray], cfg: TrainConfig) -> Model:
    """acc <- rho*acc + (1-rho)*g^2; theta <- theta - lr*g / (sqrt(acc) + eps). Returns a new Model."""
    params = {}
    rms_state = {}
    for name, theta in model.params.items():
        g = gradients[name]
        if g.shape != theta.shape:
            raise ShapeMismatchError(f"gradient {name} has shape {g.shape}, parameter {theta.shape}")
        acc = cfg.rho * model.rms_state[name] + (1.0 - cfg.rho) * g * g
        params[name] = theta - cfg.lr * g / (np.sqrt(acc) + cfg.epsilon)
        rms_state[name] = acc
    return Model(config=model.config, params=params, rms_state=rms_state)


def predict_proba(model: Model, images, batch_size: int = 256) -> np.ndarray:
    x, _ = _batched(images)
    probs = [np.exp(_log_softmax(forward(model, x[i:i + batch_size])[0]))
             for i in range(0, len(x), batch_size)]
    return np.concatenate(probs) if probs else np.zeros((0, model.config.num_classes))


def evaluate(model: Model, data, labels, batch_size: int = 256) -> Evaluation:
    """
    Accuracy, mean cross-entropy and confusion matrix (rows true, columns predicted).

    Predictions take the highest probability, lowest class id on ties.
    """
    x, _ = _batched(data)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    if len(x) != len(labels):
        raise ShapeMismatchError(f"{len(x)} images but {len(labels)} labels")
    k = model.config.num_classes
    if labels.max() >= k or labels.min() < 0:
        raise ShapeMismatchError(f"labels reach class {labels.max()} but the model has {k} classes")

    log_probs = np.concatenate([_log_softmax(forward(model, x[i:i + batch_size])[0])
                                for i in range(0, len(x), batch_size)])
    predicted = log_probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    return Evaluation(
        accuracy=float(np.trace(confusion) / len(labels)),
        mean_loss=float(-log_probs[np.arange(len(labels)), labels].mean()),
        confusion=confusion,
    )


# Splits

def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _apportion(total: int, counts: np.ndarray) -> np.ndarray:
    # Largest remainder; ties go to the lower class id.
    quotas = total * counts / counts.sum()
    shares = np.floor(quotas).astype(np.int64)
    order = np.argsort(-(quotas - shares), kind="stable")
    shares[order[:total - shares.sum()]] += 1
    return shares


def _take(data: np.ndarray, labels: np.ndarray, index: np.ndarray) -> Dataset:
    index = np.sort(index)
    return Dataset(images=data[index], labels=labels[index])


def split_dataset(data, labels, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Seeded, class-stratified train/validation/test split.

    Validation and test sizes are round(fraction * N); each class contributes
    its largest-remainder share to them and the rest goes to training.

    Args:
        data: Images [N, ...]
        labels: Class ids [N]
        fractions: (train, val, test), positive and summing to 1
        seed: Shuffle seed

    Returns:
        (train, val, test) datasets
    """
    fractions = TrainConfig(split_fractions=tuple(fractions)).split_fractions
    data = np.asarray(data)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ModelError("cannot split an empty dataset")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 3:
        raise ModelError(f"class {classes[counts.argmin()]} has {counts.min()} samples; stratifying needs 3")

    total = len(labels)
    val_counts = _apportion(_round_half_up(fractions[1] * total), counts)
    test_counts = _apportion(_round_half_up(fractions[2] * total), counts)

    rng = np.random.default_rng([seed, 0x5B1])
    parts: Tuple[List, List, List] = ([], [], [])
    for cls, n_val, n_test in zip(classes, val_counts, test_counts):
        members = rng.permutation(np.flatnonzero(labels == cls))
        n_test = min(n_test, len(members) - 1)
        n_val = min(n_val, len(members) - 1 - n_test)
        parts[2].append(members[:n_test])
        parts[1].append(members[n_test:n_test + n_val])
        parts[0].append(members[n_test + n_val:])
    train, val, test = (_take(data, labels, np.concatenate(p)) for p in parts)
    return train, val, test


def split_by_group(data, labels, groups, fractions=(0.7, 0.15, 0.15),
                   seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Subject-held-out split: every group (subject) lands in exactly one split.

    Validation and test each receive at least one group, so at least three
    groups are required.
    """
    fractions = TrainConfig(split_fractions=tuple(fractions)).split_fractions
    data = np.asarray(data)
    labels = np.asarray(labels, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    if len(groups) != len(labels):
        raise ShapeMismatchError(f"{len(groups)} group ids for {len(labels)} samples")
    subjects = np.unique(groups)
    if len(subjects) < 3:
        raise ModelError(f"subject split needs at least 3 subjects, got {len(subjects)}")

    rng = np.random.default_rng([seed, 0x5B2])
    order = rng.permutation(subjects)
    n_test = max(1, _round_half_up(fractions[2] * len(subjects)))
    n_val = max(1, _round_half_up(fractions[1] * len(subjects)))
    if n_test + n_val >= len(subjects):
        n_test, n_val = 1, 1
    held = (order[n_test + n_val:], order[n_test:n_test + n_val], order[:n_test])
    train, val, test = (_take(data, labels, np.flatnonzero(np.isin(groups, s))) for s in held)
    return train, val, test


# Training

def train(model: Model, train_set: Dataset, val_set: Optional[Dataset],
          cfg: TrainConfig) -> Tuple[Model, List[Dict]]:
    """
    Mini-batch RMSprop training.

    Each epoch visits the training set in a seeded random order, then scores
    the full training and validation sets. The model returned is the first
    one reaching the best validation accuracy (the final model if there is no
    validation data or no epoch ran).

    Args:
        model: Initial model
        train_set: Training images and labels
        val_set: Validation images and labels, may be empty
        cfg: Optimiser and loop settings

    Returns:
        (selected model, per-epoch metrics history)
    """
    x = np.asarray(train_set.images, dtype=np.float64)
    y = np.asarray(train_set.labels, dtype=np.int64)
    if len(y) == 0:
        raise ModelError("cannot train on an empty dataset")
    has_val = val_set is not None and len(val_set.labels) > 0
    if has_val:
        val_x = np.asarray(val_set.images, dtype=np.float64)
        val_y = np.asarray(val_set.labels, dtype=np.int64)

    rng = np.random.default_rng([cfg.seed, 0x7A1])
    history = []
    best_model, best_accuracy = model, -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads, _ = backward(model, x[batch], y[batch])
            model = rmsprop_step(model, grads, cfg)

        scores = evaluate(model, x, y)
        entry = {"epoch": epoch, "train_loss": scores.mean_loss, "train_accuracy": scores.accuracy}
        if has_val:
            val_scores = evaluate(model, val_x, val_y)
            entry.update(val_loss=val_scores.mean_loss, val_accuracy=val_scores.accuracy)
            if val_scores.accuracy > best_accuracy:
                best_model, best_accuracy = model, val_scores.accuracy
        history.append(entry)
        logging.info(
            f"Epoch {epoch}/{cfg.epochs}: train loss {entry['train_loss']:.4f} "
            f"acc {entry['train_accuracy']:.4f}"
            + (f", val loss {entry['val_loss']:.4f} acc {entry['val_accuracy']:.4f}" if has_val else "")
        )

    if has_val and history:
        return best_model, history
    return model, history


# Checkpoints

def save_checkpoint(model: Model, path) -> None:
    """
    Write parameters and RMSprop state as a CKPT file: magic, u32 manifest
    length, JSON manifest, then float64 little-endian tensor payloads.
    """
    tensors = {f"param/{name}": value for name, value in model.params.items()}
    tensors.update({f"rms/{name}": value for name, value in model.rms_state.items()})

    directory = {}
    offset = 0
    for name, value in tensors.items():
        directory[name] = {"dims": list(value.shape), "offset": offset}
        offset += value.size * 8
    manifest = json.dumps({
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "tensors": directory,
    }).encode("utf-8")

    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(manifest)))
            f.write(manifest)
            for value in tensors.values():
                f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    except OSError as e:
        logging.error(f"Error saving checkpoint {path}: {str(e)}")
        raise
    logging.info(f"Saved checkpoint {path} ({len(tensors)} tensors)")


def load_checkpoint(path, num_classes: Optional[int] = None) -> Model:
    """
    Read a CKPT file back into a Model.

    Args:
        path: Checkpoint file
        num_classes: If given, the class count the caller expects

    Returns:
        The restored Model
    """
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic")
    (manifest_len,) = struct.unpack_from("<I", data, 4)
    payload_start = 8 + manifest_len
    if payload_start > len(data):
        raise CheckpointError(f"corrupt checkpoint {path}: truncated manifest")
    try:
        manifest = json.loads(data[8:payload_start].decode("utf-8"))
        config = ModelConfig.model_validate(manifest["model_config"])
        directory = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: unreadable manifest ({str(e)})") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")

    payload = memoryview(data)[payload_start:]
    tensors = {}
    expected_size = 0
    for name, entry in directory.items():
        try:
            dims = tuple(int(d) for d in entry["dims"])
            offset = int(entry["offset"])
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"corrupt checkpoint {path}: bad directory entry {name}") from e
        count = int(np.prod(dims, dtype=np.int64))
        if offset < 0 or offset + count * 8 > len(payload):
            raise CheckpointError(f"corrupt checkpoint {path}: tensor {name} is truncated")
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
        expected_size += count * 8
    if expected_size != len(payload):
        raise CheckpointError(f"corrupt checkpoint {path}: payload is {len(payload)} bytes, expected {expected_size}")

    if num_classes is not None and num_classes != config.num_classes:
        raise ShapeMismatchError(f"checkpoint has {config.num_classes} classes, expected {num_classes}")
    params, rms_state = {}, {}
    for name, shape in config.param_shapes().items():
        for prefix, target in (("param/", params), ("rms/", rms_state)):
            value = tensors.get(prefix + name)
            if value is None or value.shape != shape:
                raise ShapeMismatchError(
                    f"checkpoint tensor {prefix + name} has shape "
                    f"{None if value is None else value.shape}, model needs {shape}"
                )
            target[name] = value
    logging.info(f"Loaded checkpoint {path}: {config.num_classes} classes")
    return Model(config=config, params=params, rms_state=rms_state)
