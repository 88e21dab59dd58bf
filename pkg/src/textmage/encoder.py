"""CNN image encoder: Conv2D/ReLU/MaxPool blocks, flatten, FC stack.

The penultimate FC layer (after ReLU) is the feature vector handed to the
caption decoder; a final linear head over it produces class logits for the
classification stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .curves import CurvePoint
from .errors import ConfigError, DataError, ShapeError
from .optim import SGDConfig, init_sgd_state, sgd_step
from .tensor import GradTape, Tensor, backward


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (3, 224, 224)
    conv_blocks: tuple[int, ...] = (16, 32, 64, 128)  # filters per block
    kernel_size: int = 3
    fc_dims: tuple[int, ...] = (256,)
    feature_dim: int = 256
    num_classes: int = 25

    def __post_init__(self):
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if not self.conv_blocks:
            raise ConfigError("at least one conv block is required")
        self.spatial_extents()  # validates pooling arithmetic

    def spatial_extents(self) -> list[tuple[int, int]]:
        """(H, W) after each conv+pool block; same-padding conv, 2x2 pool."""
        _, h, w = self.input_shape
        extents = []
        for i in range(len(self.conv_blocks)):
            if h == 1 or w == 1:
                raise ConfigError(
                    f"conv block {i}: pooling a {h}x{w} extent would reduce it below 1"
                )
            h = (h + 1) // 2
            w = (w + 1) // 2
            extents.append((h, w))
        return extents

    def flatten_dim(self) -> int:
        h, w = self.spatial_extents()[-1]
        return self.conv_blocks[-1] * h * w


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise ShapeError(f"missing encoder parameter '{name}'")
            p.assign(arrays[name])


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderModel:
    """He-uniform kernels/weights, zero biases; deterministic for a given rng."""
    params: dict[str, Tensor] = {}
    k = config.kernel_size
    c_in = config.input_shape[0]
    for i, filters in enumerate(config.conv_blocks):
        fan_in = c_in * k * k
        params[f"conv{i}.kernel"] = Tensor(_he_uniform(rng, (filters, c_in, k, k), fan_in),
                                           requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(filters), requires_grad=True)
        c_in = filters
    dims = [config.flatten_dim(), *config.fc_dims, config.feature_dim]
    for j in range(len(dims) - 1):
        params[f"fc{j}.weight"] = Tensor(_he_uniform(rng, (dims[j], dims[j + 1]), dims[j]),
                                         requires_grad=True)
        params[f"fc{j}.bias"] = Tensor(np.zeros(dims[j + 1]), requires_grad=True)
    params["head.weight"] = Tensor(
        _he_uniform(rng, (config.feature_dim, config.num_classes), config.feature_dim),
        requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return EncoderModel(config=config, params=params)


def encode(model: EncoderModel, image: Tensor) -> Tensor:
    """Feature vector: conv blocks -> flatten -> FC stack, ReLU on every layer."""
    if image.shape != model.config.input_shape:
        raise ShapeError(f"image shape {image.shape} != configured {model.config.input_shape}")
    x = image
    for i in range(len(model.config.conv_blocks)):
        x = T.conv2d(x, model.params[f"conv{i}.kernel"], model.params[f"conv{i}.bias"],
                     stride=1, padding="same")
        x = T.relu(x)
        x = T.maxpool2d(x)
    x = T.flatten(x)
    n_fc = len(model.config.fc_dims) + 1
    for j in range(n_fc):
        x = T.affine(x, model.params[f"fc{j}.weight"], model.params[f"fc{j}.bias"])
        x = T.relu(x)
    return x


def class_logits(model: EncoderModel, image: Tensor) -> Tensor:
    feature = encode(model, image)
    return T.affine(feature, model.params["head.weight"], model.params["head.bias"])


def classify(model: EncoderModel, image: Tensor) -> Tensor:
    """Softmax class probabilities over the configured classes."""
    return T.softmax(class_logits(model, image))


@dataclass
class EncoderTrainResult:
    curve: list[CurvePoint]
    best_state: dict[str, np.ndarray]
    best_epoch: int


def _classification_metrics(model: EncoderModel, samples) -> tuple[float, float]:
    losses = []
    correct = 0
    for image, label in samples:
        logits = class_logits(model, image)
        loss = T.cross_entropy(T.stack_rows([logits]), [label])
        losses.append(loss.item())
        if int(np.argmax(logits.data)) == label:
            correct += 1
    return float(np.mean(losses)), correct / len(samples)


def train_encoder(model: EncoderModel, train_samples, val_samples,
                  sgd: SGDConfig, epochs: int, batch_size: int,
                  rng: np.random.Generator) -> EncoderTrainResult:
    """Cross-entropy classification training with mini-batch SGD.

    ``train_samples``/``val_samples`` are (image Tensor, class id) pairs.
    Returns the running curve plus a snapshot of the best weights by
    validation accuracy (train accuracy when there is no validation split).
    """
    if not train_samples:
        raise DataError("cannot train the encoder on an empty dataset")
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    params = model.param_arrays()
    state = init_sgd_state(params)
    iteration = 0
    curve: list[CurvePoint] = []
    best_state = {k: v.copy() for k, v in params.items()}
    best_metric = -1.0
    best_epoch = 0
    n = len(train_samples)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with GradTape() as tape:
                rows = []
                targets = []
                for i in idx:
                    image, label = train_samples[i]
                    rows.append(class_logits(model, image))
                    targets.append(label)
                logits = T.stack_rows(rows)
                loss = T.cross_entropy(logits, targets)
                backward(loss, tape)
            grads = {}
            for name, p in model.params.items():
                g = tape.grad(p)
                grads[name] = g.data if g is not None else np.zeros_like(p.data)
            params = model.param_arrays()
            new_params, state = sgd_step(params, grads, state, sgd, iteration)
            iteration += 1
            for name, arr in new_params.items():
                model.params[name].assign(arr)
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == np.asarray(targets)).sum())
        train_loss = loss_sum / n
        train_acc = correct / n
        val_loss = val_acc = None
        if val_samples:
            val_loss, val_acc = _classification_metrics(model, val_samples)
        curve.append(CurvePoint(epoch, train_loss, train_acc, val_loss, val_acc))
        metric = val_acc if val_samples else train_acc
        if metric > best_metric:
            best_metric = metric
            best_state = {k: p.data.copy() for k, p in model.params.items()}
            best_epoch = epoch
    return EncoderTrainResult(curve=curve, best_state=best_state, best_epoch=best_epoch)
