"""Compact model zoo and the shared training/prediction protocol.

Two desk-scale families mirror the stronger architecture styles for this
task: ``micro_mobile`` stacks depthwise-separable blocks, ``micro_dense``
stacks densely connected blocks whose inputs concatenate all prior block
outputs. ``plain_cnn`` is a baseline stack. Every model ends with the
same head: global average pooling, a ReLU dense layer, and softmax.

Normalization layers are per-channel affine scalings (1x1 depthwise
convolutions) rather than batch statistics, so train and eval behavior
are identical.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError
from .imaging import ImageDataset, DatasetSplit, TrafficImage
from .layers import Layer, LayerSpec, build_layer, identity_affine, _LAYER_CLASSES
from .metrics import PredictionSet
from .optim import (
    SGDMomentum,
    PlateauScheduler,
    TrainConfig,
    TrainHistory,
    count_parameters,
    freeze_fraction,
    softmax_cross_entropy,
)

FAMILIES = ("micro_mobile", "micro_dense", "plain_cnn")

_CKPT_MAGIC = b"TLCK"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture knobs plus the hard parameter budget."""

    family: str
    n_classes: int
    name: str | None = None
    width: float = 1.0
    blocks: int = 3
    dense_units: int = 64
    input_shape: tuple[int, int, int] = (60, 60, 3)
    param_budget: int = 15_000_000

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.width <= 0:
            raise ConfigError(f"width must be positive, got {self.width}")
        if self.param_budget < 1:
            raise ConfigError(f"param_budget must be positive, got {self.param_budget}")
        self.input_shape = tuple(self.input_shape)  # type: ignore[assignment]
        if self.name is None:
            self.name = self.family

    def as_dict(self) -> dict:
        out = dict(self.__dict__)
        out["input_shape"] = list(self.input_shape)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["input_shape"] = tuple(raw["input_shape"])
        return cls(**raw)


def _scaled(base: int, width: float, floor: int = 4) -> int:
    return max(floor, int(round(base * width)))


def _backbone_specs(config: ModelConfig) -> list[LayerSpec]:
    w, blocks = config.width, config.blocks
    c0 = _scaled(8, w)
    specs: list[LayerSpec]
    if config.family == "micro_mobile":
        specs = [
            LayerSpec("conv2d", in_channels=3, out_channels=c0, kernel_size=3, stride=2),
            identity_affine(c0),
            LayerSpec("relu"),
        ]
        ch = c0
        for b in range(1, blocks + 1):
            out = c0 * 2 ** min(b, 3)
            stride = 2 if b <= 2 else 1
            specs += [
                LayerSpec("depthwise_conv2d", in_channels=ch, kernel_size=3, stride=stride),
                identity_affine(ch),
                LayerSpec("relu"),
                LayerSpec("pointwise_conv2d", in_channels=ch, out_channels=out),
                identity_affine(out),
                LayerSpec("relu"),
            ]
            ch = out
    elif config.family == "micro_dense":
        c1 = _scaled(12, w)
        growth = _scaled(8, w, floor=2)
        specs = [
            LayerSpec("conv2d", in_channels=3, out_channels=c0, kernel_size=3, stride=2),
            identity_affine(c0),
            LayerSpec("relu"),
            LayerSpec("conv2d", in_channels=c0, out_channels=c1, kernel_size=3, stride=2),
            identity_affine(c1),
            LayerSpec("relu"),
        ]
        ch = c1
        for _ in range(blocks):
            specs.append(LayerSpec("concat_dense_block", in_channels=ch, growth=growth, kernel_size=3))
            ch += growth
        specs += [identity_affine(ch), LayerSpec("relu")]
    else:  # plain_cnn
        specs = [
            LayerSpec("conv2d", in_channels=3, out_channels=c0, kernel_size=3, stride=2),
            LayerSpec("relu"),
        ]
        ch = c0
        for b in range(1, blocks + 1):
            out = c0 * 2 ** min(b, 2)
            stride = 2 if b <= 2 else 1
            specs += [
                LayerSpec("conv2d", in_channels=ch, out_channels=out, kernel_size=3, stride=stride),
                LayerSpec("relu"),
            ]
            ch = out
    return specs


def _final_channels(specs: Sequence[LayerSpec]) -> int:
    ch = 3
    for s in specs:
        if s.kind == "conv2d" or s.kind == "pointwise_conv2d":
            ch = s.out_channels
        elif s.kind == "concat_dense_block":
            ch = s.in_channels + s.growth
    return ch


class Model:
    """Ordered layer stack with a pooling/dense/softmax head."""

    def __init__(
        self,
        config: ModelConfig,
        layers: list[Layer],
        head_start: int,
        seed: int,
        dtype=np.float64,
    ):
        self.config = config
        self.layers = layers
        self.head_start = head_start
        self.seed = seed
        self.dtype = dtype

    @property
    def name(self) -> str:
        return self.config.name or self.config.family

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def specs(self) -> list[LayerSpec]:
        return [l.spec for l in self.layers]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def parameter_partition(self) -> tuple[int, int]:
        return count_parameters(self.layers)

    def apply_freeze(self, trainable_fraction: float) -> list[bool]:
        """Set per-layer trainability for partial fine-tuning.

        0.0 freezes everything (head included); otherwise the last
        ceil(fraction * L) parameterized backbone layers plus the head
        stay trainable.
        """
        if trainable_fraction == 0.0:
            mask = [False] * len(self.layers)
        else:
            mask = freeze_fraction(self.specs(), trainable_fraction, self.head_start)
        for layer, flag in zip(self.layers, mask):
            layer.trainable = flag
        return mask

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(
                f"{self.name}: expected (B, {', '.join(map(str, self.config.input_shape))}) "
                f"input, got {x.shape}"
            )
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Forward pass up to (excluding) the final softmax."""
        out = self._check_input(x)
        for layer in self.layers[:-1]:
            out = layer.forward(out)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Full forward pass; rows are probability vectors."""
        probs = self.layers[-1].forward(self.logits(x))
        if not np.all(np.isfinite(probs)):
            raise NumericError(f"{self.name}: non-finite activations in forward pass")
        return probs

    def backward_from_logits(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate a gradient w.r.t. the logits through the stack."""
        grad = dlogits
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        return grad

    def predict_probs(self, pixels: np.ndarray) -> np.ndarray:
        """Inference on a stack of images, one sample at a time.

        Scales uint8 pixels to [0, 1]. The per-sample path keeps outputs
        bit-identical whether images arrive batched or one by one.
        """
        arr = np.asarray(pixels)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.dtype == np.uint8:
            arr = arr.astype(self.dtype) / 255.0
        out = np.empty((len(arr), self.n_classes), dtype=self.dtype)
        for i in range(len(arr)):
            out[i] = self.forward(arr[i : i + 1])[0]
        return out

    def summary(self) -> dict:
        trainable, frozen = self.parameter_partition()
        return {
            "name": self.name,
            "family": self.config.family,
            "n_classes": self.n_classes,
            "param_total": self.param_count(),
            "param_trainable": trainable,
            "param_non_trainable": frozen,
            "layers": [
                {
                    "kind": l.spec.kind,
                    "params": l.param_count(),
                    "trainable": bool(l.trainable),
                    "head": i >= self.head_start,
                }
                for i, l in enumerate(self.layers)
            ],
        }


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    """Construct an initialized model for the given configuration.

    Raises:
        ConfigError: derived parameter count exceeds the budget.
    """
    backbone = _backbone_specs(config)
    ch = _final_channels(backbone)
    head = [
        LayerSpec("global_avg_pool"),
        LayerSpec("dense", in_features=ch, units=config.dense_units),
        LayerSpec("relu"),
        LayerSpec("dense", in_features=config.dense_units, units=config.n_classes),
        LayerSpec("softmax"),
    ]
    specs = backbone + head
    declared = sum(s.param_count() for s in specs)
    if declared > config.param_budget:
        raise ConfigError(
            f"{config.name}: {declared} parameters exceed the budget of {config.param_budget}"
        )
    rng = np.random.default_rng(seed)
    layers = [build_layer(s, rng, dtype) for s in specs]
    return Model(config, layers, head_start=len(backbone), seed=seed, dtype=dtype)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    return np.eye(k, dtype=dtype)[labels]


def _batched_logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outs = [model.logits(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def train(
    model: Model,
    dataset: ImageDataset,
    split: DatasetSplit,
    config: TrainConfig,
) -> tuple[Model, TrainHistory]:
    """Mini-batch SGD under the shared protocol; returns the trained model
    and its per-epoch history.

    The freeze mask for ``config.trainable_fraction`` is applied up front;
    shuffling is driven solely by ``config.seed``; the plateau scheduler is
    consulted once per epoch on the monitored validation value.

    Raises:
        NumericError: non-finite loss, with epoch/batch context.
    """
    model.apply_freeze(config.trainable_fraction)
    x_all = dataset.pixels.astype(model.dtype) / 255.0
    y_all = _one_hot(dataset.labels, model.n_classes, model.dtype)

    optimizer = SGDMomentum(model.layers, lr=config.learning_rate, momentum=config.momentum)
    scheduler = PlateauScheduler(
        config.learning_rate,
        factor=config.plateau_factor,
        patience=config.plateau_patience,
        min_delta=config.min_delta,
        mode="min" if config.monitor == "val_loss" else "max",
    )
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = np.asarray(split.validation, dtype=np.int64)

    for epoch in range(1, config.epochs + 1):
        lr = scheduler.lr
        optimizer.lr = lr
        perm = train_idx[rng.permutation(len(train_idx))]
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            xb, yb = x_all[batch], y_all[batch]
            logits = model.logits(xb)
            try:
                loss, dlogits = softmax_cross_entropy(logits, yb)
            except NumericError as exc:
                raise NumericError(
                    f"{model.name}: {exc} at epoch {epoch}, "
                    f"batch {start // config.batch_size}"
                ) from None
            if not math.isfinite(loss):
                raise NumericError(
                    f"{model.name}: non-finite loss at epoch {epoch}, "
                    f"batch {start // config.batch_size}"
                )
            model.backward_from_logits(dlogits)
            optimizer.step()
            loss_sum += loss * len(batch)
            correct += int(np.sum(logits.argmax(axis=1) == dataset.labels[batch]))

        val_logits = _batched_logits(model, x_all[val_idx])
        val_loss, _ = softmax_cross_entropy(val_logits, y_all[val_idx])
        val_acc = float(np.mean(val_logits.argmax(axis=1) == dataset.labels[val_idx]))
        history.append(
            train_loss=loss_sum / len(perm),
            train_acc=correct / len(perm),
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
        )
        scheduler.update(val_loss if config.monitor == "val_loss" else val_acc)
    return model, history


def predict(
    model: Model,
    images: ImageDataset | Sequence[TrafficImage],
    indices: Sequence[int] | np.ndarray | None = None,
) -> PredictionSet:
    """Run deterministic inference and pair probabilities with true labels."""
    if isinstance(images, ImageDataset):
        idx = np.arange(len(images)) if indices is None else np.asarray(indices, dtype=np.int64)
        pixels = images.pixels[idx]
        labels = images.labels[idx]
        class_names = list(images.class_names)
    else:
        items = list(images)
        pixels = np.stack([im.pixels for im in items])
        labels = np.array([im.label for im in items], dtype=np.int64)
        class_names = [f"class_{i}" for i in range(model.n_classes)]
    probs = model.predict_probs(pixels)
    return PredictionSet(probs=probs, true_labels=labels, class_names=class_names)


# --- checkpoint container ----------------------------------------------------


def save_model(model: Model, path: str | Path) -> None:
    """Serialize specs, freeze mask, parameters, and seed to one file."""
    manifest = []
    blobs = []
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params.items():
            manifest.append([i, name, list(arr.shape)])
            blobs.append(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    header = {
        "config": model.config.as_dict(),
        "seed": model.seed,
        "head_start": model.head_start,
        "layers": [s.to_dict() for s in model.specs()],
        "params": manifest,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_model(path: str | Path) -> Model:
    """Rebuild a model from :func:`save_model` output, bit-identical params.

    Raises:
        FormatError: wrong magic/version or truncated file.
    """
    data = Path(path).read_bytes()
    if data[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    if len(data) < 10:
        raise FormatError(f"{path}: checkpoint truncated")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10 : 10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None

    config = ModelConfig.from_dict(header["config"])
    specs = [LayerSpec.from_dict(raw) for raw in header["layers"]]
    layers = [_LAYER_CLASSES[s.kind](s) for s in specs]

    offset = 10 + header_len
    params_per_layer: dict[int, dict[str, np.ndarray]] = {}
    for layer_idx, name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        end = offset + size * 8
        if end > len(data):
            raise FormatError(f"{path}: checkpoint truncated in parameter block")
        arr = np.frombuffer(data[offset:end], dtype=np.float64).reshape(shape).copy()
        params_per_layer.setdefault(layer_idx, {})[name] = arr
        offset = end
    for i, layer in enumerate(layers):
        if i in params_per_layer:
            layer.params = params_per_layer[i]
    return Model(
        config,
        layers,
        head_start=int(header["head_start"]),
        seed=int(header["seed"]),
    )
