"""Minimal deterministic layer engine (numpy, NHWC).

Each layer owns its parameters, caches what forward needs for backward,
and exposes ``forward(x) -> y`` / ``backward(dy) -> dx`` with parameter
gradients left in ``grads``. Everything runs in plain numpy so results
are reproducible bit-for-bit for a fixed seed and dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

PARAMETERIZED_KINDS = (
    "conv2d",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "dense",
    "concat_dense_block",
)
LAYER_KINDS = PARAMETERIZED_KINDS + ("relu", "global_avg_pool", "softmax")


@dataclass
class LayerSpec:
    """Declarative layer description; parameter counts derive from it alone."""

    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: str = "same"
    in_features: int | None = None
    units: int | None = None
    growth: int | None = None
    trainable: bool = True

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        required = {
            "conv2d": ("in_channels", "out_channels", "kernel_size"),
            "depthwise_conv2d": ("in_channels", "kernel_size"),
            "pointwise_conv2d": ("in_channels", "out_channels"),
            "dense": ("in_features", "units"),
            "concat_dense_block": ("in_channels", "growth"),
        }.get(self.kind, ())
        missing = [f for f in required if getattr(self, f) is None]
        if missing:
            raise ConfigError(f"{self.kind} spec missing {missing}")

    def param_count(self) -> int:
        k = self.kernel_size or 0
        if self.kind == "conv2d":
            return k * k * self.in_channels * self.out_channels + self.out_channels
        if self.kind == "depthwise_conv2d":
            return k * k * self.in_channels + self.in_channels
        if self.kind == "pointwise_conv2d":
            return self.in_channels * self.out_channels + self.out_channels
        if self.kind == "dense":
            return self.in_features * self.units + self.units
        if self.kind == "concat_dense_block":
            c, g, kk = self.in_channels, self.growth, self.kernel_size or 3
            return (c + c) + (kk * kk * c * g + g)  # affine + inner conv
        return 0

    def to_dict(self) -> dict[str, Any]:
        return {
            k: v
            for k, v in self.__dict__.items()
            if v is not None or k in ("kind", "trainable")
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "LayerSpec":
        return cls(**raw)


def _out_size(size: int, kernel: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Output length plus (before, after) pad amounts for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
        return out, total // 2, total - total // 2
    if size < kernel:
        raise ShapeError(f"valid padding needs input >= kernel ({size} < {kernel})")
    return (size - kernel) // stride + 1, 0, 0


def _check_image_input(layer: "Layer", x: np.ndarray, channels: int | None = None) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{layer.spec.kind}: expected (B, H, W, C) input, got shape {x.shape}")
    if channels is not None and x.shape[3] != channels:
        raise ShapeError(
            f"{layer.spec.kind}: expected {channels} input channels, got {x.shape[3]}"
        )


class Layer:
    """Base layer: parameters, forward cache, gradients."""

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: Any = None

    @property
    def trainable(self) -> bool:
        return self.spec.trainable

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.spec.trainable = bool(value)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self) -> Any:
        if self._cache is None:
            raise ContractError(f"{self.spec.kind}: backward called without a live forward cache")
        cache, self._cache = self._cache, None
        return cache


class Conv2d(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        _check_image_input(self, x, s.in_channels)
        k, st = s.kernel_size, s.stride
        b, h, w, _ = x.shape
        ho, pt, pb = _out_size(h, k, st, s.padding)
        wo, pl, pr = _out_size(w, k, st, s.padding)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        # (B, Ho, Wo, Cin, k, k) -> columns (B*Ho*Wo, k*k*Cin)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::st, ::st][:, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, -1)
        wmat = self.params["weight"].reshape(-1, s.out_channels)
        y = cols @ wmat + self.params["bias"]
        self._cache = (cols, x.shape, (pt, pb, pl, pr), (ho, wo))
        return y.reshape(b, ho, wo, s.out_channels)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cols, x_shape, (pt, pb, pl, pr), (ho, wo) = self._take_cache()
        s = self.spec
        k, st = s.kernel_size, s.stride
        b, h, w, cin = x_shape
        dym = dy.reshape(-1, s.out_channels)
        self.grads = {
            "weight": (cols.T @ dym).reshape(k, k, cin, s.out_channels),
            "bias": dym.sum(axis=0),
        }
        weight = self.params["weight"]
        dxp = np.zeros((b, pt + h + pb, pl + w + pr, cin), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki : ki + st * ho : st, kj : kj + st * wo : st, :] += (
                    dym @ weight[ki, kj].T
                ).reshape(b, ho, wo, cin)
        return dxp[:, pt : pt + h, pl : pl + w, :]


class DepthwiseConv2d(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        _check_image_input(self, x, s.in_channels)
        k, st = s.kernel_size, s.stride
        if k == 1 and st == 1:
            # per-channel affine fast path
            self._cache = ("affine", x)
            return x * self.params["weight"][0, 0] + self.params["bias"]
        b, h, w, c = x.shape
        ho, pt, pb = _out_size(h, k, st, s.padding)
        wo, pl, pr = _out_size(w, k, st, s.padding)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::st, ::st][:, :ho, :wo]
        y = np.einsum("bhwcij,ijc->bhwc", win, self.params["weight"]) + self.params["bias"]
        self._cache = ("general", (win, x.shape, (pt, pb, pl, pr), (ho, wo)))
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mode, cache = self._take_cache()
        if mode == "affine":
            x = cache
            self.grads = {
                "weight": np.einsum("bhwc,bhwc->c", x, dy)[None, None],
                "bias": dy.sum(axis=(0, 1, 2)),
            }
            return dy * self.params["weight"][0, 0]
        win, x_shape, (pt, pb, pl, pr), (ho, wo) = cache
        s = self.spec
        k, st = s.kernel_size, s.stride
        b, h, w, c = x_shape
        self.grads = {
            "weight": np.einsum("bhwcij,bhwc->ijc", win, dy),
            "bias": dy.sum(axis=(0, 1, 2)),
        }
        weight = self.params["weight"]
        dxp = np.zeros((b, pt + h + pb, pl + w + pr, c), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki : ki + st * ho : st, kj : kj + st * wo : st, :] += dy * weight[ki, kj]
        return dxp[:, pt : pt + h, pl : pl + w, :]


class PointwiseConv2d(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        _check_image_input(self, x, s.in_channels)
        shp = x.shape
        flat = x.reshape(-1, s.in_channels)
        y = flat @ self.params["weight"] + self.params["bias"]
        self._cache = (flat, shp)
        return y.reshape(shp[0], shp[1], shp[2], s.out_channels)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        flat, shp = self._take_cache()
        dym = dy.reshape(-1, self.spec.out_channels)
        self.grads = {"weight": flat.T @ dym, "bias": dym.sum(axis=0)}
        return (dym @ self.params["weight"].T).reshape(shp)


class Dense(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        if x.ndim != 2 or x.shape[1] != s.in_features:
            raise ShapeError(f"dense: expected (B, {s.in_features}) input, got shape {x.shape}")
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self.grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ self.params["weight"].T


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._take_cache()


class GlobalAvgPool(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_image_input(self, x)
        self._cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, h, w, c = self._take_cache()
        return np.broadcast_to(dy[:, None, None, :] / (h * w), (b, h, w, c)).copy()


class Softmax(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"softmax: expected (B, K) input, got shape {x.shape}")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        self._cache = y
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        y = self._take_cache()
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


class ConcatDenseBlock(Layer):
    """Densely connected block: output is input concatenated with new features.

    Internally: per-channel affine (1x1 depthwise) -> relu -> 3x3 conv
    producing ``growth`` channels, appended channel-wise to the input.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__(spec)
        k = spec.kernel_size or 3
        self.affine = DepthwiseConv2d(
            LayerSpec("depthwise_conv2d", in_channels=spec.in_channels, kernel_size=1)
        )
        self.relu = ReLU(LayerSpec("relu"))
        self.conv = Conv2d(
            LayerSpec(
                "conv2d",
                in_channels=spec.in_channels,
                out_channels=spec.growth,
                kernel_size=k,
                stride=1,
                padding="same",
            )
        )
        self._subs = {"affine": self.affine, "conv": self.conv}

    @property
    def params(self) -> dict[str, np.ndarray]:  # type: ignore[override]
        return {
            f"{name}.{key}": arr
            for name, sub in self._subs.items()
            for key, arr in sub.params.items()
        }

    @params.setter
    def params(self, value: dict[str, np.ndarray]) -> None:
        if value:
            for full, arr in value.items():
                name, key = full.split(".", 1)
                self._subs[name].params[key] = arr

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_image_input(self, x, self.spec.in_channels)
        y = self.conv.forward(self.relu.forward(self.affine.forward(x)))
        self._cache = True
        return np.concatenate([x, y], axis=3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._take_cache()
        c = self.spec.in_channels
        dx_skip, dnew = dy[..., :c], dy[..., c:]
        dx = self.affine.backward(self.relu.backward(self.conv.backward(dnew)))
        self.grads = {
            f"{name}.{key}": arr
            for name, sub in self._subs.items()
            for key, arr in sub.grads.items()
        }
        return dx_skip + dx


_LAYER_CLASSES = {
    "conv2d": Conv2d,
    "depthwise_conv2d": DepthwiseConv2d,
    "pointwise_conv2d": PointwiseConv2d,
    "dense": Dense,
    "relu": ReLU,
    "global_avg_pool": GlobalAvgPool,
    "softmax": Softmax,
    "concat_dense_block": ConcatDenseBlock,
}


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float64) -> Layer:
    """Instantiate a layer with He-uniform weights and zero biases."""
    layer = _LAYER_CLASSES[spec.kind](spec)
    k = spec.kernel_size or 0
    if spec.kind == "conv2d":
        layer.params = {
            "weight": _he_uniform(rng, (k, k, spec.in_channels, spec.out_channels), k * k * spec.in_channels, dtype),
            "bias": np.zeros(spec.out_channels, dtype=dtype),
        }
    elif spec.kind == "depthwise_conv2d":
        layer.params = {
            "weight": _he_uniform(rng, (k, k, spec.in_channels), k * k, dtype),
            "bias": np.zeros(spec.in_channels, dtype=dtype),
        }
    elif spec.kind == "pointwise_conv2d":
        layer.params = {
            "weight": _he_uniform(rng, (spec.in_channels, spec.out_channels), spec.in_channels, dtype),
            "bias": np.zeros(spec.out_channels, dtype=dtype),
        }
    elif spec.kind == "dense":
        layer.params = {
            "weight": _he_uniform(rng, (spec.in_features, spec.units), spec.in_features, dtype),
            "bias": np.zeros(spec.units, dtype=dtype),
        }
    elif spec.kind == "concat_dense_block":
        block: ConcatDenseBlock = layer  # type: ignore[assignment]
        # Affine starts as identity; the inner conv gets the usual init.
        block.affine.params = {
            "weight": np.ones((1, 1, spec.in_channels), dtype=dtype),
            "bias": np.zeros(spec.in_channels, dtype=dtype),
        }
        kk = spec.kernel_size or 3
        block.conv.params = {
            "weight": _he_uniform(rng, (kk, kk, spec.in_channels, spec.growth), kk * kk * spec.in_channels, dtype),
            "bias": np.zeros(spec.growth, dtype=dtype),
        }
    return layer


def identity_affine(in_channels: int, trainable: bool = True) -> LayerSpec:
    """Per-channel scale/shift layer (normalization stand-in)."""
    return LayerSpec(
        "depthwise_conv2d", in_channels=in_channels, kernel_size=1, trainable=trainable
    )
