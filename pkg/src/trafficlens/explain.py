"""Attribution methods and quantified interpretability scores.

Grad-CAM produces a non-negative, max-normalized 60x60 saliency grid from
the gradients at a convolutional tap layer. KernelSHAP assigns one signed
Shapley value per pixel region via weighted least squares over masked
coalitions (exact enumeration for small partitions, kernel-weighted
sampling otherwise). Five numeric scores summarize map quality: spatial
compactness, background suppression, class consistency, attribution
magnitude, and positive/negative separation; models are ranked by the
mean of the min-max normalized scores.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InsufficientSamplingError,
    PartitionError,
    TrafficLensWarning,
)
from .imaging import TrafficImage, png_bytes
from .models import Model

_CONV_KINDS = ("conv2d", "depthwise_conv2d", "pointwise_conv2d", "concat_dense_block")

QUALITY_AXES = (
    "spatial_compactness",
    "background_suppression",
    "class_consistency",
    "shap_magnitude",
    "pos_neg_separation",
)


@dataclass
class AttributionMap:
    """Per-pixel relevance grid for one sample and target class."""

    values: np.ndarray  # (H, W)
    kind: str  # "gradcam" (non-negative, max-normalized) or "shap" (signed)
    target_class: int | None = None
    provenance: tuple | None = None
    region_labels: np.ndarray | None = None
    region_values: np.ndarray | None = None
    base_value: float | None = None  # f(baseline), shap only
    full_value: float | None = None  # f(image), shap only

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError(f"attribution values must be 2-D, got {self.values.shape}")
        if self.kind not in ("gradcam", "shap"):
            raise ConfigError(f"attribution kind must be gradcam or shap, got {self.kind!r}")
        if self.kind == "gradcam":
            if self.values.min() < 0:
                raise ConfigError("gradcam map must be non-negative")
            peak = self.values.max()
            if peak != 0.0 and abs(peak - 1.0) > 1e-9:
                raise ConfigError("gradcam map must be max-normalized (or all zero)")


def to_float_image(image: TrafficImage | np.ndarray) -> np.ndarray:
    """(H, W, 3) float64 grid in [0, 1] from a TrafficImage or raw array."""
    arr = image.pixels if isinstance(image, TrafficImage) else np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel-center alignment."""
    h, w = grid.shape
    if (h, w) == (out_h, out_w):
        return grid.copy()

    def axis_coords(n_in: int, n_out: int):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, ty = axis_coords(h, out_h)
    x0, x1, tx = axis_coords(w, out_w)
    top = grid[np.ix_(y0, x0)] * (1 - tx) + grid[np.ix_(y0, x1)] * tx
    bot = grid[np.ix_(y1, x0)] * (1 - tx) + grid[np.ix_(y1, x1)] * tx
    return top * (1 - ty[:, None]) + bot * ty[:, None]


def default_tap_layer(model: Model) -> int:
    """Index of the last convolutional layer before global average pooling."""
    gap = next(
        (i for i, l in enumerate(model.layers) if l.spec.kind == "global_avg_pool"),
        len(model.layers),
    )
    for i in range(gap - 1, -1, -1):
        if model.layers[i].spec.kind in _CONV_KINDS:
            return i
    raise ConfigError(f"{model.name}: no convolutional layer to tap")


def grad_cam(
    model: Model,
    image: TrafficImage | np.ndarray,
    target_class: int,
    tap_layer: int | None = None,
) -> AttributionMap:
    """Gradient-weighted class activation map, upsampled to the input grid.

    Channel weights are the spatial means of d(logit of target_class)/dA at
    the tap layer; the map is relu(sum_k alpha_k A_k), bilinearly resized,
    and divided by its max (an all-zero map stays all zero).

    Raises:
        ConfigError: tap layer is not convolutional or class index invalid.
    """
    if not 0 <= target_class < model.n_classes:
        raise ConfigError(f"target class {target_class} outside [0, {model.n_classes})")
    tap = default_tap_layer(model) if tap_layer is None else tap_layer
    if not 0 <= tap < len(model.layers) or model.layers[tap].spec.kind not in _CONV_KINDS:
        kind = model.layers[tap].spec.kind if 0 <= tap < len(model.layers) else "missing"
        raise ConfigError(f"tap layer {tap} ({kind}) is not convolutional")

    x = to_float_image(image)[None]
    out = model._check_input(x)
    activations: list[np.ndarray] = []
    for layer in model.layers:
        out = layer.forward(out)
        activations.append(out)

    dy = np.zeros((1, model.n_classes), dtype=model.dtype)
    dy[0, target_class] = 1.0
    for i in range(len(model.layers) - 2, tap, -1):
        dy = model.layers[i].backward(dy)

    feature_map = activations[tap][0]  # (h, w, C)
    alpha = dy[0].mean(axis=(0, 1))  # (C,)
    raw = np.maximum(feature_map @ alpha, 0.0)
    h, w, _ = x.shape[1:]
    cam = bilinear_resize(raw, h, w)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    prov = image.provenance if isinstance(image, TrafficImage) else None
    return AttributionMap(values=cam, kind="gradcam", target_class=target_class, provenance=prov)


def class_score_fn(model: Model, target_class: int) -> Callable[[np.ndarray], np.ndarray]:
    """Batch score function (predicted probability of one class) for SHAP."""
    def score(batch: np.ndarray) -> np.ndarray:
        return model.forward(batch)[:, target_class]
    return score


def region_grid(cells_per_side: int, size: int = 60) -> np.ndarray:
    """Square superpixel partition labels, ``cells_per_side ** 2`` regions."""
    if size % cells_per_side != 0:
        raise PartitionError(f"{cells_per_side} cells do not tile a {size}-pixel side")
    cell = size // cells_per_side
    rows = np.arange(size) // cell
    return (rows[:, None] * cells_per_side + rows[None, :]).astype(np.int64)


def _validate_partition(labels: np.ndarray, shape: tuple[int, int]) -> int:
    labels = np.asarray(labels)
    if labels.shape != shape:
        raise PartitionError(f"region labels shape {labels.shape} != image grid {shape}")
    ids = np.unique(labels)
    n = len(ids)
    if labels.min() < 0 or not np.array_equal(ids, np.arange(n)):
        raise PartitionError("region labels must cover 0..R-1 with every region non-empty")
    return n


def _shapley_kernel_weight(n_regions: int, size: int) -> float:
    return (n_regions - 1) / (
        math.comb(n_regions, size) * size * (n_regions - size)
    )


def _coalitions(
    n_regions: int, budget: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Coalition matrix (M, R) of {0,1} plus per-row regression weights.

    Enumerates complete size classes in decreasing kernel-weight order while
    the budget allows (exact weights); the first class that does not fit is
    sampled, with its class weight spread over the sampled rows. The empty
    and full coalitions are excluded (they are pinned as constraints).
    """
    sizes = sorted(range(1, n_regions), key=lambda s: (-_shapley_kernel_weight(n_regions, s), s))
    remaining = budget - 2
    rows: list[np.ndarray] = []
    weights: list[float] = []
    for s in sizes:
        count = math.comb(n_regions, s)
        w = _shapley_kernel_weight(n_regions, s)
        if count <= remaining:
            for combo in itertools.combinations(range(n_regions), s):
                z = np.zeros(n_regions)
                z[list(combo)] = 1.0
                rows.append(z)
                weights.append(w)
            remaining -= count
        elif remaining > 0:
            seen: set[tuple[int, ...]] = set()
            # over-draw and dedupe; collisions are rare for large classes
            while len(seen) < remaining:
                combo = tuple(sorted(rng.choice(n_regions, size=s, replace=False).tolist()))
                seen.add(combo)
            for combo in sorted(seen):
                z = np.zeros(n_regions)
                z[list(combo)] = 1.0
                rows.append(z)
                weights.append(w * count / len(seen))
            remaining = 0
        if remaining == 0:
            break
    return np.array(rows), np.array(weights)


def kernel_shap(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    image: TrafficImage | np.ndarray,
    baseline: np.ndarray | None = None,
    regions: np.ndarray | None = None,
    budget: int = 256,
    seed: int = 0,
    target_class: int | None = None,
    batch_size: int = 128,
) -> AttributionMap:
    """Shapley-value attribution over a pixel-region partition.

    Each coalition keeps its member regions from ``image`` and takes the
    rest from ``baseline`` (default: all-zero). With R regions and
    ``budget >= 2**R`` (R <= 12) every coalition is enumerated and the
    weighted regression reproduces exact Shapley values; otherwise
    coalitions are drawn by kernel weight within the budget. The empty and
    full coalitions are always evaluated and pinned, so the region values
    sum to f(image) - f(baseline).

    Raises:
        PartitionError: labels do not partition the grid.
        InsufficientSamplingError: budget < regions + 2.
    """
    img = to_float_image(image)
    h, w = img.shape[:2]
    if regions is None:
        regions = region_grid(6, size=h)
    labels = np.asarray(regions)
    n_regions = _validate_partition(labels, (h, w))
    if budget < n_regions + 2:
        raise InsufficientSamplingError(
            f"budget {budget} below minimum {n_regions + 2} for {n_regions} regions"
        )
    base = np.zeros_like(img) if baseline is None else to_float_image(baseline)
    if base.shape != img.shape:
        raise ConfigError(f"baseline shape {base.shape} != image shape {img.shape}")

    rng = np.random.default_rng(seed)
    if n_regions <= 12 and budget >= 2**n_regions:
        z_rows, weights = _coalitions(n_regions, 2**n_regions, rng)
    else:
        z_rows, weights = _coalitions(n_regions, budget, rng)

    v0 = float(predict_fn(base[None])[0])
    v1 = float(predict_fn(img[None])[0])

    values = np.empty(len(z_rows))
    for start in range(0, len(z_rows), batch_size):
        chunk = z_rows[start : start + batch_size]
        present = chunk[:, labels].astype(bool)  # (m, H, W)
        masked = np.where(present[..., None], img[None], base[None])
        values[start : start + len(chunk)] = predict_fn(masked)

    # Weighted least squares with the efficiency constraint eliminating the
    # last region: phi_R = (v1 - v0) - sum(phi_1..R-1).
    a = z_rows[:, :-1] - z_rows[:, -1:]
    t = values - v0 - z_rows[:, -1] * (v1 - v0)
    sw = np.sqrt(weights)[:, None]
    phi_rest, *_ = np.linalg.lstsq(a * sw, t * sw[:, 0], rcond=None)
    phi = np.concatenate([phi_rest, [(v1 - v0) - phi_rest.sum()]])

    prov = image.provenance if isinstance(image, TrafficImage) else None
    return AttributionMap(
        values=phi[labels],
        kind="shap",
        target_class=target_class,
        provenance=prov,
        region_labels=labels,
        region_values=phi,
        base_value=v0,
        full_value=v1,
    )


# --- quality scores -----------------------------------------------------------


def spatial_compactness(amap: AttributionMap, top_fraction: float = 0.1) -> float:
    """Share of absolute attribution mass in the top ``top_fraction`` pixels."""
    mass = np.abs(amap.values).ravel()
    total = mass.sum()
    if total == 0.0:
        warnings.warn("compactness of an all-zero map is 0", TrafficLensWarning, stacklevel=2)
        return 0.0
    k = max(1, int(round(top_fraction * mass.size)))
    top = np.sort(mass)[mass.size - k :]
    return float(top.sum() / total)


def background_suppression(
    amap: AttributionMap,
    image: TrafficImage | np.ndarray,
    intensity_threshold: float = 10.0 / 255.0,
) -> float:
    """1 - (attribution mass on dark background pixels / total mass).

    Background pixels have mean channel intensity below the threshold.
    Returns 1.0 (with a warning) when there is no background or no mass.
    """
    img = to_float_image(image)
    bg = img.mean(axis=2) < intensity_threshold
    mass = np.abs(amap.values)
    total = mass.sum()
    if not bg.any():
        warnings.warn("no background pixels below threshold", TrafficLensWarning, stacklevel=2)
        return 1.0
    if total == 0.0:
        warnings.warn("suppression of an all-zero map is 1", TrafficLensWarning, stacklevel=2)
        return 1.0
    return float(1.0 - mass[bg].sum() / total)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def class_consistency(maps_by_class: Mapping[object, Sequence[AttributionMap]]) -> float:
    """Mean over classes of the mean pairwise cosine similarity of maps.

    Classes with fewer than two maps are excluded with a warning.
    """
    per_class = []
    skipped = []
    for cls in sorted(maps_by_class, key=str):
        flats = [m.values.ravel() for m in maps_by_class[cls]]
        if len(flats) < 2:
            skipped.append(cls)
            continue
        sims = [
            _cosine(flats[i], flats[j])
            for i in range(len(flats))
            for j in range(i + 1, len(flats))
        ]
        per_class.append(float(np.mean(sims)))
    if skipped:
        warnings.warn(
            f"class consistency: classes with <2 maps excluded: {skipped}",
            TrafficLensWarning,
            stacklevel=2,
        )
    if not per_class:
        warnings.warn("class consistency undefined; returning 0", TrafficLensWarning, stacklevel=2)
        return 0.0
    return float(np.mean(per_class))


def shap_summary(maps: Sequence[AttributionMap]) -> tuple[float, float]:
    """(magnitude, positive/negative separation) over a set of SHAP maps.

    Magnitude is the largest absolute region value anywhere; separation per
    map is |pos - neg| / (pos + neg) for the positive and absolute negative
    mass (0 = balanced, 1 = one-sided), averaged over maps.
    """
    if not maps:
        raise ConfigError("shap_summary needs at least one map")
    magnitude = 0.0
    separations = []
    zero_mass = 0
    for m in maps:
        phi = m.region_values if m.region_values is not None else m.values.ravel()
        magnitude = max(magnitude, float(np.abs(phi).max()))
        pos = float(phi[phi > 0].sum())
        neg = float(-phi[phi < 0].sum())
        if pos + neg == 0.0:
            zero_mass += 1
            separations.append(0.0)
        else:
            separations.append(abs(pos - neg) / (pos + neg))
    if zero_mass:
        warnings.warn(
            f"{zero_mass} zero-mass map(s) counted as separation 0",
            TrafficLensWarning,
            stacklevel=2,
        )
    return magnitude, float(np.mean(separations))


@dataclass
class ExplainQualityReport:
    """The five numeric interpretability scores for one model."""

    model: str
    spatial_compactness: float
    background_suppression: float
    class_consistency: float
    shap_magnitude: float
    pos_neg_separation: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExplainQualityReport":
        return cls(**raw)


@dataclass
class RankEntry:
    rank: int
    model: str
    composite: float
    normalized: dict[str, float] = field(default_factory=dict)


def interpretability_rank(reports: Sequence[ExplainQualityReport]) -> list[RankEntry]:
    """Rank models by the mean of min-max normalized quality scores.

    When an axis is constant across models every model receives the neutral
    value 0.5 on it. Ties in the composite break alphabetically.
    """
    if not reports:
        raise ConfigError("interpretability_rank needs at least one report")
    norms: dict[str, dict[str, float]] = {r.model: {} for r in reports}
    for axis in QUALITY_AXES:
        vals = np.array([getattr(r, axis) for r in reports], dtype=np.float64)
        lo, hi = float(vals.min()), float(vals.max())
        for r, v in zip(reports, vals):
            norms[r.model][axis] = 0.5 if hi == lo else (float(v) - lo) / (hi - lo)
    composites = {
        m: float(np.mean([axes[a] for a in QUALITY_AXES])) for m, axes in norms.items()
    }
    ordered = sorted(composites, key=lambda m: (-composites[m], m))
    return [
        RankEntry(rank=i + 1, model=m, composite=composites[m], normalized=norms[m])
        for i, m in enumerate(ordered)
    ]


# --- export -------------------------------------------------------------------


def overlay_png_bytes(amap: AttributionMap, image: TrafficImage | np.ndarray, alpha: float = 0.5) -> bytes:
    """Heatmap alpha-blended over the traffic image as PNG bytes.

    Grad-CAM intensity renders red-to-yellow; SHAP renders positive values
    red and negative blue, scaled by the largest magnitude.
    """
    img = to_float_image(image)
    v = amap.values
    heat = np.zeros_like(img)
    if amap.kind == "gradcam":
        heat[..., 0] = v
        heat[..., 1] = v**2
    else:
        peak = np.abs(v).max()
        scaled = v / peak if peak > 0 else v
        heat[..., 0] = np.clip(scaled, 0, 1)
        heat[..., 2] = np.clip(-scaled, 0, 1)
    blended = (1 - alpha) * img + alpha * heat
    return png_bytes(np.floor(np.clip(blended, 0, 1) * 255 + 0.5).astype(np.uint8))
