"""Flow-table to traffic-image encoding, dataset persistence, splitting.

A cleaned :class:`~trafficlens.flows.FlowTable` is turned into labeled
60x60x3 images: records are grouped by class, taken in consecutive
disjoint chunks of 180, and each chunk fills one image (records 0-59 on
the red channel, 60-119 green, 120-179 blue, one record per pixel row).
Feature values are min-max scaled to [0, 255] with per-column statistics
from the full cleaned table and rounded half-up to integer pixels.

Datasets persist in a little-endian binary container (magic ``TRIM``)
that round-trips bit-identically, including the stratified split block.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    StatisticsError,
    TrafficLensWarning,
)
from .flows import FlowTable

IMAGE_WIDTH = 60
RECORDS_PER_IMAGE = 180
CHANNELS = 3

_MAGIC = b"TRIM"
_VERSION = 1


@dataclass(frozen=True)
class TrafficImage:
    """One encoded traffic image: pixel grid, class index, source chunk."""

    pixels: np.ndarray  # (H, W, 3) uint8
    label: int
    provenance: tuple[str, int]  # (source table id, first record index)

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != CHANNELS:
            raise DataError(f"pixel grid must be (H, W, 3), got {px.shape}")
        object.__setattr__(self, "pixels", px)


@dataclass
class ImageDataset:
    """Stack of traffic images with class bookkeeping."""

    pixels: np.ndarray  # (N, H, W, 3) uint8
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise DataError("pixels must be (N, H, W, 3)")
        if len(self.labels) != len(self.pixels):
            raise DataError("label count does not match image count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index outside the declared class set")
        if not self.provenance:
            self.provenance = [("", 0)] * len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def image(self, i: int) -> TrafficImage:
        return TrafficImage(self.pixels[i], int(self.labels[i]), self.provenance[i])


@dataclass
class DatasetSplit:
    """Disjoint train/validation/test index lists into an ImageDataset."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        self.train = np.asarray(self.train, dtype=np.int64)
        self.validation = np.asarray(self.validation, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)

    def parts(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


def normalize_column(values: Sequence[float] | np.ndarray, col_min: float, col_max: float) -> np.ndarray:
    """Min-max scale values to [0, 255]; a constant column maps to all zeros.

    Raises:
        StatisticsError: col_min > col_max.
    """
    if col_min > col_max:
        raise StatisticsError(f"column min {col_min} exceeds max {col_max}")
    values = np.asarray(values, dtype=np.float64)
    if col_max == col_min:
        return np.zeros_like(values)
    return (values - col_min) / (col_max - col_min) * 255.0


def _round_half_up_u8(values: np.ndarray) -> np.ndarray:
    # Values are within [0, 255] by construction, so floor(x + 0.5) is safe.
    return np.floor(values + 0.5).astype(np.uint8)


def encode_images(
    table: FlowTable,
    width: int = IMAGE_WIDTH,
    records_per_image: int = RECORDS_PER_IMAGE,
) -> ImageDataset:
    """Encode a cleaned flow table into per-class traffic images.

    Records are grouped by class first so that every chunk is label-pure;
    each class contributes floor(count / records_per_image) images and a
    trailing partial chunk is discarded. A record's first ``width``
    normalized features form one pixel row (zero-padded right when the
    table has fewer features, truncated when it has more).
    """
    if records_per_image != CHANNELS * width:
        raise ConfigError(
            f"records_per_image must be {CHANNELS} * width "
            f"({CHANNELS * width}), got {records_per_image}"
        )

    n_feat = min(table.n_features, width)
    norm = np.zeros((table.n_records, width), dtype=np.float64)
    for j in range(n_feat):
        norm[:, j] = normalize_column(table.features[:, j], table.col_min[j], table.col_max[j])
    rows_u8 = _round_half_up_u8(norm)

    codes = table.label_codes()
    pixel_blocks: list[np.ndarray] = []
    labels: list[int] = []
    provenance: list[tuple[str, int]] = []

    for k in range(len(table.class_names)):
        idx = np.flatnonzero(codes == k)
        n_images = len(idx) // records_per_image
        if n_images == 0:
            warnings.warn(
                f"class {table.class_names[k]!r} has {len(idx)} records "
                f"(< {records_per_image}); zero images emitted",
                TrafficLensWarning,
                stacklevel=2,
            )
            continue
        used = idx[: n_images * records_per_image]
        chunked = rows_u8[used].reshape(n_images, CHANNELS, width, width)
        # (image, channel, row, col) -> (image, row, col, channel)
        pixel_blocks.append(np.transpose(chunked, (0, 2, 3, 1)))
        labels.extend([k] * n_images)
        provenance.extend(
            (table.table_id, int(used[m * records_per_image])) for m in range(n_images)
        )

    if pixel_blocks:
        pixels = np.ascontiguousarray(np.concatenate(pixel_blocks, axis=0))
    else:
        pixels = np.zeros((0, width, width, CHANNELS), dtype=np.uint8)
    return ImageDataset(
        pixels=pixels,
        labels=np.asarray(labels, dtype=np.int64),
        class_names=list(table.class_names),
        provenance=provenance,
    )


def _take_rounded(count: int, frac: float) -> int:
    return int(np.floor(count * frac + 0.5))


def stratified_split(
    dataset: ImageDataset,
    val_frac: float = 0.2,
    test_frac: float = 0.2,
    seed: int = 0,
) -> DatasetSplit:
    """Seed-deterministic stratified split into train/validation/test.

    Per class, ``test_frac`` of the images is held out for testing first,
    then ``val_frac`` of the remainder becomes validation, the rest
    training (0.2/0.2 yields 64/16/20 overall). Class proportions land
    within one sample of the global fractions; rounding is half-up.

    Raises:
        ConfigError: a fraction outside (0, 1).
        DataError: a class with zero images.
    """
    for name, frac in (("val_frac", val_frac), ("test_frac", test_frac)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {frac}")
    counts = dataset.class_counts
    empty = [dataset.class_names[k] for k in np.flatnonzero(counts == 0)]
    if empty:
        raise DataError(f"cannot stratify: classes with zero images: {empty}")

    rng = np.random.default_rng(seed)
    train_parts: list[np.ndarray] = []
    val_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for k in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if len(idx) < 3:
            warnings.warn(
                f"class {dataset.class_names[k]!r} has only {len(idx)} images; "
                "rounding may leave some parts empty",
                TrafficLensWarning,
                stacklevel=2,
            )
        rng.shuffle(idx)
        n_test = _take_rounded(len(idx), test_frac)
        remainder = len(idx) - n_test
        n_val = _take_rounded(remainder, val_frac)
        test_parts.append(idx[:n_test])
        val_parts.append(idx[n_test : n_test + n_val])
        train_parts.append(idx[n_test + n_val :])

    return DatasetSplit(
        train=np.concatenate(train_parts),
        validation=np.concatenate(val_parts),
        test=np.concatenate(test_parts),
        seed=seed,
    )


# --- binary container -------------------------------------------------------


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("dataset file truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(cur: _Cursor) -> str:
    (n,) = cur.unpack("<H")
    return cur.take(n).decode("utf-8")


def save_dataset(dataset: ImageDataset, split: DatasetSplit | None, path: str | Path) -> None:
    """Serialize dataset (and optional split) to the TRIM container."""
    h, w = (dataset.pixels.shape[1], dataset.pixels.shape[2]) if len(dataset) else (IMAGE_WIDTH, IMAGE_WIDTH)
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<HHIHH", _VERSION, dataset.n_classes, len(dataset), h, w)
    for name in dataset.class_names:
        out += _pack_str(name)

    prov_ids = sorted({p[0] for p in dataset.provenance})
    prov_lut = {p: i for i, p in enumerate(prov_ids)}
    out += struct.pack("<H", len(prov_ids))
    for p in prov_ids:
        out += _pack_str(p)
    for (src, first), label in zip(dataset.provenance, dataset.labels):
        out += struct.pack("<HHI", int(label), prov_lut[src], first)

    out += np.ascontiguousarray(dataset.pixels).tobytes()

    if split is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<Bq", 1, split.seed)
        for part in (split.train, split.validation, split.test):
            out += struct.pack("<I", len(part))
            out += np.asarray(part, dtype="<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_dataset(path: str | Path) -> tuple[ImageDataset, DatasetSplit | None]:
    """Load a TRIM container written by :func:`save_dataset`.

    Raises:
        FormatError: wrong magic/version or truncated content.
    """
    cur = _Cursor(Path(path).read_bytes())
    if cur.take(4) != _MAGIC:
        raise FormatError(f"{path}: not a TRIM dataset file")
    version, n_classes, n_images, h, w = cur.unpack("<HHIHH")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")

    class_names = [_read_str(cur) for _ in range(n_classes)]
    prov_ids = [_read_str(cur) for _ in range(cur.unpack("<H")[0])]
    labels = np.zeros(n_images, dtype=np.int64)
    provenance: list[tuple[str, int]] = []
    for i in range(n_images):
        label, prov_idx, first = cur.unpack("<HHI")
        if label >= n_classes or prov_idx >= max(len(prov_ids), 1):
            raise FormatError(f"{path}: corrupt image metadata at index {i}")
        labels[i] = label
        provenance.append((prov_ids[prov_idx], first))

    payload = cur.take(n_images * h * w * CHANNELS)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n_images, h, w, CHANNELS).copy()

    (has_split,) = cur.unpack("<B")
    split = None
    if has_split:
        (seed,) = cur.unpack("<q")
        parts = []
        for _ in range(3):
            (n,) = cur.unpack("<I")
            parts.append(np.frombuffer(cur.take(4 * n), dtype="<u4").astype(np.int64))
        split = DatasetSplit(train=parts[0], validation=parts[1], test=parts[2], seed=seed)

    dataset = ImageDataset(
        pixels=pixels, labels=labels, class_names=class_names, provenance=provenance
    )
    return dataset, split


# --- PNG export --------------------------------------------------------------


def png_bytes(pixels: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as an 8-bit RGB PNG."""
    arr = np.asarray(pixels, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PNG export needs an (H, W, 3) grid, got {arr.shape}")
    h, w = arr.shape[:2]

    def chunk(tag: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body))
            + tag
            + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit RGB, no interlace
    raw = b"".join(b"\x00" + arr[r].tobytes() for r in range(h))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def export_png(image: TrafficImage | np.ndarray, path: str | Path) -> None:
    """Write a traffic image (or raw RGB grid) as a PNG file."""
    pixels = image.pixels if isinstance(image, TrafficImage) else image
    Path(path).write_bytes(png_bytes(pixels))
