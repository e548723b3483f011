"""Flow-record CSV ingestion and cleaning.

Raw flow-feature CSVs (header row, one label column, numeric feature
columns) are parsed into a :class:`FlowTable`. Cells that are empty or do
not parse as finite numbers are kept but flagged, so that :func:`clean`
can remove them with an auditable tally. Cleaning applies, in order:
exact-duplicate removal, incomplete-record removal, constant-column
removal.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegenerateDatasetError,
    ParseError,
    SchemaError,
    TrafficLensWarning,
)

DEFAULT_LABEL_COLUMN = "Label"


@dataclass(frozen=True)
class FlowSchema:
    """Optional sidecar schema pinning the feature subset and class order.

    ``feature_columns`` restricts and reorders the feature set;
    ``class_names`` pins the class ordering (labels are matched to it
    case-insensitively after trimming). Either may be None to derive from
    the file.
    """

    label_column: str = DEFAULT_LABEL_COLUMN
    feature_columns: tuple[str, ...] | None = None
    class_names: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, path: str | Path) -> "FlowSchema":
        raw = json.loads(Path(path).read_text())
        return cls(
            label_column=raw.get("label_column", DEFAULT_LABEL_COLUMN),
            feature_columns=tuple(raw["feature_columns"]) if raw.get("feature_columns") else None,
            class_names=tuple(raw["class_names"]) if raw.get("class_names") else None,
        )


@dataclass(frozen=True)
class FlowRecord:
    """One flow: an ordered feature vector plus its class label."""

    features: tuple[float, ...]
    label: str


@dataclass
class CleanReport:
    duplicates_removed: int = 0
    incomplete_removed: int = 0
    constant_columns_removed: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "duplicates_removed": self.duplicates_removed,
            "incomplete_removed": self.incomplete_removed,
            "constant_columns_removed": list(self.constant_columns_removed),
        }


def _norm_label(label: str) -> str:
    return label.strip().casefold()


@dataclass
class FlowTable:
    """Parsed flow records with per-column statistics.

    ``features`` is an (N, F) float64 matrix; unparsable cells are NaN and
    the corresponding row is marked in ``incomplete``. ``labels`` holds the
    trimmed, case-normalized label per record; ``class_names`` the declared
    (display) class ordering. Treat instances as immutable once built.
    """

    features: np.ndarray
    labels: list[str]
    feature_names: list[str]
    class_names: list[str]
    incomplete: np.ndarray
    table_id: str = "table"

    col_min: np.ndarray = field(init=False)
    col_max: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ParseError("feature matrix must be 2-D")
        if self.features.shape[0] != len(self.labels):
            raise ParseError("label count does not match record count")
        self.incomplete = np.asarray(self.incomplete, dtype=bool)
        self.col_min, self.col_max = _column_stats(self.features)

    @property
    def n_records(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def label_codes(self) -> np.ndarray:
        """Class index per record; -1 for labels outside ``class_names``."""
        lut = {_norm_label(c): i for i, c in enumerate(self.class_names)}
        return np.array([lut.get(lab, -1) for lab in self.labels], dtype=np.int64)

    def record(self, i: int) -> FlowRecord:
        return FlowRecord(tuple(self.features[i].tolist()), self.labels[i])

    def __iter__(self) -> Iterator[FlowRecord]:
        return (self.record(i) for i in range(self.n_records))


def _column_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Statistics over finite cells only; a column with no finite cell gets 0/0.
    n_cols = features.shape[1]
    col_min = np.zeros(n_cols)
    col_max = np.zeros(n_cols)
    finite = np.isfinite(features)
    for j in range(n_cols):
        col = features[finite[:, j], j]
        if col.size:
            col_min[j] = col.min()
            col_max[j] = col.max()
    return col_min, col_max


def _display_class_names(labels: Sequence[str], raw_labels: Sequence[str]) -> list[str]:
    # Sorted by normalized name; display string is the first occurrence's casing.
    first_seen: dict[str, str] = {}
    for norm, raw in zip(labels, raw_labels):
        if norm and norm not in first_seen:
            first_seen[norm] = raw.strip()
    return [first_seen[k] for k in sorted(first_seen)]


def parse_flows(
    source: str | Path | IO[bytes] | IO[str],
    schema: FlowSchema | None = None,
    table_id: str | None = None,
) -> FlowTable:
    """Parse a flow-feature CSV into a FlowTable.

    Every data row becomes a record. Feature cells that are empty or not
    finite numbers are flagged (NaN + incomplete mask), never silently
    coerced; :func:`clean` removes them. Column order follows the file, or
    the schema's ``feature_columns`` when pinned.

    Raises:
        SchemaError: label column missing, or pinned feature columns absent.
        ParseError: ragged row (message carries the offending line number).
    """
    schema = schema or FlowSchema()
    try:
        frame = pd.read_csv(source, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed CSV: {exc}") from None
    except pd.errors.EmptyDataError:
        raise ParseError("CSV has no header row") from None

    columns = [str(c) for c in frame.columns]
    if schema.label_column not in columns:
        raise SchemaError(
            f"label column {schema.label_column!r} not found; columns are {columns}"
        )

    if schema.feature_columns is not None:
        missing = [c for c in schema.feature_columns if c not in columns]
        if missing:
            raise SchemaError(f"schema feature columns missing from CSV: {missing}")
        feature_names = list(schema.feature_columns)
    else:
        feature_names = [c for c in columns if c != schema.label_column]

    n = len(frame)
    features = np.full((n, len(feature_names)), np.nan)
    for j, name in enumerate(feature_names):
        features[:, j] = pd.to_numeric(frame[name], errors="coerce").to_numpy(dtype=np.float64)

    raw_labels = frame[schema.label_column].astype(str).tolist()
    labels = [_norm_label(lab) for lab in raw_labels]

    if schema.class_names is not None:
        class_names = list(schema.class_names)
    else:
        class_names = _display_class_names(labels, raw_labels)

    known = {_norm_label(c) for c in class_names}
    unknown_label = np.array([lab not in known for lab in labels], dtype=bool)
    nonfinite = ~np.all(np.isfinite(features), axis=1) if n else np.zeros(0, dtype=bool)
    incomplete = nonfinite | unknown_label

    if table_id is None:
        table_id = Path(source).stem if isinstance(source, (str, Path)) else "table"

    return FlowTable(
        features=features,
        labels=labels,
        feature_names=feature_names,
        class_names=class_names,
        incomplete=incomplete,
        table_id=table_id,
    )


def clean(table: FlowTable) -> tuple[FlowTable, CleanReport]:
    """Apply the cleaning rules and tally what was removed.

    Order is fixed: exact duplicates (identical feature bytes and label,
    first occurrence kept), then incomplete records, then columns left with
    a single distinct value. Running clean on its own output is a no-op.

    Raises:
        DegenerateDatasetError: no records or no feature columns survive.
    """
    report = CleanReport()
    feats = np.ascontiguousarray(table.features)
    keep = np.ones(table.n_records, dtype=bool)

    seen: set[tuple[bytes, str]] = set()
    for i in range(table.n_records):
        key = (feats[i].tobytes(), table.labels[i])
        if key in seen:
            keep[i] = False
            report.duplicates_removed += 1
        else:
            seen.add(key)

    dup_kept = keep.copy()
    keep &= ~table.incomplete
    report.incomplete_removed = int(dup_kept.sum() - keep.sum())

    feats = feats[keep]
    labels = [lab for lab, k in zip(table.labels, keep) if k]
    if feats.shape[0] == 0:
        raise DegenerateDatasetError("no records left after cleaning")

    constant = [
        j for j in range(feats.shape[1]) if np.unique(feats[:, j]).size <= 1
    ]
    report.constant_columns_removed = [table.feature_names[j] for j in constant]
    col_keep = [j for j in range(feats.shape[1]) if j not in set(constant)]
    if not col_keep:
        raise DegenerateDatasetError("every feature column is constant")
    feats = feats[:, col_keep]
    feature_names = [table.feature_names[j] for j in col_keep]

    cleaned = FlowTable(
        features=feats,
        labels=labels,
        feature_names=feature_names,
        class_names=list(table.class_names),
        incomplete=np.zeros(feats.shape[0], dtype=bool),
        table_id=table.table_id,
    )
    empty_classes = set(_norm_label(c) for c in cleaned.class_names) - set(labels)
    if empty_classes:
        warnings.warn(
            f"classes with no records after cleaning: {sorted(empty_classes)}",
            TrafficLensWarning,
            stacklevel=2,
        )
    return cleaned, report
