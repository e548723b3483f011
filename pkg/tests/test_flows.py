import json

import numpy as np
import pytest

from trafficlens.errors import (
    DegenerateDatasetError,
    ParseError,
    SchemaError,
    TrafficLensWarning,
)
from trafficlens.flows import FlowSchema, FlowTable, clean, parse_flows


def _table(rows, **kwargs):
    """Build a FlowTable directly from (features..., label) tuples."""
    feats = np.array([r[:-1] for r in rows], dtype=np.float64)
    labels = [str(r[-1]).strip().casefold() for r in rows]
    names = kwargs.pop("feature_names", [f"f{i}" for i in range(feats.shape[1])])
    classes = kwargs.pop("class_names", sorted(set(labels)))
    incomplete = ~np.all(np.isfinite(feats), axis=1)
    return FlowTable(
        features=feats,
        labels=labels,
        feature_names=names,
        class_names=classes,
        incomplete=incomplete,
        **kwargs,
    )


class TestParse:
    def test_header_only_gives_empty_table(self, write_csv):
        path = write_csv([["a", "b", "Label"]])
        table = parse_flows(path)
        assert table.n_records == 0
        assert table.feature_names == ["a", "b"]

    def test_three_rows_two_features(self, write_csv):
        path = write_csv(
            [["a", "b", "Label"], [1, 2, "dns"], [3, 4, "dns"], [5, 6, "benign"]]
        )
        table = parse_flows(path)
        assert table.n_records == 3
        assert table.n_features == 2
        assert table.feature_names == ["a", "b"]
        assert np.array_equal(table.features, [[1, 2], [3, 4], [5, 6]])
        assert table.class_names == ["benign", "dns"]

    def test_non_numeric_cell_marked_incomplete(self, write_csv):
        path = write_csv([["a", "b", "Label"], [1, 2, "x"], ["NaN", 4, "x"], [5, "oops", "x"]])
        table = parse_flows(path)
        assert table.incomplete.tolist() == [False, True, True]

    def test_infinities_marked_incomplete(self, write_csv):
        path = write_csv([["a", "Label"], ["Infinity", "x"], [1, "x"]])
        table = parse_flows(path)
        assert table.incomplete.tolist() == [True, False]

    def test_missing_label_column(self, write_csv):
        path = write_csv([["a", "b"], [1, 2]])
        with pytest.raises(SchemaError, match="Label"):
            parse_flows(path)

    def test_ragged_row_parse_error(self, write_csv):
        path = write_csv([["a", "b", "Label"], [1, 2, "x"], [1, 2, 3, 4, "x"]])
        with pytest.raises(ParseError, match="line 3"):
            parse_flows(path)

    def test_labels_trimmed_and_case_folded(self, write_csv):
        path = write_csv([["a", "Label"], [1, " DNS "], [2, "dns"], [3, "Benign"]])
        table = parse_flows(path)
        assert table.class_names == ["Benign", "DNS"]
        assert table.labels == ["dns", "dns", "benign"]
        assert table.label_codes().tolist() == [1, 1, 0]

    def test_schema_pins_features_and_classes(self, write_csv, tmp_path):
        path = write_csv([["a", "b", "c", "Label"], [1, 2, 3, "x"], [4, 5, 6, "y"]])
        schema_path = tmp_path / "schema.json"
        schema_path.write_text(json.dumps({"feature_columns": ["c", "a"], "class_names": ["y", "x"]}))
        table = parse_flows(path, FlowSchema.from_json(schema_path))
        assert table.feature_names == ["c", "a"]
        assert np.array_equal(table.features, [[3, 1], [6, 4]])
        assert table.class_names == ["y", "x"]
        assert table.label_codes().tolist() == [1, 0]

    def test_schema_missing_feature_column(self, write_csv):
        path = write_csv([["a", "Label"], [1, "x"]])
        with pytest.raises(SchemaError, match="nope"):
            parse_flows(path, FlowSchema(feature_columns=("nope",)))

    def test_unknown_label_with_pinned_classes_is_incomplete(self, write_csv):
        path = write_csv([["a", "Label"], [1, "x"], [2, "mystery"]])
        table = parse_flows(path, FlowSchema(class_names=("x",)))
        assert table.incomplete.tolist() == [False, True]

    def test_record_view(self, write_csv):
        path = write_csv([["a", "b", "Label"], [1.5, 2.5, "x"]])
        record = parse_flows(path).record(0)
        assert record.features == (1.5, 2.5)
        assert record.label == "x"


class TestClean:
    def test_exact_duplicates_first_kept(self):
        table = _table([(1, 2, "x"), (1, 2, "x"), (3, 4, "x")])
        cleaned, report = clean(table)
        assert report.duplicates_removed == 1
        assert cleaned.n_records == 2
        assert np.array_equal(cleaned.features[:, 0], [1, 3])

    def test_same_features_different_label_not_duplicate(self):
        table = _table([(1, 2, "x"), (1, 2, "y"), (3, 4, "x")])
        cleaned, report = clean(table)
        assert report.duplicates_removed == 0
        assert cleaned.n_records == 3

    def test_constant_column_dropped_and_named(self):
        table = _table([(5.0, 1, "x"), (5.0, 2, "x"), (5.0, 3, "y")])
        cleaned, report = clean(table)
        assert report.constant_columns_removed == ["f0"]
        assert cleaned.feature_names == ["f1"]
        assert cleaned.n_features == 1

    def test_incomplete_rows_removed(self):
        table = _table([(1, 2, "x"), (np.nan, 3, "x"), (np.inf, 4, "x"), (5, 6, "y")])
        cleaned, report = clean(table)
        assert report.incomplete_removed == 2
        assert cleaned.n_records == 2

    def test_fixture_tally(self):
        # 10 rows: 2 duplicates, 1 incomplete, 1 constant column -> 7 x (F-1)
        rows = [
            (1, 9, 1, "a"), (2, 9, 2, "a"), (3, 9, 3, "a"), (1, 9, 1, "a"),
            (4, 9, 4, "b"), (5, 9, np.nan, "b"), (6, 9, 6, "b"), (2, 9, 2, "a"),
            (7, 9, 7, "b"), (8, 9, 8, "a"),
        ]
        table = _table(rows)
        cleaned, report = clean(table)
        assert report.duplicates_removed == 2
        assert report.incomplete_removed == 1
        assert report.constant_columns_removed == ["f1"]
        assert cleaned.n_records == 7
        assert cleaned.n_features == 2

    def test_clean_is_idempotent(self, rng):
        feats = rng.normal(size=(40, 5))
        feats[rng.integers(0, 40, 5), rng.integers(0, 5, 5)] = np.nan
        feats[:, 2] = 7.0
        rows = [tuple(feats[i]) + ("x" if i % 2 else "y",) for i in range(40)]
        rows += rows[:4]  # duplicates
        cleaned, _ = clean(_table(rows))
        again, report = clean(cleaned)
        assert report.duplicates_removed == 0
        assert report.incomplete_removed == 0
        assert report.constant_columns_removed == []
        assert again.n_records == cleaned.n_records

    def test_permutation_invariant_survivor_multiset(self, rng):
        rows = [(float(i % 7), float(i % 3), "x") for i in range(20)]
        table_a = _table(rows)
        perm = rng.permutation(len(rows))
        table_b = _table([rows[i] for i in perm])
        surv_a, _ = clean(table_a)
        surv_b, _ = clean(table_b)
        key = lambda t: sorted(
            (t.features[i].tobytes(), t.labels[i]) for i in range(t.n_records)
        )
        assert key(surv_a) == key(surv_b)

    def test_stats_match_recomputation(self, rng):
        rows = [tuple(rng.normal(size=3)) + ("x",) for _ in range(30)]
        cleaned, _ = clean(_table(rows))
        assert np.array_equal(cleaned.col_min, cleaned.features.min(axis=0))
        assert np.array_equal(cleaned.col_max, cleaned.features.max(axis=0))
        assert np.all(cleaned.col_min <= cleaned.col_max)

    def test_empty_after_cleaning_raises(self):
        table = _table([(np.nan, 1, "x"), (np.nan, 2, "x")])
        with pytest.raises(DegenerateDatasetError):
            clean(table)

    def test_all_columns_constant_raises(self):
        table = _table([(1, 1, "x"), (1, 1, "y")])
        # rows differ only in label, both columns constant
        with pytest.raises(DegenerateDatasetError):
            clean(table)

    def test_class_left_empty_warns(self):
        table = _table([(1, 2, "x"), (np.nan, 3, "y"), (4, 5, "x")])
        with pytest.warns(TrafficLensWarning, match="no records"):
            cleaned, _ = clean(table)
        assert cleaned.class_names == ["x", "y"]
