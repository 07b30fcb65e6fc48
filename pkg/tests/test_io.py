import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from didtools.data import Dataset
from didtools.exceptions import ValidationError
from didtools.io import (
    format_confidence_set,
    load_csv,
    parse_confidence_set,
    write_dataset_csv,
)
from didtools.weakiv import ConfidenceSet


class TestLoadCsv:
    def test_basic_typing(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,g\n1.5,a\n2.5,b\n3.5,a\n", encoding="utf-8")
        data = load_csv(path)
        assert data.n_rows == 3
        assert not data.is_categorical("x")
        assert data.is_categorical("g")
        np.testing.assert_allclose(data.numeric("x"), [1.5, 2.5, 3.5])

    def test_missing_in_required_column_names_row(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y\n1,2\n,3\n4,5\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="column 'x'.*line 3"):
            load_csv(path, require=["x"])

    def test_missing_count_reported(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x\n1\nna\n.\n4\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="2 row"):
            load_csv(path, require=["x"])

    def test_forced_numeric_coercion_failure_names_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x\n1\noops\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="'oops'.*line 3"):
            load_csv(path, numeric=["x"])

    def test_unreferenced_missing_tolerated(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y\n1,2\n,3\n", encoding="utf-8")
        data = load_csv(path, require=["y"])
        assert np.isnan(data.numeric("x")[1])

    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(90)
        data = Dataset.from_columns(
            {
                "a": rng.normal(size=20) * np.exp(rng.normal(size=20) * 5),
                "b": rng.normal(size=20),
                "g": rng.integers(0, 3, size=20).astype(str),
            },
            categorical=["g"],
        )
        path = tmp_path / "round.csv"
        write_dataset_csv(data, path)
        back = load_csv(path, categorical=["g"])
        for col in ("a", "b"):
            np.testing.assert_array_equal(back.numeric(col), data.numeric(col))
        cat0, cat1 = data.categorical("g"), back.categorical("g")
        np.testing.assert_array_equal(cat0.levels[cat0.codes], cat1.levels[cat1.codes])

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("x,y\n1,2\n3\n", encoding="utf-8")
        with pytest.raises(ValidationError, match="line 3"):
            load_csv(path)


class TestIntervalNotation:
    def test_paper_shapes(self):
        bounded = ConfidenceSet(intervals=((-0.58, 0.97),), level=0.95)
        assert format_confidence_set(bounded) == "[-0.58, 0.97]"
        unbounded = ConfidenceSet(intervals=((-np.inf, np.inf),), level=0.95)
        assert format_confidence_set(unbounded) == "(-inf, inf)"
        disjoint = ConfidenceSet(
            intervals=((-np.inf, -0.37), (0.04, np.inf)), level=0.95
        )
        assert format_confidence_set(disjoint) == "(-inf, -0.37] U [0.04, inf)"
        assert format_confidence_set(ConfidenceSet(intervals=(), level=0.95)) == "{}"

    def test_parse_inverse(self):
        for text in (
            "[-0.58, 0.97]",
            "(-inf, inf)",
            "(-inf, -0.37] U [0.04, inf)",
            "{}",
        ):
            assert format_confidence_set(parse_confidence_set(text)) == text

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.floats(
                min_value=-1e12, max_value=1e12, allow_nan=False, allow_subnormal=False
            ),
            min_size=0,
            max_size=8,
        ),
        st.booleans(),
        st.booleans(),
    )
    def test_round_trip_fuzz(self, points, open_left, open_right):
        points = sorted(set(points))
        intervals = []
        it = iter(points)
        for lo, hi in zip(it, it):
            intervals.append((lo, hi))
        if open_left and intervals:
            intervals[0] = (-np.inf, intervals[0][1])
        if open_right and intervals:
            intervals[-1] = (intervals[-1][0], np.inf)
        cset = ConfidenceSet(intervals=tuple(intervals), level=0.95)
        text = format_confidence_set(cset)
        back = parse_confidence_set(text, level=0.95)
        assert back.intervals == cset.intervals

    def test_malformed_rejected(self):
        for bad in ("[1, 2", "[2, 1]", "(0.5, 1.0]", "[a, b]", "[1,2] U"):
            with pytest.raises(ValidationError):
                parse_confidence_set(bad)
