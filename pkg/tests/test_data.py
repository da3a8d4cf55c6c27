import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpautogan.data import (
    ColumnSpec, DataError, Schema, SchemaError, Table, infer_schema_unsafe, load_csv, postprocess,
    preprocess, split, write_csv,
)
from dpautogan.datasets import ADULT_SCHEMA, ADULT_TEST_ROWS, ADULT_TRAIN_ROWS, adult_available, load_adult

SCHEMA = Schema((
    ColumnSpec("color", "categorical", ("red", "green", "blue")),
    ColumnSpec("size", "continuous", min=-2.0, max=8.0),
    ColumnSpec("flag", "binary_label", ("no", "yes")),
), drop=("id",))

needs_adult = pytest.mark.skipif(not adult_available(), reason="ADULT files not downloaded")


def random_table(rng, m=30):
    return Table(SCHEMA, {"color": rng.integers(0, 3, m), "size": rng.uniform(-2, 8, m),
                          "flag": rng.integers(0, 2, m)})


def write_text(path, text):
    path.write_text(text)
    return path


def test_widths_and_offsets():
    assert SCHEMA.width == 5
    assert SCHEMA.offsets == ((0, 3), (3, 4), (4, 5))
    assert SCHEMA.slice("size") == slice(3, 4)
    assert SCHEMA.diameter == pytest.approx(np.sqrt(5))


def test_encoding_layout():
    t = Table.from_rows(SCHEMA, [["green", "3", "yes"], ["red", "-2", "no"]])
    X = preprocess(t)
    np.testing.assert_array_equal(X, [[0, 1, 0, 0.5, 1], [1, 0, 0, 0.0, 0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_encode_decode_roundtrip(seed):
    t = random_table(np.random.default_rng(seed))
    back = postprocess(preprocess(t), SCHEMA)
    assert back.equals(t, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_decoding_any_matrix_gives_valid_rows(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.5, 2.0, (20, SCHEMA.width))
    t = postprocess(X, SCHEMA)
    assert np.all((t.columns["color"] >= 0) & (t.columns["color"] < 3))
    assert np.all((t.columns["size"] >= -2) & (t.columns["size"] <= 8))
    assert set(np.unique(t.columns["flag"])) <= {0, 1}


def test_decoding_tie_and_threshold_rules():
    X = np.array([[0.4, 0.4, 0.1, 1.7, 0.5], [0.0, 0.3, 0.3, -1.0, 0.51]])
    t = postprocess(X, SCHEMA)
    np.testing.assert_array_equal(t.columns["color"], [0, 1])
    np.testing.assert_array_equal(t.columns["size"], [8.0, -2.0])
    np.testing.assert_array_equal(t.columns["flag"], [0, 1])
    with pytest.raises(DataError):
        postprocess(np.full((1, 5), np.nan), SCHEMA)
    with pytest.raises(DataError):
        postprocess(np.zeros((1, 4)), SCHEMA)


def test_csv_roundtrip_is_lossless(tmp_path):
    t = random_table(np.random.default_rng(0), 50)
    p = tmp_path / "t.csv"
    write_csv(t, p)
    back = load_csv(p, SCHEMA)
    assert back.equals(t)
    write_csv(back, tmp_path / "u.csv")
    assert p.read_bytes() == (tmp_path / "u.csv").read_bytes()


def test_csv_ignores_dropped_columns_and_reorders(tmp_path):
    p = write_text(tmp_path / "a.csv", "id,flag,size,color\n7,yes,1.5,blue\n")
    t = load_csv(p, SCHEMA)
    assert t.labels("color").tolist() == ["blue"] and t.columns["size"][0] == 1.5


@pytest.mark.parametrize("body,row,column", [
    ("color,size,flag\nred,1,no\npurple,1,no\n", 3, "color"),
    ("color,size,flag\nred,abc,no\n", 2, "size"),
    ("color,size,flag\nred,9.5,no\n", 2, "size"),
    ("color,size,flag\nred,nan,no\n", 2, "size"),
    ("color,size,flag\nred,1,\n", 2, "flag"),
    ("color,size,flag\nred,1\n", 2, None),
])
def test_csv_errors_name_row_and_column(tmp_path, body, row, column):
    with pytest.raises(DataError) as e:
        load_csv(write_text(tmp_path / "bad.csv", body), SCHEMA)
    assert e.value.row == row and e.value.column == column
    assert f"row {row}" in str(e.value)


def test_csv_header_problems(tmp_path):
    with pytest.raises(DataError):
        load_csv(write_text(tmp_path / "h.csv", "color,size\nred,1\n"), SCHEMA)
    with pytest.raises(DataError):
        load_csv(write_text(tmp_path / "x.csv", "color,size,flag,zzz\nred,1,no,3\n"), SCHEMA)
    with pytest.raises(DataError):
        load_csv(write_text(tmp_path / "e.csv", ""), SCHEMA)


@pytest.mark.parametrize("bad", [
    lambda: ColumnSpec("a", "ordinal"),
    lambda: ColumnSpec("a", "continuous", min=1.0, max=1.0),
    lambda: ColumnSpec("a", "categorical", ()),
    lambda: ColumnSpec("a", "categorical", ("x", "x")),
    lambda: ColumnSpec("a", "binary_label", ("x", "y", "z")),
    lambda: Schema((ColumnSpec("a", "categorical", ("x",)),) * 2),
    lambda: Schema((ColumnSpec("a", "categorical", ("x",)),), drop=("a",)),
    lambda: ColumnSpec.from_dict({"name": "a", "kind": "continuous", "min": 0}),
])
def test_schema_validation(bad):
    with pytest.raises(SchemaError):
        bad()


def test_schema_json_roundtrip(tmp_path):
    SCHEMA.save(tmp_path / "s.json")
    assert Schema.load(tmp_path / "s.json") == SCHEMA
    d = json.loads(SCHEMA.to_json())
    assert d["drop"] == ["id"] and d["columns"][1] == {"name": "size", "kind": "continuous",
                                                       "min": -2.0, "max": 8.0}


@given(st.integers(1, 300), st.floats(0.01, 0.99), st.integers(0, 100))
@settings(deadline=None)
def test_split_sizes_and_disjointness(m, frac, seed):
    t = Table(SCHEMA, {"color": np.zeros(m, int), "size": np.arange(m, dtype=float) % 8,
                       "flag": np.zeros(m, int)})
    t.columns["color"] = np.arange(m) % 3
    tr, te = split(t, frac, seed)
    assert tr.n_rows == round(frac * m) and tr.n_rows + te.n_rows == m


def test_split_is_seeded_and_order_preserving_variant():
    t = random_table(np.random.default_rng(1), 40)
    a1, _ = split(t, 0.5, seed=3)
    a2, _ = split(t, 0.5, seed=3)
    assert a1.equals(a2)
    head, tail = split(t, 0.25, preserve_order=True)
    assert head.equals(t.take(np.arange(10))) and tail.equals(t.take(np.arange(10, 40)))
    with pytest.raises(ValueError):
        split(t, 1.0)


def test_infer_schema_unsafe_warns(tmp_path, caplog):
    p = write_text(tmp_path / "d.csv", "id,a,b\n1,x,2.5\n2,y,-1\n3,x,4\n")
    with caplog.at_level("WARNING"):
        s = infer_schema_unsafe(p, drop=("id",))
    assert "privacy" in caplog.text
    assert s["a"].categories == ("x", "y")
    assert (s["b"].min, s["b"].max) == (-1.0, 4.0)
    assert load_csv(p, s).n_rows == 3


def test_adult_schema_encodes_to_expected_width():
    assert ADULT_SCHEMA.width == 106
    assert ADULT_SCHEMA["salary"].width == 1 and ADULT_SCHEMA["sex"].width == 1


@needs_adult
def test_adult_loader_and_canonical_split():
    t = load_adult()
    assert t.n_rows == ADULT_TRAIN_ROWS + ADULT_TEST_ROWS == 48842
    train, test = split(t, 2 / 3, preserve_order=True)
    assert (train.n_rows, test.n_rows) == (ADULT_TRAIN_ROWS, ADULT_TEST_ROWS)
    assert preprocess(t).shape == (48842, 106)
    assert postprocess(preprocess(t), ADULT_SCHEMA).equals(t, atol=1e-6)
    assert set(t.labels("salary")) == {"<=50K", ">50K"}
