import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psm.dataset import (
    ColumnEncoding,
    EncodingSet,
    Mode,
    decode,
    digit_width,
    dump_dataset,
    encode,
    infer_encodings,
    split_indices,
    tally,
)
from psm.errors import DatasetError, DatasetWarning
from psm.structure import DataType, FeatureColumnSpec, ModelSpec, Role
from psm.trace import InvocationRecord

NUM = DataType.NUMBER
TXT = DataType.TEXT


def _spec(*cols, node=5, domain=(1, 2, 3)):
    return ModelSpec(node, tuple(FeatureColumnSpec(c, Role.PA, i, t) for i, (c, t) in enumerate(cols)), domain)


def _records(rows, node=5, callers=None):
    callers = callers or [1] * len(rows)
    return [InvocationRecord(node, i, c, r) for i, (r, c) in enumerate(zip(rows, callers))]


def _dataset(columns, n, seed=0, callers=None):
    """Dataset with the given column -> value-generator mapping."""
    spec = _spec(*[(c, TXT if isinstance(f(0), str) else NUM) for c, f in columns.items()])
    rows = [{c: f(i) for c, f in columns.items()} for i in range(n)]
    return tally(_records(rows, callers=callers), spec, seed)


def test_thousand_rows_kept():
    ds = _dataset({"x": float}, 1000)
    assert ds.row_count == 1000 and ds.eligible


def test_nineteen_rows_ineligible():
    ds = _dataset({"x": float}, 19)
    assert not ds.eligible and "19 rows" in ds.reason
    with pytest.raises(DatasetError):
        infer_encodings(ds)


def test_twenty_rows_eligible():
    assert _dataset({"x": float}, 20).eligible


def test_large_dataset_subsampled_to_cap():
    ds = _dataset({"x": float}, 25000, seed=3)
    assert ds.row_count == 10000
    again = _dataset({"x": float}, 25000, seed=3)
    np.testing.assert_array_equal(ds.data["x"], again.data["x"])
    assert len(np.unique(ds.data["x"])) == 10000


def test_sparse_column_dropped_and_incomplete_rows_removed():
    spec = _spec(("a", NUM), ("b", NUM), ("c", NUM))
    rows = []
    for i in range(100):
        r = {"a": float(i)}
        if i % 2:
            r["b"] = 1.0  # present in 50% of rows
        if i != 7:
            r["c"] = 2.0  # present in 99% of rows
        rows.append(r)
    with pytest.warns(DatasetWarning, match="sparse"):
        ds = tally(_records(rows), spec)
    assert [c.id for c in ds.columns] == ["a", "c"]
    assert ds.dropped_columns == ["b"]
    assert ds.row_count == 99


def test_split_sizes_and_disjointness():
    for n in (20, 25, 99, 1000, 10000):
        tr, te = split_indices(n, 4)
        assert len(te) == int(np.floor(0.1 * n + 0.5))
        assert not set(tr) & set(te)
        assert sorted(np.concatenate([tr, te])) == list(range(n))
    a, b = split_indices(500, 11), split_indices(500, 11)
    np.testing.assert_array_equal(a[1], b[1])


def test_three_values_discrete_width_one():
    ds = _dataset({"x": lambda i: float(i % 3 + 1)}, 100)
    (enc,) = infer_encodings(ds).columns
    assert enc.mode is Mode.DISCRETE and enc.categories == (1.0, 2.0, 3.0) and enc.digit_width == 1


def test_seventeen_values_continuous_sixteen_discrete():
    (e17,) = infer_encodings(_dataset({"x": lambda i: float(i % 17)}, 340)).columns
    (e16,) = infer_encodings(_dataset({"x": lambda i: float(i % 16)}, 320)).columns
    assert e17.mode is Mode.CONTINUOUS
    assert e16.mode is Mode.DISCRETE and len(e16.categories) == 16


def test_text_123_strings_width_three():
    ds = _dataset({"s": lambda i: f"v{i % 123:03d}"}, 123 * 20)
    (enc,) = infer_encodings(ds).columns
    assert len(enc.categories) == 123 and enc.digit_width == 3


def test_digit_width_counts_decimal_digits():
    assert [digit_width(i) for i in (0, 9, 10, 99, 100, 122)] == [1, 1, 2, 2, 3, 3]


def test_index_seven_width_two_digits():
    enc = ColumnEncoding("c", Mode.DISCRETE, TXT, categories=tuple(f"k{i}" for i in range(12)), digit_width=2,
                         digit_mean=(0.0, 0.0), digit_std=(1.0, 1.0))
    np.testing.assert_array_equal(enc.encode(["k7"]), [[0.0, 7.0]])
    out, flag = enc.decode(np.array([[0.0, 7.0]]))
    assert out[0] == "k7" and not flag[0]
    out, flag = enc.decode(np.array([[0.1, 6.8]]))
    assert out[0] == "k7" and not flag[0]


def test_decode_out_of_table_clamps_with_flag():
    enc = ColumnEncoding("c", Mode.DISCRETE, TXT, categories=("a", "b", "c"), digit_width=1,
                         digit_mean=(0.0,), digit_std=(1.0,))
    out, flag = enc.decode(np.array([[8.7], [-3.0]]))
    assert list(out) == ["c", "a"] and list(flag) == [True, False]


def test_unseen_value_gets_reserved_index():
    enc = ColumnEncoding("c", Mode.DISCRETE, TXT, categories=("a", "b"), digit_width=1,
                         digit_mean=(0.0,), digit_std=(1.0,))
    assert list(enc.index_of(["b", "zzz"])) == [1, 2]


def test_continuous_two_four_six():
    enc = ColumnEncoding("x", Mode.CONTINUOUS, NUM, mean=4.0, std=float(np.sqrt(8.0 / 3.0)))
    np.testing.assert_allclose(enc.encode([2.0, 4.0, 6.0])[:, 0], [-1.2247449, 0.0, 1.2247449], atol=1e-7)


def test_population_std_on_training_rows_only():
    ds = _dataset({"x": lambda i: float(i) ** 1.5}, 200)
    (enc,) = infer_encodings(ds).columns
    tr, _ = split_indices(200, 0)
    v = ds.data["x"][tr]
    assert enc.mean == pytest.approx(v.mean(), rel=1e-12)
    assert enc.std == pytest.approx(np.sqrt(np.mean((v - v.mean()) ** 2)), rel=1e-12)


def test_constant_column_dropped_with_warning():
    ds = _dataset({"x": float, "k": lambda i: 5.0}, 50)
    with pytest.warns(DatasetWarning, match="constant"):
        encs = infer_encodings(ds)
    assert encs.column_ids == ["x"]
    assert encs.constants == {"k": 5.0}
    table, _ = encs.decode(np.zeros((3, encs.dim)))
    np.testing.assert_array_equal(table["k"], [5.0, 5.0, 5.0])
    again = EncodingSet.from_json(json.loads(json.dumps(encs.to_json())))
    assert again.constants == {"k": 5.0}


def test_condition_is_discrete_over_project_domain():
    ds = _dataset({"x": float}, 60, callers=[1, 2] * 30)
    encs = infer_encodings(ds)
    assert encs.condition.mode is Mode.DISCRETE
    assert encs.condition.categories == (1, 2, 3)
    assert encs.cond_dim == 1


def test_advice_dataset_encoded_dim_recount(metric_fit):
    _, prep = metric_fit
    advice = prep.datasets[22]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        encs = infer_encodings(advice)
    expected = 0
    for c in advice.columns:
        values = advice.data[c.id]
        distinct = len(set(values.tolist()))
        if c.data_type is TXT or distinct <= 16:
            expected += len(str(distinct))  # largest index is the unseen one, = distinct
        else:
            expected += 1
    split = encode(advice, encs)
    assert split.encoded_dim == split.train.shape[1] == expected


def test_round_trip_and_standardization(metric_fit):
    _, prep = metric_fit
    for ds in prep.datasets.values():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            encs = infer_encodings(ds)
        split = encode(ds, encs)
        np.testing.assert_allclose(split.train.mean(axis=0), 0.0, atol=1e-9)
        sd = split.train.std(axis=0)
        np.testing.assert_allclose(sd, 1.0, atol=1e-9)
        table, flag = encs.decode(np.vstack([split.train, split.test]))
        idx = np.concatenate([split.train_index, split.test_index])
        assert not flag.any()
        for cid in encs.column_ids:
            raw = ds.data[cid][idx]
            if encs[cid].mode is Mode.CONTINUOUS:
                np.testing.assert_allclose(table[cid], raw, rtol=1e-9)
            else:
                assert list(table[cid]) == list(raw)


def test_single_row_decode_helper():
    enc = EncodingSet([ColumnEncoding("x", Mode.CONTINUOUS, NUM, mean=1.0, std=2.0)],
                      ColumnEncoding("caller", Mode.DISCRETE, DataType.REFERENCE, categories=(1,), digit_width=1,
                                     digit_mean=(0.0,), digit_std=(1.0,)))
    row, flag = decode(np.array([0.5]), enc)
    assert row == {"x": 2.0} and flag is False


def test_encoding_json_round_trip():
    ds = _dataset({"x": lambda i: float(i) * 0.37, "s": lambda i: "abc"[i % 3]}, 80)
    encs = infer_encodings(ds)
    again = EncodingSet.from_json(json.loads(json.dumps(encs.to_json())))
    x1, c1 = encs.encode(ds.data, ds.condition_values)
    x2, c2 = again.encode(ds.data, ds.condition_values)
    np.testing.assert_array_equal(x1, x2)
    np.testing.assert_array_equal(c1, c2)


def test_dump_dataset(tmp_path):
    ds = _dataset({"x": float, "s": lambda i: "ab"[i % 2]}, 30)
    path = dump_dataset(ds, infer_encodings(ds), tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "split,caller,x,s" and len(lines) == 31
    assert sum(line.startswith("test,") for line in lines) == 3
    side = json.loads((tmp_path / "node_5.json").read_text())
    assert side["rows"] == 30 and len(side["encodings"]["columns"]) == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from(["p", "q", "r", "s"])),
                min_size=20, max_size=60),
       st.integers(0, 2**31))
def test_encode_decode_identity_property(values, seed):
    nums = [v for v in values if isinstance(v, float)]
    texts = [v for v in values if isinstance(v, str)]
    n = min(len(nums), len(texts))
    if n < 20:
        nums = (nums * 20)[:20] if nums else [float(i) for i in range(20)]
        texts = (texts * 20)[:20] if texts else ["p"] * 20
        n = 20
    spec = _spec(("x", NUM), ("s", TXT))
    rows = [{"x": nums[i], "s": texts[i]} for i in range(n)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = tally(_records(rows), spec, seed)
        encs = infer_encodings(ds)
    if not encs.columns:
        return
    split = encode(ds, encs)
    table, flag = encs.decode(split.train)
    for cid in encs.column_ids:
        raw = ds.data[cid][split.train_index]
        if encs[cid].mode is Mode.CONTINUOUS:
            np.testing.assert_allclose(table[cid], raw, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(raw).max()))
        else:
            assert list(table[cid]) == list(raw)
    assert not flag.any()
