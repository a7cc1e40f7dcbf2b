import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from telad.data import (
    MinMaxScaler,
    OrdinalEncoder,
    Schema,
    apply_scalers,
    assemble_batches,
    dataset_from_frame,
    enumerate_windows,
    filter_eligible,
    fit_scalers,
    ingest_csv,
    load_split_file,
    split_bounds,
    split_timeline,
)
from telad.errors import DataError, EmptyDatasetError, SchemaError

SCHEMA = Schema(columns={"a": "dynamic_real", "b": "dynamic_real", "site": "static_cat",
                         "cap": "static_real"}, cadence_minutes=60)


def frame(n_rows=10, ne="n1", start="2024-01-01", a=None, b=None):
    ts = pd.date_range(start, periods=n_rows, freq="h", tz="UTC")
    return pd.DataFrame({
        "ne_id": ne, "timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "a": np.arange(n_rows, dtype=float) if a is None else a,
        "b": np.ones(n_rows) if b is None else b,
        "site": "x", "cap": 2.0,
    })


def test_ingest_no_gaps(tmp_path):
    p = tmp_path / "d.csv"
    frame().to_csv(p, index=False)
    ds = ingest_csv(p, SCHEMA)
    ne = ds.nes["n1"]
    assert ne.T == 10 and ds.k == 2
    assert ne.m.sum() == 0


def test_missing_value_masked_and_zero_filled():
    df = frame()
    df.loc[3, "a"] = np.nan
    ne = dataset_from_frame(df, SCHEMA).nes["n1"]
    assert ne.m[3, 0] == 1 and ne.x[3, 0] == 0.0
    assert ne.m.sum() == 1


def test_missing_rows_materialized():
    df = frame().drop(index=[4, 5])
    ne = dataset_from_frame(df, SCHEMA).nes["n1"]
    assert ne.T == 10
    assert ne.m[4:6].all() and ne.m.sum() == 4


def test_mask_cells_are_exactly_zero_before_scaling():
    df = frame(20)
    df.loc[[2, 7, 11], "b"] = np.nan
    ne = dataset_from_frame(df, SCHEMA).nes["n1"]
    assert np.all(ne.x[ne.m.astype(bool)] == 0.0)


def test_files_with_different_columns(tmp_path):
    frame().to_csv(tmp_path / "1.csv", index=False)
    frame(ne="n2").drop(columns=["b"]).to_csv(tmp_path / "2.csv", index=False)
    with pytest.raises(SchemaError):
        ingest_csv([tmp_path / "1.csv", tmp_path / "2.csv"], SCHEMA)


def test_duplicates_listed():
    df = pd.concat([frame(), frame().iloc[[2]]])
    with pytest.raises(DataError, match="duplicate"):
        dataset_from_frame(df, SCHEMA)


def test_non_monotone():
    df = frame().iloc[[0, 2, 1, 3]]
    with pytest.raises(DataError, match="non-monotone"):
        dataset_from_frame(df, SCHEMA)


def test_unknown_role():
    with pytest.raises(SchemaError):
        Schema(columns={"a": "weird"})


def test_epoch_timestamps():
    df = frame()
    df["timestamp"] = 1_700_000_000 - 1_700_000_000 % 3600 + 3600 * np.arange(10)
    ds = dataset_from_frame(df, SCHEMA)
    assert ds.nes["n1"].T == 10


def test_calendar_and_missing_indicators():
    ds = dataset_from_frame(frame(), SCHEMA)
    assert ds.dyn_cat_names == ["hour", "dow", "missing:a", "missing:b"]
    assert ds.nes["n1"].z.min() >= 0


# ---------------------------------------------------------------- splits


def test_split_t100():
    b = split_bounds(100)
    assert b.train == (0, 64) and b.val == (64, 80) and b.test == (80, 100)


def test_split_t10():
    b = split_bounds(10)
    assert [hi - lo for lo, hi in (b.train, b.val, b.test)] == [6, 2, 2]


@given(st.integers(1, 5000))
def test_split_blocks_partition(T):
    b = split_bounds(T)
    assert b.train[0] == 0 and b.train[1] == b.val[0] and b.val[1] == b.test[0] and b.test[1] == T


def test_split_file_verbatim(tmp_path):
    ds = dataset_from_frame(frame(24), SCHEMA)
    ts = pd.date_range("2024-01-01", periods=24, freq="h", tz="UTC").strftime("%Y-%m-%dT%H:%M:%SZ")
    pd.DataFrame({"ne_id": "*", "split": ["train", "val", "test"],
                  "start": [ts[0], ts[10], ts[15]], "end": [ts[9], ts[14], ts[23]]}).to_csv(
        tmp_path / "s.csv", index=False)
    b = load_split_file(tmp_path / "s.csv", ds)["n1"]
    assert b.train == (0, 10) and b.val == (10, 15) and b.test == (15, 24)


# ---------------------------------------------------------------- eligibility


def test_filter_removes_sparse_ne():
    good = frame(100, "good")
    bad = frame(100, "bad")
    bad.loc[:29, "a"] = np.nan  # 30 of 200 cells = 15 %
    ds = dataset_from_frame(pd.concat([good, bad]), SCHEMA)
    kept, report = filter_eligible(ds, 0.10, L=2, H=1)
    assert kept.ne_ids == ["good"] and "bad" in report


def test_filter_keeps_exactly_two_windows():
    # T=100: val block has 16 rows = 2 * (L + H), the smallest non-empty block
    ds = dataset_from_frame(frame(100), SCHEMA)
    kept, report = filter_eligible(ds, 0.10, L=5, H=3)
    assert kept.ne_ids == ["n1"] and not report


def test_filter_threshold_one_keeps_all():
    df = frame(100)
    df.loc[:60, "a"] = np.nan
    kept, report = filter_eligible(dataset_from_frame(df, SCHEMA), 1.0, L=2, H=1)
    assert not report


def test_filter_all_removed():
    with pytest.raises(EmptyDatasetError):
        filter_eligible(dataset_from_frame(frame(10), SCHEMA), 0.1, L=5, H=5)


# ---------------------------------------------------------------- scaling


def _scaled(df, T=None):
    ds = dataset_from_frame(df, SCHEMA)
    splits = split_timeline(ds)
    sc = fit_scalers(ds, splits)
    return ds, splits, sc, apply_scalers(ds, sc)


def test_train_values_scaled():
    a = np.array([2.0, 4.0, 6.0, 4.0, 4.0, 2.0, 100.0, 100.0, 100.0, 100.0])
    _, splits, _, out = _scaled(frame(10, a=a))
    assert splits["n1"].train == (0, 6)
    np.testing.assert_allclose(out.nes["n1"].x[:3, 0], [0.0, 0.5, 1.0])


def test_constant_feature_zero():
    _, _, _, out = _scaled(frame(10))
    assert np.all(out.nes["n1"].x[:, 1] == 0.0)


def test_test_values_extrapolate():
    a = np.array([0.0, 1, 2, 3, 4, 5, 6, 7, 8, 10])
    _, _, _, out = _scaled(frame(10, a=a))
    assert out.nes["n1"].x[-1, 0] == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=20, max_size=20))
def test_scaler_round_trip(vals):
    df = frame(20, a=np.array(vals))
    ds, splits, (scaler, _), out = _scaled(df)
    a, b = splits["n1"].train
    back = scaler.inverse_transform("n1", out.nes["n1"].x)
    np.testing.assert_allclose(back[a:b], ds.nes["n1"].x[a:b], atol=1e-9)


def test_scaler_serialises():
    _, _, (scaler, enc), _ = _scaled(frame(10))
    s2 = MinMaxScaler.from_dict(scaler.to_dict())
    np.testing.assert_array_equal(s2.mins["n1"], scaler.mins["n1"])
    assert OrdinalEncoder.from_dict(enc.to_dict()).vocab == enc.vocab


def test_static_real_global_scaling():
    df = pd.concat([frame(10, "n1").assign(cap=1.0), frame(10, "n2").assign(cap=3.0)])
    _, _, _, out = _scaled(df)
    assert out.nes["n1"].r[0] == 0.0 and out.nes["n2"].r[0] == 1.0


def test_encoder_unseen_is_null_and_stable():
    enc = OrdinalEncoder().fit({"c": ["b", "a", None, "c"]})
    assert enc.transform("c", ["a", "b", "zzz", None]).tolist() == [1, 2, 0, 0]
    assert enc.transform("c", ["c", "a"]).tolist() == enc.transform("c", ["c", "a"]).tolist()


def test_encoder_train_only_mode():
    df = pd.concat([frame(10, "n1"), frame(10, "n2").assign(site="late")])
    ds = dataset_from_frame(df, SCHEMA)
    splits = split_timeline(ds)
    _, enc_all = fit_scalers(ds, splits, "all")
    assert enc_all.cardinality("site") == 3


# ---------------------------------------------------------------- windows


def _one_block_ds(T):
    return dataset_from_frame(frame(T), SCHEMA)


def test_windows_count_stride_one():
    from telad.data import SplitBounds

    ds = _one_block_ds(10)
    splits = {"n1": SplitBounds((0, 10), (10, 10), (10, 10))}
    idx = enumerate_windows(ds, splits, 4, 2, 1)
    assert idx.starts.tolist() == [0, 1, 2, 3, 4]
    idx = enumerate_windows(ds, splits, 4, 2, 4)
    assert idx.starts.tolist() == [0, 4]
    assert len(enumerate_windows(ds, {"n1": SplitBounds((0, 5), (5, 10), (10, 10))}, 4, 2, 1)) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 300), st.integers(1, 12), st.integers(1, 6), st.integers(1, 7))
def test_windows_stay_in_block(T, L, H, S):
    ds = _one_block_ds(T)
    splits = split_timeline(ds)
    idx = enumerate_windows(ds, splits, L, H, S)
    for ne_id, t0, tag in idx.entries():
        lo, hi = splits[ne_id].block(tag)
        assert lo <= t0 and t0 + L + H - 1 < hi
        assert t0 + L + H - 1 < ds.nes[ne_id].T


def test_batches_sizes_and_determinism():
    from telad.data import SplitBounds

    ds = _one_block_ds(10)
    sc = fit_scalers(ds, {"n1": SplitBounds((0, 10), (10, 10), (10, 10))})
    ds = apply_scalers(ds, sc)
    splits = {"n1": SplitBounds((0, 10), (10, 10), (10, 10))}
    idx = enumerate_windows(ds, splits, 4, 2, 1)
    assert [len(b) for b in assemble_batches(ds, idx, 2)] == [2, 2, 1]
    order = lambda s: [p for b in assemble_batches(ds, idx, 2, s) for p in b.provenance]  # noqa: E731
    assert order(3) == order(3)
    assert sorted(order(3)) == sorted(order(None))


def test_shuffle_seed_changes_order():
    ds = apply_scalers(_one_block_ds(60), fit_scalers(_one_block_ds(60), split_timeline(_one_block_ds(60))))
    splits = split_timeline(ds)
    idx = enumerate_windows(ds, splits, 3, 1, 1).select("train")
    assert len(idx) >= 10
    first = [p for b in assemble_batches(ds, idx, 4, 1) for p in b.provenance]
    second = [p for b in assemble_batches(ds, idx, 4, 2) for p in b.provenance]
    assert first != second


def test_batch_shapes():
    ds = apply_scalers(_one_block_ds(60), fit_scalers(_one_block_ds(60), split_timeline(_one_block_ds(60))))
    idx = enumerate_windows(ds, split_timeline(ds), 5, 2, 3)
    b = next(assemble_batches(ds, idx, 4))
    assert b.inputs.shape == (4, 5, 2) and b.targets.shape == (4, 2, 2)
    assert b.dyn_ctx.shape == (4, 5, 4) and b.static_codes.shape == (4, 1) and b.static_reals.shape == (4, 1)
