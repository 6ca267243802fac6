import datetime as dt
import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loaddiscord.ingest import (
    IngestConfig,
    MeterSeries,
    align,
    align_all,
    impute_short_gaps,
    parse_csv,
    wide_to_long,
    write_csv,
)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_parse_direct_mapping(tmp_path):
    p = _write(tmp_path / "a.csv", ["timestamp,building_id,meter_reading", "2016-01-01 00:00:00,Bldg_A,12.5"])
    recs = list(parse_csv(p).records())
    assert len(recs) == 1
    r = recs[0]
    assert r.timestamp == dt.datetime(2016, 1, 1, 0)
    assert r.building_id == "Bldg_A"
    assert r.reading == 12.5
    assert r.site_id == "site"


def test_parse_nan_is_missing(tmp_path):
    p = _write(tmp_path / "a.csv", ["timestamp,building_id,meter_reading", "2016-01-01 00:00:00,A,NaN",
                                    "2016-01-01 01:00:00,A,"])
    parsed = parse_csv(p)
    assert parsed.malformed == 0
    assert all(r.missing for r in parsed.records())


def test_parse_counts_malformed(tmp_path):
    p = _write(tmp_path / "a.csv", [
        "timestamp,building_id,meter_reading",
        "2016-01-01 00:00:00,A,1.0",
        "not-a-date,A,2.0",
        "2016-01-01 02:00:00,A,3.0",
    ])
    parsed = parse_csv(p)
    assert len(parsed) == 2
    assert parsed.malformed == 1
    assert parsed.malformed_lines == [3]


@pytest.mark.parametrize("row", [
    "2016-01-01 00:30:00,A,1.0",   # off the hour
    "2016-01-01 00:00:00,,1.0",    # empty building
    "2016-01-01 00:00:00,A,-1",    # negative
    "2016-01-01 00:00:00,A,abc",   # not a number
    "2016-01-01 00:00:00,A,inf",   # not finite
    "2016-01-01 00:00:00",         # too few fields
])
def test_parse_malformed_kinds(tmp_path, row):
    p = _write(tmp_path / "a.csv", ["timestamp,building_id,meter_reading", "2016-01-01 05:00:00,A,1.0", row])
    parsed = parse_csv(p)
    assert len(parsed) == 1
    assert parsed.malformed == 1


def test_parse_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_csv(tmp_path / "missing.csv")
    p = _write(tmp_path / "b.csv", ["timestamp,building,meter_reading", "2016-01-01 00:00:00,A,1"])
    with pytest.raises(ValueError, match="missing mandatory"):
        parse_csv(p)
    p = _write(tmp_path / "c.csv", ["timestamp,building_id,meter_reading", "junk,A,1"])
    with pytest.raises(ValueError, match="no parseable"):
        parse_csv(p)


def test_column_map_and_site_map(tmp_path):
    p = _write(tmp_path / "a.csv", ["ts,bid,kwh", "2016-01-01 00:00:00,A,1", "2016-01-01 00:00:00,B,2"])
    cfg = IngestConfig.from_dict({"columns": {"timestamp": "ts", "building_id": "bid", "reading": "kwh"},
                                  "site_map": {"A": "north"}, "default_site": "rest"})
    parsed = parse_csv(p, cfg)
    assert parsed.site_ids == ["north", "rest"]


def test_ingest_config_file_roundtrip(tmp_path):
    cfg = IngestConfig.from_dict({"max_gap": 5, "site_map": {"b": "s2", "a": "s1"}})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = IngestConfig.from_file(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.max_gap == 5


def _frame(rows):
    return pd.DataFrame(rows, columns=["timestamp", "building_id", "site_id", "reading"])


def test_align_one_missing_hour():
    t0 = pd.Timestamp("2016-01-01")
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", float(h)) for h in range(48) if h != 30]
    p = align(_frame(rows))
    (s,) = p.series
    assert len(s) == 48
    assert s.missing.sum() == 1 and np.isnan(s.values[30])


def test_align_duplicates_last_wins():
    t0 = pd.Timestamp("2016-01-01")
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", 1.0) for h in range(24)]
    rows += [(t0, "A", "s", 5.0), (t0, "A", "s", 7.0)]
    p = align(_frame(rows))
    assert p.series[0].values[0] == 7.0
    # two later rows overwrite the first: 2 duplicates at the same key
    assert p.duplicates == 2


def test_align_duplicates_single_pair():
    t0 = pd.Timestamp("2016-01-01")
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", 1.0) for h in range(1, 24)]
    rows += [(t0, "A", "s", 5.0), (t0, "A", "s", 7.0)]
    p = align(_frame(rows))
    assert p.series[0].values[0] == 7.0
    assert p.duplicates == 1


def test_align_trims_to_whole_days():
    t0 = pd.Timestamp("2016-01-01")
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", 1.0) for h in range(25)]
    assert len(align(_frame(rows)).series[0]) == 24
    # a partial leading day is dropped as well
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", 1.0) for h in range(5, 53)]
    p = align(_frame(rows))
    assert p.start == dt.datetime(2016, 1, 2) and p.n_hours == 24


def test_align_union_span_and_errors():
    t0 = pd.Timestamp("2016-01-01")
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", 1.0) for h in range(24)]
    rows += [(t0 + pd.Timedelta(hours=h), "B", "s", 2.0) for h in range(24, 48)]
    p = align(_frame(rows))
    assert p.building_ids == ["A", "B"] and p.n_hours == 48
    assert np.isnan(p.series[0].values[24:]).all() and np.isnan(p.series[1].values[:24]).all()
    with pytest.raises(ValueError):
        align(_frame([]))
    with pytest.raises(ValueError, match="several sites"):
        align(_frame(rows + [(t0, "C", "other", 1.0)]))


def test_impute_examples():
    start = dt.datetime(2016, 1, 1)
    v = np.full(24, 1.0)
    v[:3] = [10, np.nan, 14]
    assert impute_short_gaps(MeterSeries("A", "s", start, v), 1).values[:3].tolist() == [10, 12, 14]
    v = np.arange(24, dtype=float)
    v[5:9] = np.nan
    out = impute_short_gaps(MeterSeries("A", "s", start, v), 3)
    assert np.isnan(out.values[5:9]).all()
    assert out.unevaluable_days().tolist() == [True]
    v = np.arange(24, dtype=float)
    v[0] = np.nan
    assert np.isnan(impute_short_gaps(MeterSeries("A", "s", start, v), 3).values[0])
    v = np.arange(24, dtype=float)
    v[-1] = np.nan
    assert np.isnan(impute_short_gaps(MeterSeries("A", "s", start, v), 3).values[-1])


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.one_of(st.none(), st.floats(0, 1e6, allow_nan=False)), min_size=24, max_size=24 * 4),
    st.integers(0, 5),
)
def test_impute_only_fills_short_interior_runs(vals, max_gap):
    n = len(vals) - len(vals) % 24
    if n == 0:
        return
    v = np.array([np.nan if x is None else x for x in vals[:n]])
    out = impute_short_gaps(MeterSeries("A", "s", dt.datetime(2016, 1, 1), v), max_gap).values
    ok = ~np.isnan(v)
    assert np.array_equal(out[ok], v[ok])
    filled = np.isnan(v) & ~np.isnan(out)
    # every filled value lies between its bounding readings
    for i in np.flatnonzero(filled):
        left = v[:i][ok[:i]][-1]
        right = v[i + 1:][ok[i + 1:]][0]
        assert min(left, right) - 1e-9 <= out[i] <= max(left, right) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_roundtrip_csv(tmp_path_factory, n_buildings, n_days, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**31)))
    start = dt.datetime(2016, 3, 1)
    series = {}
    for b in range(n_buildings):
        v = np.round(rng.uniform(0, 1000, 24 * n_days), data.draw(st.integers(0, 6)))
        v[rng.random(v.size) < 0.1] = np.nan
        # keep both ends readable so whole-day trimming does not kick in
        v[0], v[-1] = 1.0, 2.0
        series[f"b{b}"] = v
    from loaddiscord.ingest import Portfolio
    p = Portfolio("s", [MeterSeries(k, "s", start, v) for k, v in series.items()])
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_csv(p, path)
    again = align_all(parse_csv(path))["s"]
    assert again.start == p.start
    for a, b in zip(p.series, again.series):
        assert a.building_id == b.building_id
        assert np.array_equal(a.missing, b.missing)
        assert np.array_equal(a.values[~a.missing], b.values[~b.missing])


def test_align_keeps_values():
    rng = np.random.default_rng(3)
    t0 = pd.Timestamp("2016-01-01")
    vals = rng.uniform(0, 100, 72)
    rows = [(t0 + pd.Timedelta(hours=h), "A", "s", vals[h]) for h in rng.permutation(72)]
    assert np.array_equal(align(_frame(rows)).series[0].values, vals)


def test_wide_to_long(tmp_path):
    wide = tmp_path / "w.csv"
    _write(wide, ["timestamp,Panther_office_A,Fox_lab_B", "2016-01-01 00:00:00,1,2", "2016-01-01 01:00:00,3,"])
    out = tmp_path / "l.csv"
    assert wide_to_long(wide, out, site_from_prefix=True) == 4
    parsed = parse_csv(out)
    assert parsed.site_ids == ["Fox", "Panther"]
    assert parsed.frame["reading"].isna().sum() == 1
