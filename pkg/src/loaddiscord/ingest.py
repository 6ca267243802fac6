"""Long-format meter CSV parsing and calendar alignment into hourly portfolios."""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
MISSING_TOKENS = {"", "nan", "na", "null", "none"}

DEFAULT_COLUMNS = {
    "timestamp": "timestamp",
    "building_id": "building_id",
    "reading": "meter_reading",
    "site_id": "site_id",
}
DEFAULT_SITE = "site"


@dataclass(frozen=True)
class MeterRecord:
    timestamp: dt.datetime
    building_id: str
    site_id: str
    reading: float  # nan when missing

    @property
    def missing(self) -> bool:
        return self.reading != self.reading


@dataclass
class ParsedMeterData:
    """Parsed rows as a frame with columns timestamp, building_id, site_id, reading."""

    frame: pd.DataFrame
    malformed: int = 0
    malformed_lines: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)

    def records(self):
        for ts, b, s, r in self.frame.itertuples(index=False, name=None):
            yield MeterRecord(ts.to_pydatetime(), b, s, float(r))

    @property
    def site_ids(self) -> list[str]:
        return sorted(self.frame["site_id"].unique())


@dataclass
class MeterSeries:
    building_id: str
    site_id: str
    start: dt.datetime
    values: np.ndarray  # float, nan = missing

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if len(self.values) % 24:
            raise ValueError("series length must be a whole number of days")

    def __len__(self):
        return len(self.values)

    @property
    def n_days(self) -> int:
        return len(self.values) // 24

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def timestamp_at(self, i: int) -> dt.datetime:
        return self.start + dt.timedelta(hours=int(i))

    def weekday_of(self, i: int) -> str:
        return WEEKDAYS[self.timestamp_at(i).weekday()]

    def dates(self) -> list[dt.date]:
        d0 = self.start.date()
        return [d0 + dt.timedelta(days=d) for d in range(self.n_days)]

    def unevaluable_days(self) -> np.ndarray:
        return self.missing.reshape(-1, 24).any(axis=1)


@dataclass
class Portfolio:
    site_id: str
    series: list[MeterSeries]
    duplicates: int = 0

    def __post_init__(self):
        self.series = sorted(self.series, key=lambda s: s.building_id)
        if self.series:
            s0 = self.series[0]
            for s in self.series[1:]:
                if s.start != s0.start or len(s) != len(s0):
                    raise ValueError("portfolio series must share start and length")

    @property
    def start(self) -> dt.datetime:
        return self.series[0].start

    @property
    def n_hours(self) -> int:
        return len(self.series[0]) if self.series else 0

    @property
    def building_ids(self) -> list[str]:
        return [s.building_id for s in self.series]

    def dates(self) -> list[dt.date]:
        return self.series[0].dates() if self.series else []

    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_hours, freq="h")

    def matrix(self) -> np.ndarray:
        return np.vstack([s.values for s in self.series])

    def to_frame(self) -> pd.DataFrame:
        ts = self.timestamps()
        parts = [
            pd.DataFrame({"timestamp": ts, "building_id": s.building_id, "site_id": self.site_id, "reading": s.values})
            for s in self.series
        ]
        return pd.concat(parts, ignore_index=True)

    def scaled(self, factor: float) -> "Portfolio":
        return Portfolio(
            self.site_id,
            [MeterSeries(s.building_id, s.site_id, s.start, s.values * factor) for s in self.series],
        )


@dataclass
class IngestConfig:
    columns: dict = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    max_gap: int = 3
    site_map: dict = field(default_factory=dict)
    default_site: str = DEFAULT_SITE

    @classmethod
    def from_dict(cls, d: dict | None) -> "IngestConfig":
        d = dict(d or {})
        cols = dict(DEFAULT_COLUMNS)
        cols.update(d.get("columns") or {})
        return cls(
            columns=cols,
            max_gap=int(d.get("max_gap", 3)),
            site_map={str(k): str(v) for k, v in (d.get("site_map") or {}).items()},
            default_site=str(d.get("default_site", DEFAULT_SITE)),
        )

    @classmethod
    def from_file(cls, path) -> "IngestConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "columns": dict(self.columns),
            "max_gap": self.max_gap,
            "site_map": dict(sorted(self.site_map.items())),
            "default_site": self.default_site,
        }


def parse_csv(path, column_map: dict | IngestConfig | None = None) -> ParsedMeterData:
    """Read a long-format meter CSV.

    Rows with an unparseable timestamp, a timestamp off the hour, an empty
    building id, or a reading that is not a finite non-negative number (and
    not a missing-value token) are counted as malformed and left out.
    """
    cfg = column_map if isinstance(column_map, IngestConfig) else IngestConfig.from_dict({"columns": column_map or {}})
    cols = cfg.columns
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", on_bad_lines="skip")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    raw = raw.fillna("")

    need = [cols["timestamp"], cols["building_id"], cols["reading"]]
    absent = [c for c in need if c not in raw.columns]
    if absent:
        raise ValueError(f"{path}: missing mandatory column(s) {absent}")

    # on_bad_lines="skip" drops rows with the wrong field count silently; count them
    with open(path, encoding="utf-8") as fh:
        n_lines = sum(1 for line in fh if line.strip()) - 1
    skipped = max(0, n_lines - len(raw))

    ts = pd.to_datetime(raw[cols["timestamp"]].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")
    building = raw[cols["building_id"]].str.strip()
    text = raw[cols["reading"]].str.strip()
    is_missing = text.str.lower().isin(MISSING_TOKENS)
    reading = pd.to_numeric(text.where(~is_missing), errors="coerce")

    site_col = cols.get("site_id")
    if site_col and site_col in raw.columns:
        site = raw[site_col].str.strip()
    else:
        site = building.map(cfg.site_map).fillna(cfg.default_site)

    bad = (
        ts.isna()
        | (ts.dt.minute != 0)
        | (ts.dt.second != 0)
        | (building == "")
        | (~is_missing & (reading.isna() | ~np.isfinite(reading.fillna(0)) | (reading < 0)))
    )
    frame = pd.DataFrame(
        {"timestamp": ts[~bad], "building_id": building[~bad], "site_id": site[~bad], "reading": reading[~bad].astype(float)}
    ).reset_index(drop=True)

    malformed = int(bad.sum()) + skipped
    # +2: header line and 1-based numbering
    bad_lines = (np.flatnonzero(bad.to_numpy()) + 2).tolist()
    if malformed:
        log.warning("%s: %d malformed row(s) skipped", path, malformed)
    if frame.empty:
        raise ValueError(f"{path}: no parseable rows")
    return ParsedMeterData(frame=frame, malformed=malformed, malformed_lines=bad_lines)


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, ParsedMeterData):
        return records.frame
    if isinstance(records, pd.DataFrame):
        return records
    rows = [(r.timestamp, r.building_id, r.site_id, r.reading) for r in records]
    return pd.DataFrame(rows, columns=["timestamp", "building_id", "site_id", "reading"])


def align(records, site_id: str | None = None) -> Portfolio:
    """Build a calendar-aligned portfolio for one site.

    Every building spans the union of all timestamps at the site, reduced to
    whole calendar days (partial first/last days are dropped). Hours without
    a record are missing. Duplicate (building, timestamp) pairs keep the
    last record; the number of overwritten rows is stored on the portfolio.
    """
    frame = _records_frame(records)
    if site_id is not None:
        frame = frame[frame["site_id"] == site_id]
    if frame.empty:
        raise ValueError("no records to align")
    if site_id is None:
        sites = frame["site_id"].unique()
        if len(sites) != 1:
            raise ValueError(f"records span several sites {sorted(sites)}; pass site_id")
        site_id = sites[0]

    dup_mask = frame.duplicated(subset=["building_id", "timestamp"], keep="last")
    duplicates = int(dup_mask.sum())
    if duplicates:
        log.warning("site %s: %d duplicate reading(s) overwritten (last wins)", site_id, duplicates)
    frame = frame[~dup_mask]

    t0 = frame["timestamp"].min()
    t1 = frame["timestamp"].max()
    start = t0.normalize() if t0 == t0.normalize() else t0.normalize() + pd.Timedelta(days=1)
    end_excl = (t1 + pd.Timedelta(hours=1)).normalize()
    n_hours = int((end_excl - start) / pd.Timedelta(hours=1))
    if n_hours < 24:
        raise ValueError(f"site {site_id}: records do not cover one whole day")

    grid = pd.date_range(start, periods=n_hours, freq="h")
    wide = frame.pivot(index="timestamp", columns="building_id", values="reading").reindex(grid)
    start_py = start.to_pydatetime()
    series = [
        MeterSeries(building_id=str(b), site_id=str(site_id), start=start_py, values=wide[b].to_numpy(dtype=float))
        for b in sorted(wide.columns)
    ]
    return Portfolio(site_id=str(site_id), series=series, duplicates=duplicates)


def align_all(records) -> dict[str, Portfolio]:
    frame = _records_frame(records)
    return {site: align(frame, site) for site in sorted(frame["site_id"].unique())}


def impute_short_gaps(series: MeterSeries, max_gap: int = 3) -> MeterSeries:
    """Linearly interpolate interior runs of at most ``max_gap`` missing hours.

    Longer runs, and runs touching either end of the series, stay missing.
    """
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    v = series.values.copy()
    miss = np.isnan(v)
    if max_gap == 0 or not miss.any():
        return MeterSeries(series.building_id, series.site_id, series.start, v)
    edges = np.diff(np.concatenate([[0], miss.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    for a, b in zip(starts, stops):
        if a == 0 or b == len(v) or b - a > max_gap:
            continue
        left, right = v[a - 1], v[b]
        frac = np.arange(1, b - a + 1) / (b - a + 1)
        v[a:b] = left + frac * (right - left)
    return MeterSeries(series.building_id, series.site_id, series.start, v)


def impute_portfolio(portfolio: Portfolio, max_gap: int = 3) -> Portfolio:
    return Portfolio(
        portfolio.site_id,
        [impute_short_gaps(s, max_gap) for s in portfolio.series],
        duplicates=portfolio.duplicates,
    )


def write_csv(portfolios, path, columns: dict | None = None) -> None:
    """Write one or more portfolios as long-format CSV (missing readings empty)."""
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    if isinstance(portfolios, Portfolio):
        portfolios = [portfolios]
    frame = pd.concat([p.to_frame() for p in portfolios], ignore_index=True)
    frame = frame.sort_values(["site_id", "building_id", "timestamp"], kind="stable")
    out = pd.DataFrame(
        {
            cols["timestamp"]: frame["timestamp"].dt.strftime(TIMESTAMP_FORMAT),
            cols["building_id"]: frame["building_id"],
            cols["site_id"]: frame["site_id"],
            cols["reading"]: frame["reading"].map(lambda r: "" if r != r else repr(float(r))),
        }
    )
    out.to_csv(path, index=False, lineterminator="\n")


def wide_to_long(path, out_path, timestamp_col: str = "timestamp", site_from_prefix: bool = False,
                 default_site: str = DEFAULT_SITE) -> int:
    """Convert a wide CSV (one column per building) to the long format; returns row count.

    With ``site_from_prefix`` the site is the part of each building name
    before the first underscore, as in BDG2 building names.
    """
    wide = pd.read_csv(path, dtype=str, keep_default_na=False)
    if timestamp_col not in wide.columns:
        raise ValueError(f"{path}: no {timestamp_col!r} column")
    long = wide.melt(id_vars=[timestamp_col], var_name="building_id", value_name="meter_reading")
    long = long.rename(columns={timestamp_col: "timestamp"})
    if site_from_prefix:
        long["site_id"] = long["building_id"].str.split("_", n=1).str[0]
    else:
        long["site_id"] = default_site
    long = long[["timestamp", "building_id", "site_id", "meter_reading"]]
    long = long.sort_values(["site_id", "building_id", "timestamp"], kind="stable")
    long.to_csv(out_path, index=False, lineterminator="\n")
    return len(long)
