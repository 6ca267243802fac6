"""Discord labelers (ALDI++, ALDI with a fixed p-value, +-2 sigma) and label conversions.

Labels are held in a :class:`LabelSet`, a thin wrapper over a DataFrame with
the key columns of its granularity plus an int8 ``label`` column:
1 = discord, 0 = non-discord, -1 = unevaluable.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import matrix_profile as mp
from .ingest import TIMESTAMP_FORMAT, WEEKDAYS, Portfolio, impute_portfolio
from .stats import GaussianMixture1D, fit_gmm, ks_two_sample

log = logging.getLogger(__name__)

DISCORD = 1
NON_DISCORD = 0
UNEVALUABLE = -1

SITE_DAY = "site-day"
BUILDING_DAY = "building-day"
BUILDING_HOUR = "building-hour"

KEYS = {
    SITE_DAY: ["site_id", "date"],
    BUILDING_DAY: ["site_id", "building_id", "date"],
    BUILDING_HOUR: ["site_id", "building_id", "timestamp"],
}
METHODS = ("aldi++", "aldi", "2sd")


@dataclass
class DValueRecord:
    site_id: str
    date: dt.date
    weekday: str
    d_value: float
    p_value: float
    sample_size: int
    building_id: str | None = None


@dataclass
class LabelSet:
    granularity: str
    frame: pd.DataFrame
    method: str
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        if self.granularity not in KEYS:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        keys = KEYS[self.granularity]
        missing = [c for c in keys + ["label"] if c not in self.frame.columns]
        if missing:
            raise ValueError(f"{self.granularity} labels need columns {missing}")
        frame = self.frame.sort_values(keys, kind="stable").reset_index(drop=True)
        if frame.duplicated(subset=keys).any():
            raise ValueError("label keys must be unique")
        frame["label"] = frame["label"].astype(np.int8)
        self.frame = frame

    @property
    def keys(self) -> list[str]:
        return KEYS[self.granularity]

    def __len__(self):
        return len(self.frame)

    def as_dict(self) -> dict:
        keys = self.keys
        return {tuple(row[:-1]): int(row[-1]) for row in self.frame[keys + ["label"]].itertuples(index=False, name=None)}

    def counts(self) -> dict:
        vc = self.frame["label"].value_counts()
        return {name: int(vc.get(code, 0)) for name, code in
                (("discord", DISCORD), ("non-discord", NON_DISCORD), ("unevaluable", UNEVALUABLE))}

    def discord_fraction(self) -> float:
        ev = self.frame["label"] != UNEVALUABLE
        return float((self.frame.loc[ev, "label"] == DISCORD).mean()) if ev.any() else 0.0


@dataclass
class GmmThreshold:
    n_components: int
    mu_max: float
    k_fraction: float
    n_nondiscord: int
    nondiscord_components: list


def gmm_threshold(gmm: GaussianMixture1D) -> GmmThreshold:
    """Non-discord components: the ``ceil((1 - mu_max) * n)`` lowest-mean ones, at least one."""
    n = gmm.n_components
    mu_max = float(gmm.means.max())
    k = 1.0 - mu_max
    # round first so 0.2 * 7 = 1.4000000000000001-style noise cannot bump ceil
    n_nd = int(math.ceil(round(k * n, 9)))
    n_nd = min(max(n_nd, 1), n)
    return GmmThreshold(n, mu_max, k, n_nd, list(range(n_nd)))


# ---------------------------------------------------------------------------
# matrix profile -> daily samples -> D-values


@dataclass
class DetectorConfig:
    window: int = 24
    aggregation: str = "day-start"
    max_gap: int = 3
    n_components: int = 7
    p_threshold: float = 0.01
    granularity: str = "site"
    leave_one_out: bool = False
    seed: int = 0
    jobs: int = 1


def portfolio_daily_mp(portfolio: Portfolio, cfg: DetectorConfig | None = None, dump_dir=None) -> dict:
    """Per-building daily MP values: ``building_id -> [(date, weekday, value | None)]``."""
    cfg = cfg or DetectorConfig()
    filled = impute_portfolio(portfolio, cfg.max_gap)

    def one(series):
        if np.isnan(series.values).all():
            return series.building_id, [(d, WEEKDAYS[d.weekday()], None) for d in series.dates()]
        try:
            prof = mp.self_join(series, cfg.window)
        except ValueError as exc:
            log.warning("building %s: %s; all days unevaluable", series.building_id, exc)
            return series.building_id, [(d, WEEKDAYS[d.weekday()], None) for d in series.dates()]
        if dump_dir is not None:
            prof.to_csv(Path(dump_dir) / f"mp_{portfolio.site_id}_{series.building_id}.csv")
        return series.building_id, mp.daily_mp(prof, series, cfg.aggregation)

    if cfg.jobs > 1:
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(one, filled.series))
    else:
        results = [one(s) for s in filled.series]
    return dict(results)


def compute_dvalues(samples, leave_one_out: bool = False):
    """KS-test each date's MP sample against the pooled sample of its weekday.

    Returns ``(records, unevaluable_dates)``. The weekday reference includes
    the tested date's own values unless ``leave_one_out`` is set.
    """
    samples = list(samples)
    by_site = {}
    for s in samples:
        by_site.setdefault(s.site_id, []).append(s)

    records, unevaluable = [], []
    for site, group in sorted(by_site.items(), key=lambda kv: str(kv[0])):
        pools = {}
        for s in group:
            pools.setdefault(s.weekday, []).append(s.values)
        pools = {wd: np.concatenate(v) for wd, v in pools.items()}
        for wd in sorted({s.weekday for s in group if s.size}):
            if pools[wd].size == 0:
                raise ValueError(f"site {site}: weekday {wd} has no pooled MP values")
        for s in sorted(group, key=lambda s: s.date):
            if s.size == 0:
                unevaluable.append((site, s.date))
                continue
            ref = pools[s.weekday]
            if leave_one_out:
                ref = _without(ref, s.values)
                if ref.size == 0:
                    unevaluable.append((site, s.date))
                    continue
            ks = ks_two_sample(s.values, ref)
            records.append(DValueRecord(site, s.date, s.weekday, ks.d_value, ks.p_value, s.size))
    return records, unevaluable


def _without(pool: np.ndarray, values: np.ndarray) -> np.ndarray:
    # drop one occurrence of each value (multiset difference)
    pool = np.sort(pool)
    keep = np.ones(pool.size, dtype=bool)
    for v in values:
        idx = np.searchsorted(pool, v)
        while idx < pool.size and not keep[idx]:
            idx += 1
        if idx < pool.size and pool[idx] == v:
            keep[idx] = False
    return pool[keep]


def site_dvalues(portfolio: Portfolio, cfg: DetectorConfig | None = None, dump_dir=None):
    cfg = cfg or DetectorConfig()
    daily = portfolio_daily_mp(portfolio, cfg, dump_dir)
    if cfg.granularity == "building":
        records, unevaluable = [], []
        for b, days in sorted(daily.items()):
            samples = mp.collect_site_samples({b: days}, site_id=portfolio.site_id)
            recs, unev = compute_dvalues(samples, cfg.leave_one_out)
            for r in recs:
                r.building_id = b
            records += recs
            unevaluable += [(site, b, date) for site, date in unev]
        return records, unevaluable
    samples = mp.collect_site_samples(daily, site_id=portfolio.site_id)
    return compute_dvalues(samples, cfg.leave_one_out)


def dvalues_frame(records) -> pd.DataFrame:
    rows = [
        {"site_id": r.site_id, "building_id": r.building_id, "date": r.date, "weekday": r.weekday,
         "d_value": r.d_value, "p_value": r.p_value, "sample_size": r.sample_size}
        for r in records
    ]
    cols = ["site_id", "building_id", "date", "weekday", "d_value", "p_value", "sample_size"]
    frame = pd.DataFrame(rows, columns=cols)
    if frame["building_id"].isna().all():
        frame = frame.drop(columns="building_id")
    return frame


# ---------------------------------------------------------------------------
# labelers over D-values


def _labels_from_records(records, unevaluable, labels, method, diagnostics=()):
    per_building = any(r.building_id is not None for r in records) or any(len(u) == 3 for u in unevaluable)
    rows = []
    for r, lab in zip(records, labels):
        row = {"site_id": r.site_id, "date": r.date, "label": lab, "d_value": r.d_value, "p_value": r.p_value}
        if per_building:
            row["building_id"] = r.building_id
        rows.append(row)
    for u in unevaluable:
        row = {"site_id": u[0], "date": u[-1], "label": UNEVALUABLE, "d_value": np.nan, "p_value": np.nan}
        if per_building:
            row["building_id"] = u[1]
        rows.append(row)
    gran = BUILDING_DAY if per_building else SITE_DAY
    cols = KEYS[gran] + ["label", "d_value", "p_value"]
    return LabelSet(gran, pd.DataFrame(rows, columns=cols), method, list(diagnostics))


def _group_key(r: DValueRecord):
    return (r.site_id, r.building_id)


def aldi_plus_plus(records, n_components: int = 7, seed: int = 0, unevaluable=()) -> LabelSet:
    """Label dates by the mixture component their D-value falls in.

    One mixture is fitted per site (per building in per-building mode). The
    ``ceil((1 - mu_max) * n_components)`` lowest-mean components are
    non-discord, the rest discord. Groups with fewer than ``n_components``
    D-values are labelled unevaluable.
    """
    records = list(records)
    groups = {}
    for r in records:
        groups.setdefault(_group_key(r), []).append(r)

    out_records, out_labels, diagnostics = [], [], []
    unevaluable = list(unevaluable)
    for key in sorted(groups, key=lambda k: (str(k[0]), str(k[1]))):
        recs = groups[key]
        if len(recs) < n_components:
            msg = f"{key[0]}{'/' + key[1] if key[1] else ''}: {len(recs)} D-values < {n_components} components; unevaluable"
            log.warning(msg)
            diagnostics.append(msg)
            unevaluable += [(r.site_id, r.building_id, r.date) if r.building_id else (r.site_id, r.date) for r in recs]
            continue
        d = np.array([r.d_value for r in recs])
        gmm = fit_gmm(d, n_components, seed)
        thr = gmm_threshold(gmm)
        comp = gmm.predict(d)
        labs = np.where(comp < thr.n_nondiscord, NON_DISCORD, DISCORD)
        diagnostics.append(
            f"{key[0]}{'/' + key[1] if key[1] else ''}: mu_max={thr.mu_max:.4f} "
            f"non-discord components={thr.n_nondiscord}/{thr.n_components}"
        )
        out_records += recs
        out_labels += labs.tolist()
    return _labels_from_records(out_records, unevaluable, out_labels, "aldi++", diagnostics)


def aldi_baseline(records, p_threshold: float = 0.01, unevaluable=()) -> LabelSet:
    """Discord iff the KS p-value is strictly below ``p_threshold``."""
    if not 0.0 < p_threshold < 1.0:
        raise ValueError("p_threshold must lie in (0, 1)")
    records = list(records)
    labels = [DISCORD if r.p_value < p_threshold else NON_DISCORD for r in records]
    return _labels_from_records(records, unevaluable, labels, "aldi")


def two_sd_baseline(portfolio: Portfolio) -> LabelSet:
    """Per building, hours further than two standard deviations from the mean are discords."""
    ts = portfolio.timestamps()
    parts = []
    for s in portfolio.series:
        v = s.values
        ok = ~np.isnan(v)
        if ok.sum() < 2:
            raise ValueError(f"building {s.building_id}: fewer than 2 readings")
        mean = v[ok].mean()
        sd = v[ok].std()
        lab = np.full(v.size, UNEVALUABLE, dtype=np.int8)
        lab[ok] = np.where(np.abs(v[ok] - mean) > 2.0 * sd, DISCORD, NON_DISCORD)
        parts.append(pd.DataFrame({"site_id": portfolio.site_id, "building_id": s.building_id, "timestamp": ts, "label": lab}))
    return LabelSet(BUILDING_HOUR, pd.concat(parts, ignore_index=True), "2sd")


# ---------------------------------------------------------------------------
# pipelines


def detect(portfolio: Portfolio, method: str, cfg: DetectorConfig | None = None, dump_dir=None):
    """Run one labeler end to end on a portfolio; returns ``(labels, dvalue_records)``."""
    cfg = cfg or DetectorConfig()
    if method == "2sd":
        return two_sd_baseline(portfolio), []
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    records, unevaluable = site_dvalues(portfolio, cfg, dump_dir)
    if method == "aldi++":
        labels = aldi_plus_plus(records, cfg.n_components, cfg.seed, unevaluable)
    else:
        labels = aldi_baseline(records, cfg.p_threshold, unevaluable)
    return labels, records


def detect_all(portfolios, method: str, cfg: DetectorConfig | None = None, dump_dir=None):
    """Run :func:`detect` on every site and concatenate the results."""
    if isinstance(portfolios, Portfolio):
        portfolios = {portfolios.site_id: portfolios}
    labelsets, records = [], []
    for site in sorted(portfolios):
        labs, recs = detect(portfolios[site], method, cfg, dump_dir)
        labelsets.append(labs)
        records += recs
    return concat_labels(labelsets), records


def concat_labels(labelsets) -> LabelSet:
    labelsets = list(labelsets)
    if not labelsets:
        raise ValueError("nothing to concatenate")
    gran = labelsets[0].granularity
    if any(ls.granularity != gran for ls in labelsets):
        raise ValueError("cannot concatenate label sets of different granularity")
    frame = pd.concat([ls.frame for ls in labelsets], ignore_index=True)
    diags = [d for ls in labelsets for d in ls.diagnostics]
    return LabelSet(gran, frame, labelsets[0].method, diags)


# ---------------------------------------------------------------------------
# granularity conversions


def hourly_to_daily(labels: LabelSet, threshold_hours: int = 14) -> LabelSet:
    """A building-day is a discord when at least ``threshold_hours`` of its hours are.

    Unevaluable hours are ignored (the absolute threshold is unchanged); a
    day with no evaluable hour is unevaluable.
    """
    if labels.granularity != BUILDING_HOUR:
        raise ValueError("hourly_to_daily needs building-hour labels")
    if not 1 <= threshold_hours <= 24:
        raise ValueError("threshold_hours must lie in [1, 24]")
    f = labels.frame
    tmp = pd.DataFrame({
        "site_id": f["site_id"],
        "building_id": f["building_id"],
        "date": pd.to_datetime(f["timestamp"]).dt.date,
        "disc": (f["label"] == DISCORD).astype(int),
        "ev": (f["label"] != UNEVALUABLE).astype(int),
    })
    g = tmp.groupby(["site_id", "building_id", "date"], sort=True)[["disc", "ev"]].sum().reset_index()
    lab = np.where(g["disc"] >= threshold_hours, DISCORD, NON_DISCORD)
    lab = np.where(g["ev"] == 0, UNEVALUABLE, lab)
    out = g[["site_id", "building_id", "date"]].copy()
    out["label"] = lab
    return LabelSet(BUILDING_DAY, out, labels.method)


def site_to_building_day(labels: LabelSet, buildings) -> LabelSet:
    """Broadcast site-day labels onto buildings.

    ``buildings`` is a portfolio, a mapping of portfolios, or a frame with
    site_id and building_id columns.
    """
    if labels.granularity != SITE_DAY:
        raise ValueError("need site-day labels")
    pairs = _site_buildings(buildings)
    out = labels.frame.merge(pairs, on="site_id", how="inner")
    cols = KEYS[BUILDING_DAY] + ["label"] + [c for c in ("d_value", "p_value") if c in out.columns]
    return LabelSet(BUILDING_DAY, out[cols], labels.method)


def _site_buildings(buildings) -> pd.DataFrame:
    if isinstance(buildings, Portfolio):
        buildings = {buildings.site_id: buildings}
    if isinstance(buildings, dict):
        rows = [(site, b) for site, p in buildings.items() for b in p.building_ids]
        return pd.DataFrame(rows, columns=["site_id", "building_id"])
    return buildings[["site_id", "building_id"]].drop_duplicates()


def daily_to_hourly(labels: LabelSet, portfolios) -> LabelSet:
    """Expand daily labels to the 24 hours of each day for every covered building.

    Site-day labels are broadcast to all buildings of the site. Hours of the
    portfolio calendar without a daily label are unevaluable.
    """
    if isinstance(portfolios, Portfolio):
        portfolios = {portfolios.site_id: portfolios}
    if labels.granularity == SITE_DAY:
        labels = site_to_building_day(labels, portfolios)
    if labels.granularity != BUILDING_DAY:
        raise ValueError("daily_to_hourly needs site-day or building-day labels")
    daily = labels.frame.set_index(["site_id", "building_id", "date"])["label"]
    parts = []
    for site in sorted(portfolios):
        p = portfolios[site]
        ts = p.timestamps()
        dates = [d for d in p.dates() for _ in range(24)]
        for b in p.building_ids:
            idx = pd.MultiIndex.from_arrays([[site] * len(dates), [b] * len(dates), dates])
            lab = daily.reindex(idx).fillna(UNEVALUABLE).to_numpy(dtype=np.int8)
            parts.append(pd.DataFrame({"site_id": site, "building_id": b, "timestamp": ts, "label": lab}))
    return LabelSet(BUILDING_HOUR, pd.concat(parts, ignore_index=True), labels.method)


def building_day_to_hourly(labels: LabelSet) -> LabelSet:
    """Expand building-day labels to 24 hours each, without needing a portfolio."""
    if labels.granularity != BUILDING_DAY:
        raise ValueError("need building-day labels")
    f = labels.frame
    rep = f.loc[f.index.repeat(24), ["site_id", "building_id", "date", "label"]].reset_index(drop=True)
    hours = np.tile(np.arange(24), len(f))
    rep["timestamp"] = pd.to_datetime(rep["date"]) + pd.to_timedelta(hours, unit="h")
    return LabelSet(BUILDING_HOUR, rep[KEYS[BUILDING_HOUR] + ["label"]], labels.method)


def to_granularity(labels: LabelSet, target: str, portfolios=None, threshold_hours: int = 14) -> LabelSet:
    """Convert labels to ``target`` granularity using the documented rules."""
    if labels.granularity == target:
        return labels
    if target == BUILDING_DAY:
        if labels.granularity == BUILDING_HOUR:
            return hourly_to_daily(labels, threshold_hours)
        if portfolios is None:
            raise ValueError("broadcasting site-day labels needs the portfolio")
        return site_to_building_day(labels, portfolios)
    if target == BUILDING_HOUR:
        if portfolios is None:
            if labels.granularity == BUILDING_DAY:
                return building_day_to_hourly(labels)
            raise ValueError("expanding site-day labels needs the portfolio")
        return daily_to_hourly(labels, portfolios)
    raise ValueError(f"cannot convert {labels.granularity} labels to {target}")


# ---------------------------------------------------------------------------
# files


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_float(x) -> str:
    return "" if x != x else repr(float(x))


def _label_text(code: int) -> str:
    return "unevaluable" if code == UNEVALUABLE else str(int(code))


def labels_to_frame(labels: LabelSet) -> pd.DataFrame:
    f = labels.frame
    out = pd.DataFrame({"site_id": f["site_id"].astype(str)})
    if "building_id" in f.columns:
        out["building_id"] = f["building_id"].astype(str)
    if labels.granularity == BUILDING_HOUR:
        out["timestamp"] = pd.to_datetime(f["timestamp"]).dt.strftime(TIMESTAMP_FORMAT)
    else:
        out["date"] = [d.isoformat() for d in f["date"]]
    out["label"] = [_label_text(c) for c in f["label"]]
    out["method"] = labels.method
    for col in ("d_value", "p_value"):
        if col in f.columns:
            out[col] = [_fmt_float(x) for x in f[col]]
    return out


def write_labels(labels: LabelSet, path) -> None:
    """Write a label CSV sorted by (site, building, date/timestamp)."""
    atomic_write_text(path, labels_to_frame(labels).to_csv(index=False, lineterminator="\n"))


def read_labels(path) -> LabelSet:
    f = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "site_id" not in f.columns or "label" not in f.columns:
        raise ValueError(f"{path}: not a label file (needs site_id and label columns)")
    if "timestamp" in f.columns:
        if "building_id" not in f.columns:
            raise ValueError(f"{path}: hourly labels need building_id")
        gran = BUILDING_HOUR
        f["timestamp"] = pd.to_datetime(f["timestamp"], format=TIMESTAMP_FORMAT)
    elif "date" in f.columns:
        gran = BUILDING_DAY if "building_id" in f.columns else SITE_DAY
        f["date"] = pd.to_datetime(f["date"], format="%Y-%m-%d").dt.date
    else:
        raise ValueError(f"{path}: label file needs a date or timestamp column")
    codes = {"1": DISCORD, "0": NON_DISCORD, "unevaluable": UNEVALUABLE}
    bad = ~f["label"].isin(codes)
    if bad.any():
        raise ValueError(f"{path}: unknown label value(s) {sorted(f.loc[bad, 'label'].unique())[:5]}")
    f["label"] = f["label"].map(codes)
    for col in ("d_value", "p_value"):
        if col in f.columns:
            # float() round-trips repr output exactly, pd.to_numeric does not
            f[col] = [float(x) if x != "" else np.nan for x in f[col]]
    method = f["method"].iloc[0] if "method" in f.columns and len(f) else "external"
    keep = KEYS[gran] + ["label"] + [c for c in ("d_value", "p_value") if c in f.columns]
    return LabelSet(gran, f[keep], method)


def write_dvalues(records, path) -> None:
    frame = dvalues_frame(records)
    frame["date"] = [d.isoformat() for d in frame["date"]]
    for col in ("d_value", "p_value"):
        frame[col] = [_fmt_float(x) for x in frame[col]]
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def export_train_filter(labels: LabelSet, path) -> int:
    """Write ``building_id,timestamp,keep`` rows; discord and unevaluable hours get keep=0."""
    if labels.granularity != BUILDING_HOUR:
        raise ValueError("train filter needs building-hour labels")
    f = labels.frame
    out = pd.DataFrame({
        "building_id": f["building_id"].astype(str),
        "timestamp": pd.to_datetime(f["timestamp"]).dt.strftime(TIMESTAMP_FORMAT),
        "keep": (f["label"] == NON_DISCORD).astype(int),
    })
    atomic_write_text(path, out.to_csv(index=False, lineterminator="\n"))
    return len(out)
