"""Synthetic site portfolios with weekly seasonality and injected discord days."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .detector import BUILDING_HOUR, DISCORD, KEYS, NON_DISCORD, SITE_DAY, LabelSet
from .ingest import MeterSeries, Portfolio


@dataclass
class SyntheticSite:
    portfolio: Portfolio
    anomalies: dict  # date -> "flatline" | "spike"
    spike_hours: dict  # date -> list of hour offsets

    def truth_site_day(self) -> LabelSet:
        dates = self.portfolio.dates()
        lab = [DISCORD if d in self.anomalies else NON_DISCORD for d in dates]
        frame = pd.DataFrame({"site_id": self.portfolio.site_id, "date": dates, "label": lab})
        return LabelSet(SITE_DAY, frame[KEYS[SITE_DAY] + ["label"]], "ground-truth")

    def truth_hourly(self) -> LabelSet:
        """All 24 hours of every anomalous day marked discord."""
        p = self.portfolio
        ts = p.timestamps()
        day_lab = np.repeat([DISCORD if d in self.anomalies else NON_DISCORD for d in p.dates()], 24)
        parts = [pd.DataFrame({"site_id": p.site_id, "building_id": b, "timestamp": ts, "label": day_lab})
                 for b in p.building_ids]
        return LabelSet(BUILDING_HOUR, pd.concat(parts, ignore_index=True), "ground-truth")


def _weekly_shape(rng, kind: str) -> np.ndarray:
    h = np.arange(24)
    if kind == "office":
        day = 0.25 + 0.75 / (1 + np.exp(-(h - 7.5) * 1.5)) / (1 + np.exp((h - 18.5) * 1.5))
        weekend = 0.3 + 0.05 * np.sin(2 * np.pi * h / 24)
    else:
        day = 0.5 + 0.3 * np.sin(2 * np.pi * (h - 6) / 24) + 0.15 * np.exp(-((h - 19) ** 2) / 4)
        weekend = 0.55 + 0.35 * np.sin(2 * np.pi * (h - 8) / 24)
    jitter = rng.uniform(-0.03, 0.03, size=24)
    week = [day + jitter] * 5 + [weekend, weekend * 0.95]
    return np.concatenate(week)


def make_site(
    n_buildings: int = 10,
    n_weeks: int = 52,
    n_anomalies: int = 20,
    seed: int = 0,
    site_id: str = "site0",
    start: dt.datetime = dt.datetime(2016, 1, 4),
    noise: float = 0.03,
    spike_sigma: float = 5.0,
    spike_len: int = 3,
    kinds=("flatline", "spike"),
) -> SyntheticSite:
    """Generate a site whose buildings repeat a weekly load shape with noise.

    ``n_anomalies`` dates (never the first or last day) are corrupted across
    every building: a flatline holds the day at the building's mean level,
    a spike adds ``spike_sigma`` building standard deviations to
    ``spike_len`` consecutive hours. Kinds alternate in ``kinds`` order.
    """
    rng = np.random.default_rng(seed)
    n_days = 7 * n_weeks
    n_hours = 24 * n_days
    picks = rng.choice(np.arange(1, n_days - 1), size=n_anomalies, replace=False)
    picks.sort()
    dates = [start.date() + dt.timedelta(days=int(d)) for d in picks]
    kind_of = {d: kinds[i % len(kinds)] for i, d in enumerate(dates)}
    spike_at = {d: int(rng.integers(0, 24 - spike_len + 1)) for d in dates if kind_of[d] == "spike"}

    series = []
    for b in range(n_buildings):
        shape = _weekly_shape(rng, "office" if b % 2 == 0 else "residential")
        base = rng.uniform(50, 500)
        # start weekday offset so index 0 lines up with start.weekday()
        week = np.roll(shape, -24 * start.weekday())
        clean = np.tile(week, n_weeks)[:n_hours]
        values = base * (clean + noise * rng.standard_normal(n_hours))
        values = np.clip(values, 0.0, None)
        mean, sd = values.mean(), values.std()
        for d, kind in kind_of.items():
            lo = 24 * (d - start.date()).days
            if kind == "flatline":
                values[lo:lo + 24] = mean
            else:
                h = lo + spike_at[d]
                values[h:h + spike_len] = mean + spike_sigma * sd
        series.append(MeterSeries(f"B{b:03d}", site_id, start, values))
    portfolio = Portfolio(site_id, series)
    hours = {d: list(range(spike_at[d], spike_at[d] + spike_len)) for d in spike_at}
    return SyntheticSite(portfolio, kind_of, hours)
