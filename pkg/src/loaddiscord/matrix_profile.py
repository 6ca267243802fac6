"""Z-normalised matrix profile (self-join) and its reduction to daily values.

The self-join walks the distance matrix row by row, deriving each row of
sliding dot products from the previous one in O(1) per pair and recomputing
the row exactly every ``REFRESH`` rows to bound drift. Only the current row,
the profile and its index are kept in memory.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import MeterSeries, WEEKDAYS

REFRESH = 4096
# below this 1 - corr the correlation route loses all precision; such pairs
# are recomputed directly from their z-scores
_NEAR_ZERO = 1e-10


@dataclass
class MatrixProfileResult:
    window_m: int
    exclusion: int
    distances: np.ndarray
    neighbor_index: np.ndarray
    valid_mask: np.ndarray

    def __len__(self):
        return len(self.distances)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "distance", "neighbor_index", "valid"])
            for i, (d, j, v) in enumerate(zip(self.distances, self.neighbor_index, self.valid_mask)):
                w.writerow([i, repr(float(d)) if v else "", int(j), int(bool(v))])


@dataclass
class DailyMPSample:
    site_id: str
    date: dt.date
    weekday: str
    values: np.ndarray

    @property
    def size(self) -> int:
        return len(self.values)


def _znorm(x: np.ndarray) -> np.ndarray:
    mu = x.mean()
    if np.ptp(x) == 0:
        return np.zeros_like(x)
    return (x - mu) / x.std()


def znorm_distance(a, b) -> float:
    """Euclidean distance between z-normalised copies of ``a`` and ``b``.

    A constant sequence normalises to the zero vector.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("sequences need at least 2 points")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("sequences must be finite")
    return float(np.sqrt(((_znorm(a) - _znorm(b)) ** 2).sum()))


@njit(cache=True, nogil=True)
def _direct_distance(x, i, j, m, flat_i, flat_j):
    if flat_i and flat_j:
        return 0.0
    mi = 0.0
    mj = 0.0
    for t in range(m):
        mi += x[i + t]
        mj += x[j + t]
    mi /= m
    mj /= m
    si = 0.0
    sj = 0.0
    for t in range(m):
        si += (x[i + t] - mi) ** 2
        sj += (x[j + t] - mj) ** 2
    si = math.sqrt(si / m)
    sj = math.sqrt(sj / m)
    acc = 0.0
    for t in range(m):
        zi = 0.0 if flat_i else (x[i + t] - mi) / si
        zj = 0.0 if flat_j else (x[j + t] - mj) / sj
        acc += (zi - zj) ** 2
    return math.sqrt(acc)


@njit(cache=True, nogil=True)
def _self_join_kernel(x, mu, isig, flat, valid, m, excl, refresh, plain):
    """Row-wise self-join returning the best effective correlation per index.

    Candidates are ranked by Pearson correlation, which orders them exactly
    as the z-normalised distance ``sqrt(2m(1 - corr))``. Flat windows get
    the correlation matching their defined distance: 1 against another flat
    window (distance 0), 0.5 against a non-flat one (distance sqrt(m)).
    ``plain`` promises no flat or invalid windows and enables the lean loop.
    """
    l = mu.shape[0]
    best = np.full(l, -np.inf)
    I = np.full(l, -1, dtype=np.int64)
    qt = np.zeros(l)
    prev = np.zeros(l)
    inv_m = 1.0 / m
    two_m = 2.0 * m
    for i in range(l - excl - 1):
        j0 = i + excl + 1
        if i % refresh == 0:
            for j in range(j0, l):
                acc = 0.0
                for t in range(m):
                    acc += x[i + t] * x[j + t]
                qt[j] = acc
        else:
            a = x[i - 1]
            b = x[i + m - 1]
            for j in range(j0, l):
                qt[j] = prev[j - 1] - a * x[j - 1] + b * x[j + m - 1]
        prev, qt = qt, prev
        # prev now holds the dot products of row i
        if not valid[i]:
            continue
        bi = best[i]
        ii = I[i]
        mim = mu[i] * m
        si = isig[i] * inv_m
        if plain:
            for j in range(j0, l):
                cj = (prev[j] - mim * mu[j]) * (si * isig[j])
                if 1.0 - cj < _NEAR_ZERO:
                    d = _direct_distance(x, i, j, m, False, False)
                    cj = 1.0 - d * d / two_m
                if cj > bi:
                    bi = cj
                    ii = j
                if cj > best[j]:
                    best[j] = cj
                    I[j] = i
        else:
            for j in range(j0, l):
                if not valid[j]:
                    continue
                if flat[i] or flat[j]:
                    cj = 1.0 if (flat[i] and flat[j]) else 0.5
                else:
                    cj = (prev[j] - mim * mu[j]) * (si * isig[j])
                    if 1.0 - cj < _NEAR_ZERO:
                        d = _direct_distance(x, i, j, m, False, False)
                        cj = 1.0 - d * d / two_m
                if cj > bi:
                    bi = cj
                    ii = j
                if cj > best[j]:
                    best[j] = cj
                    I[j] = i
        best[i] = bi
        I[i] = ii
    return best, I


def window_stats(x: np.ndarray, m: int):
    """Per-window mean, population std and flatness, computed two-pass per window."""
    win = sliding_window_view(x, m)
    mu = win.mean(axis=1)
    sig = np.sqrt(((win - mu[:, None]) ** 2).mean(axis=1))
    flat = np.ptp(win, axis=1) == 0
    return mu, sig, flat


def self_join(series, window_m: int = 24, exclusion: int | None = None) -> MatrixProfileResult:
    """Matrix profile of ``series`` against itself.

    ``series`` is a :class:`MeterSeries` or a 1-d array; NaN marks missing
    hours and every window touching one is invalid (it neither receives a
    distance nor serves as a neighbour). Pairs with ``|i - j| <= exclusion``
    are trivial matches and skipped; the default zone is ``ceil(m / 2)``.
    Equal distances resolve to the smallest neighbour index.
    """
    values = series.values if isinstance(series, MeterSeries) else series
    x = np.asarray(values, dtype=float)
    m = int(window_m)
    if m < 2:
        raise ValueError("window_m must be at least 2")
    if x.size < 2 * m:
        raise ValueError(f"series of length {x.size} is shorter than 2 * window_m = {2 * m}")
    excl = int(math.ceil(m / 2)) if exclusion is None else int(exclusion)

    missing = ~np.isfinite(x)
    valid = ~sliding_window_view(missing, m).any(axis=1)
    if not valid.any():
        raise ValueError("every subsequence overlaps missing data")

    work = np.where(missing, 0.0, x)
    # centring keeps the rolling dot products small relative to the variances
    work = work - work[~missing].mean()
    mu, sig, flat = window_stats(work, m)
    isig = np.zeros_like(sig)
    np.divide(1.0, sig, out=isig, where=~flat)
    plain = bool(valid.all() and not flat.any())
    best, I = _self_join_kernel(work, mu, isig, flat, valid, m, excl, REFRESH, plain)
    P = np.full(best.shape, np.inf)
    found = I >= 0
    P[found] = np.sqrt(np.maximum(2.0 * m * (1.0 - best[found]), 0.0))

    return MatrixProfileResult(
        window_m=m,
        exclusion=excl,
        distances=P,
        neighbor_index=I,
        valid_mask=valid & found,
    )


def daily_mp(profile: MatrixProfileResult, series: MeterSeries, aggregation: str = "day-start"):
    """One matrix-profile value per calendar day of ``series``.

    Returns a list of ``(date, weekday, value)`` where ``value`` is ``None``
    for unevaluable days. ``day-start`` reads the window starting at
    midnight; ``day-mean`` averages the 24 windows starting within the day
    and needs all of them valid.
    """
    if profile.window_m != 24:
        raise ValueError("daily aggregation assumes 24-hour windows")
    if aggregation not in ("day-start", "day-mean"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if series.start.hour != 0:
        raise ValueError("series must start at midnight")
    n_days = len(series.values) // 24
    l = len(profile.distances)
    out = []
    for d in range(n_days):
        date = (series.start + dt.timedelta(days=d)).date()
        wd = WEEKDAYS[date.weekday()]
        lo = 24 * d
        if aggregation == "day-start":
            value = float(profile.distances[lo]) if profile.valid_mask[lo] else None
        else:
            hi = min(lo + 24, l)
            ok = profile.valid_mask[lo:hi]
            value = float(profile.distances[lo:hi].mean()) if hi - lo == 24 and ok.all() else None
        out.append((date, wd, value))
    return out


def collect_site_samples(daily_by_building, site_id: str | None = None) -> list[DailyMPSample]:
    """Pool per-building daily MP values into site-level samples per date.

    ``daily_by_building`` maps ``building_id -> daily_mp output`` for one
    site, or ``(site_id, building_id) -> daily_mp output`` when several
    sites are passed together (then ``site_id`` is ignored). Unevaluable
    values are skipped; dates where no building is evaluable yield an empty
    sample.
    """
    pools = defaultdict(list)
    weekday_of = {}
    for key, days in sorted(daily_by_building.items()):
        site = key[0] if isinstance(key, tuple) else site_id
        for date, wd, value in days:
            weekday_of[(site, date)] = wd
            bucket = pools[(site, date)]
            if value is not None:
                bucket.append(value)
    return [
        DailyMPSample(site_id=site, date=date, weekday=weekday_of[(site, date)], values=np.asarray(vals, dtype=float))
        for (site, date), vals in sorted(pools.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))
    ]
