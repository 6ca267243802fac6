"""Shared fixtures and slow-but-obvious reference implementations."""

from __future__ import annotations

import datetime as dt
from fractions import Fraction

import numpy as np
import pytest

from loaddiscord.ingest import MeterSeries, Portfolio


def brute_force_mp(x, m, excl=None):
    """O(n^2 m) matrix profile straight from the definition.

    Flat windows z-normalise to zeros; windows touching NaN are skipped.
    Ties go to the smallest neighbour index.
    """
    x = np.asarray(x, dtype=float)
    excl = int(np.ceil(m / 2)) if excl is None else excl
    l = x.size - m + 1
    z = np.zeros((l, m))
    ok = np.ones(l, dtype=bool)
    for i in range(l):
        w = x[i:i + m]
        if np.isnan(w).any():
            ok[i] = False
            continue
        if np.ptp(w) > 0:
            z[i] = (w - w.mean()) / w.std()
    P = np.full(l, np.inf)
    I = np.full(l, -1)
    for i in range(l):
        if not ok[i]:
            continue
        for j in range(l):
            if abs(i - j) <= excl or not ok[j]:
                continue
            d = np.sqrt(((z[i] - z[j]) ** 2).sum())
            if d < P[i]:
                P[i], I[i] = d, j
    return P, I, ok


def fraction_ks(a, b) -> Fraction:
    """Exact two-sample KS supremum by enumerating ECDFs at every pooled point."""
    a, b = sorted(a), sorted(b)
    best = Fraction(0)
    for x in sorted(set(a) | set(b)):
        fa = Fraction(sum(v <= x for v in a), len(a))
        fb = Fraction(sum(v <= x for v in b), len(b))
        best = max(best, abs(fa - fb))
    return best


def pairwise_auc(scores, positive) -> float:
    """AUC by enumerating every (positive, negative) pair; ties count half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = Fraction(0)
    for p in pos:
        for n in neg:
            total += 1 if p > n else Fraction(1, 2) if p == n else 0
    return float(total / (len(pos) * len(neg)))


def make_portfolio(values_by_building: dict, site_id="s1", start=dt.datetime(2016, 1, 4)) -> Portfolio:
    return Portfolio(site_id, [MeterSeries(b, site_id, start, v) for b, v in values_by_building.items()])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_mp_vectorized(x, m, excl=None):
    """Same definition as :func:`brute_force_mp` with the full distance matrix in memory."""
    x = np.asarray(x, dtype=float)
    excl = int(np.ceil(m / 2)) if excl is None else excl
    win = np.lib.stride_tricks.sliding_window_view(x, m)
    mu = win.mean(axis=1, keepdims=True)
    sd = win.std(axis=1, keepdims=True)
    flat = np.ptp(win, axis=1) == 0
    z = np.where(flat[:, None], 0.0, (win - mu) / np.where(sd == 0, 1.0, sd))
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=2))
    l = len(z)
    idx = np.arange(l)
    d[np.abs(idx[:, None] - idx[None, :]) <= excl] = np.inf
    I = np.argmin(d, axis=1)  # first minimum = smallest index
    return d[idx, I], I


# acceptance outcomes, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, secs, note = ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({secs:.1f}s) {desc}"
        if note:
            line += f" -- {note}"
        terminalreporter.write_line(line)
