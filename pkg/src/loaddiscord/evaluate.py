"""Classification metrics, RMSLE and the timed multi-run benchmark harness."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .detector import DISCORD, UNEVALUABLE, LabelSet, atomic_write_text, to_granularity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int
    excluded: int = 0  # keys dropped because either side is unevaluable

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _joined(pred: LabelSet, truth: LabelSet, value_col: str = "label"):
    if pred.granularity != truth.granularity:
        raise ValueError(f"granularity mismatch: {pred.granularity} vs {truth.granularity}")
    keys = truth.keys
    left = pred.frame[keys + [value_col]].rename(columns={value_col: "pred"})
    right = truth.frame[keys + ["label"]].rename(columns={"label": "truth"})
    j = left.merge(right, on=keys, how="inner")
    if j.empty:
        raise ValueError("predicted and true labels share no keys")
    return j


def confusion(pred: LabelSet, truth: LabelSet) -> ConfusionMatrix:
    """Confusion counts over jointly evaluable keys, discord as the positive class."""
    j = _joined(pred, truth)
    ev = (j["pred"] != UNEVALUABLE) & (j["truth"] != UNEVALUABLE)
    p = j.loc[ev, "pred"].to_numpy() == DISCORD
    t = j.loc[ev, "truth"].to_numpy() == DISCORD
    return ConfusionMatrix(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        tn=int((~p & ~t).sum()),
        fn=int((~p & t).sum()),
        excluded=int((~ev).sum()),
    )


def tpr_fpr(cm: ConfusionMatrix) -> tuple[float | None, float | None]:
    """True and false positive rates; ``None`` where the denominator is zero."""
    tpr = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    fpr = cm.fp / (cm.fp + cm.tn) if cm.fp + cm.tn else None
    return tpr, fpr


def auc_from_scores(scores, positive) -> float:
    """Mann-Whitney AUC: P(score of a positive > score of a negative), ties count half."""
    s = np.asarray(scores, dtype=float)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes in the truth labels")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    # average 1-based ranks over tied runs
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, truth: LabelSet) -> float:
    """Rank-based ROC-AUC of ``scores`` against ``truth``.

    ``scores`` is either a LabelSet (its hard 0/1 labels are the scores) or a
    mapping from truth keys (tuples in key-column order) to real scores.
    Unevaluable truth keys and keys without a score are skipped.
    """
    keys = truth.keys
    if isinstance(scores, LabelSet):
        j = _joined(scores, truth)
        j = j[(j["pred"] != UNEVALUABLE) & (j["truth"] != UNEVALUABLE)]
        s = j["pred"].to_numpy(dtype=float)
    else:
        if isinstance(scores, pd.Series):
            sc = scores.rename("score").reset_index()
        else:
            sc = pd.DataFrame([(*(k if isinstance(k, tuple) else (k,)), v) for k, v in dict(scores).items()])
        sc.columns = keys + ["score"]
        j = truth.frame.loc[truth.frame["label"] != UNEVALUABLE, keys + ["label"]].merge(sc, on=keys)
        j = j.rename(columns={"label": "truth"})
        j = j[np.isfinite(j["score"].to_numpy(dtype=float))]
        s = j["score"].to_numpy(dtype=float)
    if len(s) == 0:
        raise ValueError("no scored keys overlap the truth labels")
    return auc_from_scores(s, j["truth"].to_numpy() == DISCORD)


def rmsle(a, b) -> float:
    """Root mean squared logarithmic error with log(x + 1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("rmsle needs at least one value")
    if (a < 0).any() or (b < 0).any():
        raise ValueError("rmsle inputs must be non-negative")
    return float(np.sqrt(np.mean((np.log1p(a) - np.log1p(b)) ** 2)))


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class MethodResult:
    method: str
    runtime_runs: list = field(default_factory=list)
    confusion: ConfusionMatrix | None = None
    tpr: float | None = None
    fpr: float | None = None
    roc_auc: float | None = None
    roc_auc_scores: float | None = None
    discord_fraction: float | None = None
    error: str | None = None
    stable: bool = True

    @property
    def runtime_mean(self) -> float | None:
        return sum(self.runtime_runs) / len(self.runtime_runs) if self.runtime_runs else None

    @property
    def runtime_rounded(self) -> int | None:
        m = self.runtime_mean
        return None if m is None else int(math.floor(m + 0.5))


@dataclass
class BenchmarkReport:
    results: list
    runs: int
    granularity: str

    def __getitem__(self, method: str) -> MethodResult:
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)

    def rows(self) -> list[dict]:
        out = []
        for r in self.results:
            cm = r.confusion
            out.append({
                "method": r.method,
                "status": "failed" if r.error else "ok",
                "tp": cm.tp if cm else "",
                "fp": cm.fp if cm else "",
                "tn": cm.tn if cm else "",
                "fn": cm.fn if cm else "",
                "excluded": cm.excluded if cm else "",
                "tpr": _fmt(r.tpr),
                "fpr": _fmt(r.fpr),
                "roc_auc": _fmt(r.roc_auc),
                "roc_auc_scores": _fmt(r.roc_auc_scores),
                "discord_fraction": _fmt(r.discord_fraction),
                "runs": len(r.runtime_runs),
                "runtime_mean_s": _fmt(r.runtime_mean),
                "runtime_rounded_s": "" if r.runtime_rounded is None else r.runtime_rounded,
                "error": r.error or "",
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        rows = self.rows()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["method"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def to_text(self) -> str:
        cols = ["method", "status", "tp", "fp", "tn", "fn", "tpr", "fpr", "roc_auc", "discord_fraction", "runtime_mean_s"]
        rows = [[str(r[c]) if r[c] != "" else "-" for c in cols] for r in self.rows()]
        for r in rows:
            for i in (6, 7, 8, 9):
                if r[i] != "-":
                    r[i] = f"{float(r[i]):.4f}"
            if r[10] != "-":
                r[10] = f"{float(r[10]):.3f}"
        widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
        line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths)).rstrip()
        text = [line(cols), line(["-" * w for w in widths])] + [line(r) for r in rows]
        failed = [r for r in self.results if r.error]
        text += [f"{r.method} failed: {r.error}" for r in failed]
        text.append(f"({self.runs} run(s) per method, granularity {self.granularity})")
        return "\n".join(text) + "\n"

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "truth", "pred", "count"])
        for r in self.results:
            if r.confusion:
                cm = r.confusion
                for t, p, n in ((1, 1, cm.tp), (0, 1, cm.fp), (0, 0, cm.tn), (1, 0, cm.fn)):
                    w.writerow([r.method, t, p, n])
        return buf.getvalue()

    def write(self, out_dir, with_confusion: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "report.csv", self.to_csv())
        atomic_write_text(out / "report.txt", self.to_text())
        if with_confusion:
            atomic_write_text(out / "confusion.csv", self.confusion_csv())


def _fmt(x):
    return "" if x is None else repr(float(x))


def score_result(result: MethodResult, pred: LabelSet, truth: LabelSet, portfolios=None,
                 threshold_hours: int = 14) -> None:
    """Fill the classification metrics of ``result`` from ``pred`` against ``truth``."""
    pred_t = to_granularity(pred, truth.granularity, portfolios, threshold_hours)
    result.confusion = confusion(pred_t, truth)
    result.tpr, result.fpr = tpr_fpr(result.confusion)
    result.discord_fraction = pred_t.discord_fraction()
    try:
        result.roc_auc = roc_auc(pred_t, truth)
    except ValueError as exc:
        log.warning("%s: ROC-AUC undefined (%s)", result.method, exc)
    if "d_value" in pred_t.frame.columns and pred_t.frame["d_value"].notna().any():
        keys = truth.keys
        f = pred_t.frame.dropna(subset=["d_value"])
        idx = pd.MultiIndex.from_frame(f[keys]) if len(keys) > 1 else f[keys[0]]
        try:
            result.roc_auc_scores = roc_auc(pd.Series(f["d_value"].to_numpy(), index=idx), truth)
        except ValueError:
            pass


def benchmark(labelers, portfolios, truth: LabelSet, runs: int = 10, threshold_hours: int = 14,
              clock=time.perf_counter) -> BenchmarkReport:
    """Time each labeler over ``runs`` end-to-end runs and score its labels.

    ``labelers`` is a list of ``(name, fn)`` where ``fn(portfolios)`` returns
    a LabelSet. Labelers run one after another; a labeler that raises is
    reported as failed without affecting the others. Predictions are brought
    to the truth granularity before scoring.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    results = []
    for name, fn in labelers:
        res = MethodResult(method=name)
        first = None
        try:
            for _ in range(runs):
                t0 = clock()
                labels = fn(portfolios)
                res.runtime_runs.append(clock() - t0)
                if first is None:
                    first = labels
                elif not labels.frame.equals(first.frame):
                    res.stable = False
            score_result(res, first, truth, portfolios, threshold_hours)
        except Exception as exc:  # isolate failing methods
            log.exception("labeler %s failed", name)
            res.error = f"{type(exc).__name__}: {exc}"
        results.append(res)
    return BenchmarkReport(results=results, runs=runs, granularity=truth.granularity)
