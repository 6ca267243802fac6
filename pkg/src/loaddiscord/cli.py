"""Command-line entry point: detect, evaluate, export-filter, benchmark, convert, synth.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import pandas as pd

from . import detector as det
from . import evaluate as ev
from .ingest import IngestConfig, align_all, parse_csv, wide_to_long, write_csv

log = logging.getLogger("loaddiscord")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(message)
        self.stage = stage
        self.code = code


@dataclass
class RunConfig:
    input: list = field(default_factory=list)
    columns: dict = field(default_factory=dict)
    site_map: dict = field(default_factory=dict)
    default_site: str = "site"
    max_gap: int = 3
    method: str = "aldi++"
    methods: list = field(default_factory=lambda: ["2sd", "aldi", "aldi++"])
    window: int = 24
    n_components: int = 7
    p_threshold: float = 0.01
    aggregation: str = "day-start"
    granularity: str = "site"
    leave_one_out: bool = False
    seed: int = 0
    jobs: int = 1
    runs: int = 10
    truth: str | None = None
    threshold_hours: int = 14
    out: str = "out"

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise StageError("config", f"config file not found: {path}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise StageError("config", f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise StageError("config", f"{path}: unknown key(s) {unknown}", EXIT_CONFIG)
        if isinstance(raw.get("input"), str):
            raw["input"] = [raw["input"]]
        return cls(**raw)

    def validate(self) -> None:
        def bad(msg):
            raise StageError("config", msg, EXIT_CONFIG)

        for m in [self.method, *self.methods]:
            if m not in det.METHODS:
                bad(f"unknown method {m!r}; choose from {', '.join(det.METHODS)}")
        if self.aggregation not in ("day-start", "day-mean"):
            bad(f"unknown aggregation {self.aggregation!r}")
        if self.granularity not in ("site", "building"):
            bad(f"unknown granularity {self.granularity!r}")
        if self.n_components < 1:
            bad("n_components must be >= 1")
        if not 0.0 < self.p_threshold < 1.0:
            bad("p_threshold must lie in (0, 1)")
        if self.runs < 1:
            bad("runs must be >= 1")
        if self.max_gap < 0:
            bad("max_gap must be >= 0")
        if not 1 <= self.threshold_hours <= 24:
            bad("threshold_hours must lie in [1, 24]")
        if self.window < 2:
            bad("window must be >= 2")

    def ingest_config(self) -> IngestConfig:
        return IngestConfig.from_dict({
            "columns": self.columns, "max_gap": self.max_gap,
            "site_map": self.site_map, "default_site": self.default_site,
        })

    def detector_config(self) -> det.DetectorConfig:
        return det.DetectorConfig(
            window=self.window, aggregation=self.aggregation, max_gap=self.max_gap,
            n_components=self.n_components, p_threshold=self.p_threshold,
            granularity=self.granularity, leave_one_out=self.leave_one_out,
            seed=self.seed, jobs=self.jobs,
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["columns"] = self.ingest_config().columns
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


# flag name -> RunConfig field
_OVERRIDES = {
    "input": "input", "method": "method", "methods": "methods", "n_components": "n_components",
    "p_threshold": "p_threshold", "aggregation": "aggregation", "granularity": "granularity",
    "seed": "seed", "runs": "runs", "out": "out", "max_gap": "max_gap", "jobs": "jobs",
    "leave_one_out": "leave_one_out", "truth": "truth", "window": "window", "default_site": "default_site",
}


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for flag, name in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, name, val)
    cfg.validate()
    return cfg


def load_portfolios(cfg: RunConfig) -> dict:
    if not cfg.input:
        raise StageError("ingest", "no --input given", EXIT_CONFIG)
    icfg = cfg.ingest_config()
    frames, malformed = [], 0
    for path in cfg.input:
        try:
            parsed = parse_csv(path, icfg)
        except (FileNotFoundError, OSError) as exc:
            raise StageError("ingest", f"cannot read {path}: {exc}", EXIT_IO) from exc
        except ValueError as exc:
            raise StageError("ingest", str(exc), EXIT_PIPELINE) from exc
        frames.append(parsed.frame)
        malformed += parsed.malformed
    if malformed:
        log.warning("%d malformed row(s) skipped during ingest", malformed)
    try:
        return align_all(pd.concat(frames, ignore_index=True))
    except ValueError as exc:
        raise StageError("ingest", str(exc), EXIT_PIPELINE) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("output", f"cannot create {out}: {exc}", EXIT_IO) from exc
    return out


def _read_labels(path, stage="evaluate"):
    try:
        return det.read_labels(path)
    except FileNotFoundError as exc:
        raise StageError(stage, f"label file not found: {path}", EXIT_IO) from exc
    except ValueError as exc:
        raise StageError(stage, str(exc), EXIT_CONFIG) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_detect(args) -> int:
    cfg = resolve_config(args)
    portfolios = load_portfolios(cfg)
    out = _out_dir(cfg.out)
    dump = None
    if getattr(args, "dump_mp", False):
        dump = out / "mp"
        dump.mkdir(exist_ok=True)
    try:
        labels, records = det.detect_all(portfolios, cfg.method, cfg.detector_config(), dump)
    except Exception as exc:
        raise StageError("detect", f"{type(exc).__name__}: {exc}", EXIT_PIPELINE) from exc
    try:
        det.write_labels(labels, out / "labels.csv")
        if records:
            det.write_dvalues(records, out / "dvalues.csv")
        det.atomic_write_text(out / "config.json", cfg.to_json())
    except OSError as exc:
        raise StageError("output", str(exc), EXIT_IO) from exc
    for d in labels.diagnostics:
        log.info(d)
    c = labels.counts()
    print(f"{cfg.method}: {c['discord']} discord, {c['non-discord']} non-discord, "
          f"{c['unevaluable']} unevaluable {labels.granularity} labels -> {out / 'labels.csv'}")
    return EXIT_OK


def _align_for_eval(pred: det.LabelSet, truth: det.LabelSet, to_daily, to_hourly):
    hourly = det.BUILDING_HOUR
    if to_daily is not None:
        if pred.granularity == hourly:
            pred = det.hourly_to_daily(pred, to_daily)
        if truth.granularity == hourly:
            truth = det.hourly_to_daily(truth, to_daily)
    if (pred.granularity == hourly) != (truth.granularity == hourly):
        if not to_hourly:
            raise StageError(
                "evaluate",
                f"granularity mismatch ({pred.granularity} vs {truth.granularity}); "
                "pass --to-daily N or --to-hourly",
                EXIT_CONFIG,
            )
    # site-day labels broadcast onto the buildings named by the other side
    if pred.granularity == det.SITE_DAY and truth.granularity != det.SITE_DAY:
        pred = det.site_to_building_day(pred, truth.frame)
    if truth.granularity == det.SITE_DAY and pred.granularity != det.SITE_DAY:
        truth = det.site_to_building_day(truth, pred.frame)
    if to_hourly:
        if pred.granularity == det.BUILDING_DAY:
            pred = det.building_day_to_hourly(pred)
        if truth.granularity == det.BUILDING_DAY:
            truth = det.building_day_to_hourly(truth)
    return pred, truth


def cmd_evaluate(args) -> int:
    pred = _read_labels(args.pred)
    truth = _read_labels(args.truth)
    pred, truth = _align_for_eval(pred, truth, args.to_daily, args.to_hourly)
    result = ev.MethodResult(method=pred.method)
    try:
        ev.score_result(result, pred, truth)
    except ValueError as exc:
        raise StageError("evaluate", str(exc), EXIT_PIPELINE) from exc
    report = ev.BenchmarkReport([result], runs=0, granularity=truth.granularity)
    out = _out_dir(args.out)
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_export_filter(args) -> int:
    labels = _read_labels(args.labels, stage="export")
    portfolios = None
    if args.input or args.config:
        cfg = resolve_config(args)
        portfolios = load_portfolios(cfg)
    try:
        hourly = det.to_granularity(labels, det.BUILDING_HOUR, portfolios)
    except ValueError as exc:
        code = EXIT_CONFIG if "needs the portfolio" in str(exc) else EXIT_PIPELINE
        raise StageError("export", f"{exc} (pass --input)", code) from exc
    if portfolios is not None and labels.granularity == det.BUILDING_HOUR:
        # cover every portfolio hour; hours without a label are dropped from training
        grid = pd.concat([p.to_frame()[det.KEYS[det.BUILDING_HOUR]] for _, p in sorted(portfolios.items())],
                         ignore_index=True)
        merged = grid.merge(hourly.frame[det.KEYS[det.BUILDING_HOUR] + ["label"]],
                            on=det.KEYS[det.BUILDING_HOUR], how="left")
        merged["label"] = merged["label"].fillna(det.UNEVALUABLE)
        hourly = det.LabelSet(det.BUILDING_HOUR, merged, labels.method)
    try:
        n = det.export_train_filter(hourly, args.out)
    except OSError as exc:
        raise StageError("export", f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    kept = int((hourly.frame["label"] == det.NON_DISCORD).sum())
    print(f"{n} rows written to {args.out} ({kept} keep, {n - kept} drop)")
    return EXIT_OK


def _labeler(method: str, dcfg: det.DetectorConfig):
    def run(portfolios):
        return det.detect_all(portfolios, method, dcfg)[0]
    return run


def cmd_benchmark(args) -> int:
    cfg = resolve_config(args)
    if not cfg.truth:
        raise StageError("config", "benchmark needs --truth", EXIT_CONFIG)
    truth = _read_labels(cfg.truth, stage="benchmark")
    portfolios = load_portfolios(cfg)
    if truth.granularity == det.SITE_DAY:
        truth = det.site_to_building_day(truth, portfolios)
    elif truth.granularity == det.BUILDING_HOUR:
        truth = det.hourly_to_daily(truth, cfg.threshold_hours)
    dcfg = cfg.detector_config()
    labelers = [(m, _labeler(m, dcfg)) for m in cfg.methods]
    report = ev.benchmark(labelers, portfolios, truth, cfg.runs, cfg.threshold_hours)
    out = _out_dir(cfg.out)
    report.write(out)
    det.atomic_write_text(out / "config.json", cfg.to_json())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_convert(args) -> int:
    try:
        n = wide_to_long(args.wide, args.out, args.timestamp_col, args.site_from_prefix, args.default_site)
    except FileNotFoundError as exc:
        raise StageError("convert", f"cannot read {args.wide}", EXIT_IO) from exc
    except ValueError as exc:
        raise StageError("convert", str(exc), EXIT_CONFIG) from exc
    print(f"{n} rows written to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import make_site

    site = make_site(n_buildings=args.buildings, n_weeks=args.weeks, n_anomalies=args.anomalies,
                     seed=args.seed, site_id=args.site)
    write_csv(site.portfolio, args.out)
    if args.truth:
        det.write_labels(site.truth_hourly(), args.truth)
    print(f"{len(site.portfolio.series)} buildings x {site.portfolio.n_hours} hours -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p, method=True):
    p.add_argument("--input", nargs="+", help="long-format meter CSV file(s)")
    p.add_argument("--config", help="JSON run configuration")
    if method:
        p.add_argument("--method", help="aldi++ | aldi | 2sd")
    p.add_argument("--n-components", type=int, dest="n_components")
    p.add_argument("--p-threshold", type=float, dest="p_threshold")
    p.add_argument("--aggregation", choices=["day-start", "day-mean"])
    p.add_argument("--granularity", choices=["site", "building"])
    p.add_argument("--leave-one-out", action="store_const", const=True, dest="leave_one_out")
    p.add_argument("--max-gap", type=int, dest="max_gap")
    p.add_argument("--window", type=int)
    p.add_argument("--default-site", dest="default_site")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loaddiscord", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="label daily load profiles")
    _add_run_flags(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-mp", action="store_true", help="write per-building matrix profiles")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--to-daily", type=int, metavar="HOURS", dest="to_daily",
                   help="convert hourly labels to daily (discord if >= HOURS discord hours)")
    p.add_argument("--to-hourly", action="store_true", dest="to_hourly")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-filter", help="write a keep/drop training filter")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input", nargs="+")
    p.add_argument("--config")
    p.add_argument("--default-site", dest="default_site")
    p.set_defaults(func=cmd_export_filter)

    p = sub.add_parser("benchmark", help="time and score several methods")
    _add_run_flags(p, method=False)
    p.add_argument("--methods", type=lambda s: [m.strip() for m in s.split(",") if m.strip()])
    p.add_argument("--truth")
    p.add_argument("--runs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("convert", help="wide CSV (one column per building) to long format")
    p.add_argument("--wide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timestamp-col", default="timestamp", dest="timestamp_col")
    p.add_argument("--site-from-prefix", action="store_true", dest="site_from_prefix")
    p.add_argument("--default-site", default="site", dest="default_site")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("synth", help="generate a synthetic site with injected discord days")
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.add_argument("--buildings", type=int, default=10)
    p.add_argument("--weeks", type=int, default=52)
    p.add_argument("--anomalies", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--site", default="site0")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"loaddiscord: error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
