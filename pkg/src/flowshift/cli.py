"""Command-line entry points.

Every subcommand reads a run configuration (YAML, see :class:`RunConfig`),
writes its outputs under ``--out`` through temp-file-and-rename, and maps
package errors onto exit codes: 2 bad input, 3 insufficient data, 4 failed
internal invariant.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields
from datetime import date

import numpy as np
import yaml

from . import FlowshiftError, InputError, InsufficientData, InvariantViolation, __version__
from . import anomaly, change, mg, store, synth
from .classify import PortMap, load_portmap
from .flows import DAY, HOUR, IngestConfig, StudyCalendar, format_timestamp, ip_to_int
from .orgs import PrefixDirectory, format_prefix, load_directory
from .table import FlowTable

log = logging.getLogger("flowshift")

EXIT_OK, EXIT_INPUT, EXIT_INSUFFICIENT, EXIT_INVARIANT = 0, 2, 3, 4
PATH_KEYS = ("flows", "org_db", "local_prefixes", "anon_map", "gt_prefixes", "gt_ports",
             "relations", "port_map", "known_mg")
REQUIRED = {
    "classify": ("flows", "org_db", "local_prefixes"),
    "mg-train": ("flows", "org_db", "local_prefixes", "gt_prefixes"),
    "change": ("org_db", "local_prefixes"),
    "liveness": ("flows", "org_db", "local_prefixes"),
    "anomaly": ("flows",),
    "daily": (),
    "ip": ("flows",),
}


@dataclass
class RunConfig:
    """Inputs, calendar, thresholds and output location of one run.

    Relative paths resolve against the directory holding the config file.
    """

    flows: str | None = None
    org_db: str | None = None
    local_prefixes: str | None = None
    anon_map: str | None = None
    gt_prefixes: str | None = None
    gt_ports: str | None = None
    relations: str | None = None
    port_map: str | None = None
    known_mg: str | None = None
    calendar: StudyCalendar = field(default_factory=StudyCalendar)
    alpha: float = 0.5
    min_daily_change: float = float(change.TB)
    k_threshold: float = anomaly.K_THRESHOLD
    window: int = 1
    rules: anomaly.ThresholdRules = field(default_factory=anomaly.ThresholdRules)
    out: str = "out"
    seed: int = 0
    strict: bool = False
    reports: tuple[str, ...] = ("apps", "orgs")

    @classmethod
    def from_dict(cls, d: dict, base: str = ".") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(d)
        for key in PATH_KEYS + ("out",):
            if kw.get(key) is not None:
                kw[key] = os.path.normpath(os.path.join(base, str(kw[key])))
        try:
            if "calendar" in kw:
                kw["calendar"] = StudyCalendar.from_dict(kw["calendar"])
            if "rules" in kw:
                kw["rules"] = anomaly.ThresholdRules(**(kw["rules"] or {}))
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad config: {exc}") from exc
        if "reports" in kw:
            kw["reports"] = tuple(kw["reports"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.exists(path):
            raise InputError(f"missing config file: {path}")
        with open(path) as fh:
            try:
                d = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise InputError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise InputError(f"{path}: expected a mapping")
        base = os.path.dirname(os.path.abspath(path))
        d.setdefault("out", "out")
        return cls.from_dict(d, base)

    def validate(self, command: str) -> None:
        for key in REQUIRED.get(command, ()):
            if getattr(self, key) is None:
                raise InputError(f"{command} needs '{key}' in the run configuration")
        for key in PATH_KEYS:
            path = getattr(self, key)
            if path is not None and not os.path.exists(path):
                raise InputError(f"{key}: file not found: {path}")
        if not 0 <= self.alpha <= 1:
            raise InputError("alpha must lie in [0, 1]")
        for name in ("min_daily_change", "k_threshold"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if self.window < 1:
            raise InputError("window must be at least one bin")
        for f in fields(self.rules):
            if not getattr(self.rules, f.name) > 0:
                raise InputError(f"rules.{f.name} must be positive")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _clean(o):
    # JSON has no inf/nan
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def write_json(path, obj) -> None:
    text = json.dumps(_clean(obj), indent=1, sort_keys=True, default=_json_default)
    store.atomic_write_text(path, text + "\n")


def write_rows(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    store.atomic_write_text(path, buf.getvalue())


def write_series(path, times, values) -> None:
    """Two-column ``timestamp,value`` file."""
    write_rows(path, ("timestamp", "value"),
               ((format_timestamp(t), _num(v)) for t, v in zip(times, values)))


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else repr(v)


def _cell(res: change.ChangeResult | None) -> tuple:
    if res is None:
        return ("", "")
    pct = res.percent() if res.direction != change.NONE or res.tag else ""
    return (res.direction, pct)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def load_table(cfg: RunConfig) -> FlowTable:
    table, report = FlowTable.read_csv(cfg.flows, IngestConfig(strict=cfg.strict))
    if report.errors:
        log.warning("%d malformed flow lines skipped (first at line %d: %s)",
                    len(report.errors), *report.errors[0])
    return table


def load_dir(cfg: RunConfig) -> PrefixDirectory:
    return load_directory(cfg.org_db, cfg.local_prefixes, cfg.anon_map)


def _ports(cfg: RunConfig) -> PortMap:
    return load_portmap(cfg.port_map) if cfg.port_map else PortMap()


def _gt_ports(cfg: RunConfig):
    return mg.load_gt_ports(cfg.gt_ports)


def _relations(cfg: RunConfig) -> mg.BusinessRelations:
    return mg.load_relations(cfg.relations) if cfg.relations else mg.BusinessRelations()


def _store_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.out, "store")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _train_mg(cfg: RunConfig, table: FlowTable, directory: PrefixDirectory) -> mg.MgResult:
    gt, conflicts = mg.expand_ground_truth(cfg.gt_prefixes)
    res = mg.build_known_mg(table, directory, gt, _gt_ports(cfg), _relations(cfg),
                            seed=cfg.seed)
    res.conflicts = conflicts
    return res


def _write_mg(cfg: RunConfig, res: mg.MgResult) -> None:
    outdir = os.path.join(cfg.out, "mg")
    os.makedirs(outdir, exist_ok=True)
    buf = os.path.join(outdir, ".known_mg.tmp")
    res.known.save(buf)
    os.replace(buf, os.path.join(outdir, "known_mg.csv"))
    store.atomic_write_text(os.path.join(outdir, "tree.json"), res.tree.dumps() + "\n")
    write_json(os.path.join(outdir, "train_report.json"), res.report.to_dict())
    counts = res.known.counts()
    write_rows(os.path.join(outdir, "mg_counts.csv"), ("app", mg.GROUND_TRUTH, mg.VERIFIED),
               ((app, c[mg.GROUND_TRUTH], c[mg.VERIFIED]) for app, c in sorted(counts.items())))


def cmd_mg_train(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    directory = load_dir(cfg)
    res = _train_mg(cfg, table, directory)
    _write_mg(cfg, res)
    print(f"trained on {res.report.n_train} vectors, held-out accuracy "
          f"{res.report.accuracy:.4f}; {len(res.known.entries)} known mg prefixes")
    return EXIT_OK


def _mg_labels(cfg: RunConfig, table: FlowTable, directory: PrefixDirectory) -> dict[int, str]:
    if cfg.known_mg:
        return mg.KnownMgPrefixes.load(cfg.known_mg).label_map()
    if not cfg.gt_prefixes:
        return {}
    try:
        res = _train_mg(cfg, table, directory)
    except InsufficientData as exc:
        # no usable training set: fall back to the ground-truth prefixes alone
        log.warning("mg training skipped (%s); using ground-truth prefixes only", exc)
        gt, _ = mg.expand_ground_truth(cfg.gt_prefixes)
        known = mg.KnownMgPrefixes()
        for real, app in sorted(gt.items()):
            anon = directory.anon_prefix(real)
            if anon is not None:
                known.add(anon, mg.MgEntry(app, mg.GROUND_TRUTH))
        return known.label_map()
    _write_mg(cfg, res)
    return res.known.label_map()


def check_conservation(df, table: FlowTable) -> dict:
    """Store totals must equal the corpus totals, per column."""
    out = {}
    for col, values in (("bytes", table.bytes), ("packets", table.packets)):
        want = int(values.astype(np.uint64).sum()) if len(table) else 0
        got = int(df[col].to_numpy(dtype=np.uint64).sum()) if len(df) else 0
        if want != got:
            raise InvariantViolation(f"store {col} {got} != corpus {col} {want}")
        out[col] = got
    per_label = store.label_totals(df)
    cand = store.candidate_total(df)
    if sum(per_label.get(lab, 0) for lab in store.CANDIDATE_LABELS) != cand:
        raise InvariantViolation("labeled plus unlabeled volume differs from candidate volume")
    out["candidate_bytes"] = cand
    out["per_label_bytes"] = per_label
    return out


def cmd_classify(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    directory = load_dir(cfg)
    labels = _mg_labels(cfg, table, directory)
    df = store.aggregate(table, directory, _ports(cfg), labels)
    totals = check_conservation(df, table)
    store.save_store(df, _store_dir(cfg))
    write_json(os.path.join(cfg.out, "classify_summary.json"),
               {"flows": len(table), "rows": len(df), "mg_prefixes": len(labels), **totals})
    print(f"{len(table)} flows -> {len(df)} store rows in {_store_dir(cfg)}")
    return EXIT_OK


def cmd_change(cfg: RunConfig, args) -> int:
    df = store.load_store(_store_dir(cfg))
    cal = cfg.calendar
    outdir = os.path.join(cfg.out, "change")
    series_dir = os.path.join(outdir, "series")
    os.makedirs(series_dir, exist_ok=True)
    grid = change.bin_grid(df)

    if "apps" in cfg.reports:
        rows = change.app_change_table(df, cal, cfg.alpha)
        write_json(os.path.join(outdir, "app_change.json"), [r.to_dict() for r in rows])
        write_rows(os.path.join(outdir, "app_change.csv"),
                   ("label", "relevant", "work_direction", "work_pct", "rest_direction",
                    "rest_pct"),
                   ((r.label, int(r.relevant), *_cell(r.work), *_cell(r.rest))
                    for r in rows if r.present))
        hourly = grid[::HOUR // 300] if len(grid) else grid
        for r in rows:
            if not r.present:
                continue
            vol = change.volume_on_grid(change.label_rows(df, r.label), grid)
            n = len(vol) // (HOUR // 300) * (HOUR // 300)
            sums = vol[:n].reshape(-1, HOUR // 300).sum(axis=1)
            write_series(os.path.join(series_dir, f"app_{_slug(r.label)}_hourly.csv"),
                         hourly[:len(sums)], sums)

    if "orgs" in cfg.reports:
        directory = load_dir(cfg)
        tables = change.org_shift_tables(df, directory, cal, cfg.alpha, cfg.min_daily_change)
        for name in ("inbound", "outbound", "peers"):
            cells = getattr(tables, name)
            write_json(os.path.join(outdir, f"org_{name}.json"), [c.to_dict() for c in cells])
            write_rows(os.path.join(outdir, f"org_{name}.csv"),
                       ("org", "key", "orientation", "direction", "ratio_pct",
                        "before_bytes_per_day", "after_bytes_per_day", "delta_tb_per_day"),
                       ((c.org, c.key, c.orientation, c.result.direction, c.result.percent(),
                         _num(c.result.before_value), _num(c.result.after_value),
                         repr(c.result.delta / change.TB)) for c in cells))
            for c in cells:
                rows = df[df.local_org == c.org]
                if name == "peers":
                    rows = rows[rows.remote_category == c.key]
                else:
                    rows = rows[rows.label == c.key]
                if c.orientation == "inbound":
                    rows = rows[rows.orientation.isin(("inbound", "local-local"))]
                else:
                    rows = rows[rows.orientation == "outbound"]
                epochs, sums = change.daily_totals(grid, change.volume_on_grid(rows, grid), cal)
                fname = f"org_{name}_{_slug(c.org)}_{_slug(c.key)}_{c.orientation}_daily.csv"
                write_series(os.path.join(series_dir, fname), epochs, sums)
    print(f"change reports written to {outdir}")
    return EXIT_OK


def cmd_liveness(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    directory = load_dir(cfg)
    records, counts = change.liveness_analysis(table, directory, cfg.calendar, cfg.alpha)
    outdir = os.path.join(cfg.out, "liveness")
    os.makedirs(outdir, exist_ok=True)
    write_rows(os.path.join(outdir, "liveness.csv"),
               ("prefix", "org_category", "trend", "direction", "ratio_pct"),
               ((format_prefix(r.prefix), r.category, r.trend, *_cell(r.change))
                for r in records))
    write_json(os.path.join(outdir, "liveness.json"), [r.to_dict() for r in records])
    write_json(os.path.join(outdir, "liveness_counts.json"), counts)
    write_rows(os.path.join(outdir, "liveness_counts.csv"),
               ("category", "total", "inc", "inc_pct", "same", "same_pct", "dec", "dec_pct"),
               ((cat, c["total"], c["inc"], f"{c['inc_pct']:.1f}", c["same"],
                 f"{c['same_pct']:.1f}", c["dec"], f"{c['dec_pct']:.1f}")
                for cat, c in counts.items()))
    if records:
        days = np.arange(len(records[0].daily_max))
        epochs = cfg.calendar.epoch_of(cfg.calendar.first_day) + days * DAY
        total = np.sum([r.daily_max for r in records], axis=0)
        write_series(os.path.join(outdir, "live_addresses_daily.csv"), epochs, total)
    print(f"{len(records)} local prefixes categorized")
    return EXIT_OK


def cmd_anomaly(cfg: RunConfig, args) -> int:
    table = load_table(cfg)
    config = anomaly.DetectorConfig(window=cfg.window, k_threshold=cfg.k_threshold,
                                    rules=cfg.rules)
    events = anomaly.detect(table, config)
    outdir = os.path.join(cfg.out, "anomaly")
    os.makedirs(outdir, exist_ok=True)
    store.atomic_write_text(os.path.join(outdir, "events.jsonl"), anomaly.events_jsonl(events))
    rows = anomaly.anomaly_change_table(events, cfg.calendar)
    write_json(os.path.join(outdir, "anomaly_change.json"), rows)

    def na(v):
        return "N/A" if v is None else repr(round(v, 6))
    write_rows(os.path.join(outdir, "anomaly_change.csv"),
               ("kind", "before_per_day", "after_per_day", "per_day_ratio",
                "before_mean_duration_s", "after_mean_duration_s", "duration_ratio",
                "before_mean_zeta", "after_mean_zeta", "zeta_ratio"),
               ((r["kind"], na(r["before"]["per_day"]), na(r["after"]["per_day"]),
                 na(r["per_day_ratio"]), na(r["before"]["mean_duration"]),
                 na(r["after"]["mean_duration"]), na(r["mean_duration_ratio"]),
                 na(r["before"]["mean_zeta"]), na(r["after"]["mean_zeta"]),
                 na(r["mean_zeta_ratio"])) for r in rows))
    n_conf = sum(e.confirmed for e in events)
    print(f"{len(events)} candidate events, {n_conf} confirmed")
    return EXIT_OK


def _parse_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError as exc:
        raise InputError(f"bad date: {text}") from exc


def cmd_daily(cfg: RunConfig, args) -> int:
    df = store.load_store(_store_dir(cfg))
    days = [_parse_date(args.day_before), _parse_date(args.day_after)]
    if len(df):
        lo, hi = int(df.bin_start.min()), int(df.bin_start.max())
        for d in days:
            start = cfg.calendar.epoch_of(d)
            if start + DAY <= lo or start > hi:
                raise InsufficientData(f"{d} lies outside the corpus")
    else:
        raise InsufficientData("empty store")
    profiles = [change.daily_profile(df, d, cfg.calendar) for d in days]
    labels = args.labels or sorted(set(profiles[0]) | set(profiles[1]))
    outdir = os.path.join(cfg.out, "daily")
    os.makedirs(outdir, exist_ok=True)
    written = 0
    for label in labels:
        if label not in profiles[0] and label not in profiles[1]:
            print(f"notice: {label} absent on both days, skipped", file=sys.stderr)
            continue
        for d, prof in zip(days, profiles):
            vec = prof.get(label, np.zeros(24))
            write_rows(os.path.join(outdir, f"{_slug(label)}_{d.isoformat()}.csv"),
                       ("hour", "value"), ((h, _num(v)) for h, v in enumerate(vec)))
        written += 1
    print(f"{written} labels written to {outdir}")
    return EXIT_OK


def cmd_ip(cfg: RunConfig, args) -> int:
    try:
        ip = ip_to_int(args.ip)
    except ValueError as exc:
        raise InputError(f"bad address: {args.ip}") from exc
    table = load_table(cfg)
    if not ((table.src_ip == ip) | (table.dst_ip == ip)).any():
        raise InsufficientData(f"{args.ip} has no flows in the corpus")
    rep = change.ip_change_report(ip, table, cfg.calendar, cfg.alpha)
    outdir = os.path.join(cfg.out, "ip", _slug(args.ip))
    os.makedirs(outdir, exist_ok=True)
    write_json(os.path.join(outdir, "report.json"), rep.to_dict())
    for period, vec in rep.hourly.items():
        write_rows(os.path.join(outdir, f"hourly_{period}.csv"), ("hour", "value"),
                   ((h, _num(v)) for h, v in enumerate(vec)))
    write_series(os.path.join(outdir, "weekly.csv"), [w for w, _ in rep.weekly],
                 [v for _, v in rep.weekly])
    print(f"{args.ip}: {rep.role}; work {_cell(rep.work)}; rest {_cell(rep.rest)}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    if args.scenario:
        spec = synth.load_scenario(args.scenario)
    elif args.preset in synth.PRESETS:
        spec = synth.PRESETS[args.preset]()
    else:
        raise InputError(f"unknown preset {args.preset!r}; choose from "
                         f"{', '.join(sorted(synth.PRESETS))}")
    if args.seed is not None:
        spec.seed = args.seed
    corpus = synth.generate(spec)
    paths = synth.write_scenario(corpus, cfg.out)
    print(f"{len(corpus.table)} flows written; run config at {paths['run']}")
    return EXIT_OK


COMMANDS = {
    "classify": cmd_classify, "mg-train": cmd_mg_train, "change": cmd_change,
    "liveness": cmd_liveness, "anomaly": cmd_anomaly, "daily": cmd_daily, "ip": cmd_ip,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="run configuration YAML")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--seed", type=int, default=d, help="random seed")
    p.add_argument("--alpha", type=float, default=d, help="WMW significance level")
    p.add_argument("--strict", action="store_true", default=d,
                   help="abort on the first malformed flow line")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowshift",
                                     description="Sampled-flow traffic change analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("classify", parents=[common],
                   help="label flows and write the per-bin volume store")
    sub.add_parser("mg-train", parents=[common],
                   help="train the meeting/gaming classifier and list known server prefixes")
    sub.add_parser("change", parents=[common], help="per-label and per-org change tables")
    sub.add_parser("liveness", parents=[common], help="live-address trend of local /24s")
    sub.add_parser("anomaly", parents=[common], help="detect and compare volume anomalies")
    p = sub.add_parser("daily", parents=[common], help="hourly profiles of two days")
    p.add_argument("day_before")
    p.add_argument("day_after")
    p.add_argument("--labels", nargs="*")
    p = sub.add_parser("ip", parents=[common], help="per-address change report")
    p.add_argument("ip")
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default="demo", help=f"one of {', '.join(sorted(synth.PRESETS))}")
    g.add_argument("--scenario", help="scenario YAML")
    return parser


def make_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out is not None:
        cfg.out = args.out
    elif not args.config and args.command == "synth":
        cfg.out = "synth-out"
    if args.seed is not None:
        cfg.seed = args.seed
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.strict:
        cfg.strict = True
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = make_config(args)
        if args.command != "synth":
            cfg.validate(args.command)
        os.makedirs(cfg.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InsufficientData as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FlowshiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
