"""Before/after change analysis on binned volume series."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from . import InsufficientData
from .classify import APP_LABELS, CANDIDATE, ICMP, OTPROT, SYN
from .flows import (
    AFTER, BEFORE, DAY, FIVE_MIN, HOUR, REST, WORK, StudyCalendar, day_number, int_to_ip,
    local_day_number, period_codes, work_mask,
)
from .orgs import CATEGORIES, DEFAULT_SVC_PORTS, PrefixDirectory, classify_ip_role, format_prefix
from .stats import NONE, wmw_test
from .store import CANDIDATE_LABELS
from .table import PREFIX_MASK, FlowTable

ALL = "all"
FIVE_MIN_G, DAILY_G = "5min", "daily"
MEDIAN, MEAN = "median", "mean"
INC, SAME, DEC = "inc", "same", "dec"
TB = 10 ** 12
_PERIOD_CODE = {BEFORE: 0, AFTER: 2}


@dataclass
class Series:
    key: tuple
    granularity: str
    times: np.ndarray  # bin start (5min) or local-midnight epoch (daily)
    values: np.ndarray
    hours_filter: str = ALL

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.times) != len(self.values):
            raise ValueError("series times and values differ in length")
        if len(self.times) > 1 and not (np.diff(self.times) > 0).all():
            raise ValueError("series points must be strictly increasing in time")


@dataclass(frozen=True)
class ChangeResult:
    direction: str
    p_less: float
    p_greater: float
    ratio: float
    ratio_basis: str
    n_before: int
    n_after: int
    before_value: float = 0.0
    after_value: float = 0.0

    @property
    def tag(self) -> str:
        """``new`` when the before value is zero and the after value is not."""
        if self.before_value == 0 and self.after_value > 0:
            return "new"
        return ""

    @property
    def delta(self) -> float:
        return self.after_value - self.before_value

    def percent(self) -> str:
        if self.tag:
            return self.tag
        if math.isnan(self.ratio):
            return ""
        return f"{100 * self.ratio:.1f}"

    def to_dict(self) -> dict:
        return {
            "direction": self.direction, "p_less": self.p_less, "p_greater": self.p_greater,
            "ratio_pct": self.percent(), "ratio": None if math.isnan(self.ratio) else self.ratio,
            "ratio_basis": self.ratio_basis, "n_before": self.n_before, "n_after": self.n_after,
            "before_value": self.before_value, "after_value": self.after_value,
        }


def _ratio(before: float, after: float) -> float:
    if before == 0:
        return float("nan") if after == 0 else float("inf")
    return after / before


def quantify(series: Series, cal: StudyCalendar, alpha: float = 0.5,
             method: str = "auto") -> ChangeResult:
    """WMW direction plus the after/before ratio of one series.

    Transition-period points are dropped.  5-minute series compare medians,
    daily series compare means.
    """
    if series.granularity == FIVE_MIN_G:
        codes = period_codes(series.times, cal)
        basis, agg = MEDIAN, np.median
    elif series.granularity == DAILY_G:
        # daily points are stamped at local midnight; shift by one hour to stay clear of it
        codes = period_codes(series.times + HOUR, cal)
        basis, agg = MEAN, np.mean
    else:
        raise ValueError(f"unknown granularity {series.granularity!r}")
    keep = np.ones(len(series.times), dtype=bool)
    if series.hours_filter != ALL and series.granularity == FIVE_MIN_G:
        work = work_mask(series.times, cal)
        keep = work if series.hours_filter == WORK else ~work
    before = series.values[keep & (codes == _PERIOD_CODE[BEFORE])]
    after = series.values[keep & (codes == _PERIOD_CODE[AFTER])]
    if not len(before) or not len(after):
        raise InsufficientData("insufficient data")
    res = wmw_test(before, after, alpha, method)
    b, a = float(agg(before)), float(agg(after))
    return ChangeResult(res.direction, res.p_less, res.p_greater, _ratio(b, a), basis,
                        len(before), len(after), b, a)


# ---------------------------------------------------------------------------
# Series construction from the labeled-volume store
# ---------------------------------------------------------------------------

def bin_grid(store: pd.DataFrame, width: int = FIVE_MIN) -> np.ndarray:
    if not len(store):
        return np.empty(0, dtype=np.int64)
    lo, hi = int(store.bin_start.min()), int(store.bin_start.max())
    return np.arange(lo - lo % width, hi + 1, width, dtype=np.int64)


def volume_on_grid(rows: pd.DataFrame, grid: np.ndarray, column: str = "bytes") -> np.ndarray:
    """Sum ``column`` of ``rows`` into the bins of ``grid`` (zero where absent)."""
    out = np.zeros(len(grid), dtype=float)
    if not len(rows) or not len(grid):
        return out
    width = int(grid[1] - grid[0]) if len(grid) > 1 else FIVE_MIN
    idx = (rows.bin_start.to_numpy(dtype=np.int64) - grid[0]) // width
    ok = (idx >= 0) & (idx < len(grid))
    np.add.at(out, idx[ok], rows[column].to_numpy(dtype=float)[ok])
    return out


def daily_totals(times: np.ndarray, values: np.ndarray, cal: StudyCalendar,
                 hours: str = ALL) -> tuple[np.ndarray, np.ndarray]:
    """Per local day sums of a binned series.

    ``work`` sums the work-hours bins of workdays only; ``rest`` sums the
    remaining bins of every day.  Returns (local-midnight epochs, sums).
    """
    times = np.asarray(times, dtype=float)
    days = local_day_number(times, cal)
    if not len(days):
        return np.empty(0), np.empty(0)
    keep = np.ones(len(times), dtype=bool)
    if hours != ALL:
        work = work_mask(times, cal)
        keep = work if hours == WORK else ~work
    all_days = np.arange(days.min(), days.max() + 1)
    if hours == WORK:
        all_days = all_days[np.isin((all_days + 3) % 7, cal.workdays)]
    sums = np.zeros(len(all_days))
    pos = np.searchsorted(all_days, days[keep])
    valid = (pos < len(all_days))
    valid[valid] &= all_days[pos[valid]] == days[keep][valid]
    np.add.at(sums, pos[valid], np.asarray(values, dtype=float)[keep][valid])
    epochs = all_days * DAY - cal.timezone_offset * HOUR
    return epochs, sums


def label_rows(store: pd.DataFrame, label: str) -> pd.DataFrame:
    if label == CANDIDATE:
        return store[store.label.isin(CANDIDATE_LABELS)]
    return store[store.label == label]


def label_series(store: pd.DataFrame, label: str, hours: str, grid: np.ndarray | None = None,
                 column: str = "bytes") -> Series:
    grid = bin_grid(store) if grid is None else grid
    return Series(("label", label), FIVE_MIN_G, grid,
                  volume_on_grid(label_rows(store, label), grid, column), hours)


def relevance(store: pd.DataFrame, label: str, grid: np.ndarray, total: np.ndarray,
              share: float = 0.01, time_fraction: float = 1 / 7) -> bool:
    """True when the label carries ``share`` of total volume in at least
    ``time_fraction`` of the bins."""
    vol = volume_on_grid(label_rows(store, label), grid)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(total > 0, vol / total, 0.0)
    return bool(len(grid)) and bool((frac >= share).mean() >= time_fraction)


@dataclass
class AppChangeRow:
    label: str
    present: bool
    relevant: bool = False
    work: ChangeResult | None = None
    rest: ChangeResult | None = None

    def to_dict(self) -> dict:
        return {"label": self.label, "present": self.present, "relevant": self.relevant,
                "work": self.work.to_dict() if self.work else None,
                "rest": self.rest.to_dict() if self.rest else None}


TABLE_LABELS = APP_LABELS + (ICMP, OTPROT, SYN, CANDIDATE)


def app_change_table(store: pd.DataFrame, cal: StudyCalendar, alpha: float = 0.5,
                     labels: Sequence[str] = TABLE_LABELS, method: str = "auto"
                     ) -> list[AppChangeRow]:
    grid = bin_grid(store)
    total = volume_on_grid(store, grid)
    present = set(store.label.unique())
    if present & set(CANDIDATE_LABELS):
        present.add(CANDIDATE)
    rows = []
    for label in labels:
        if label not in present:
            rows.append(AppChangeRow(label, False))
            continue
        row = AppChangeRow(label, True, relevance(store, label, grid, total))
        values = volume_on_grid(label_rows(store, label), grid)
        for hours in (WORK, REST):
            try:
                res = quantify(Series(("label", label), FIVE_MIN_G, grid, values, hours), cal,
                               alpha, method)
            except InsufficientData:
                res = None
            setattr(row, hours, res)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Per-organization shift tables
# ---------------------------------------------------------------------------

@dataclass
class ShiftCell:
    org: str
    key: str  # label for tables (a)/(b), remote category for (c)
    orientation: str
    result: ChangeResult

    def to_dict(self) -> dict:
        d = {"org": self.org, "key": self.key, "orientation": self.orientation,
             "delta_tb_per_day": self.result.delta / TB}
        d.update(self.result.to_dict())
        return d


@dataclass
class OrgShiftTables:
    inbound: list[ShiftCell] = field(default_factory=list)
    outbound: list[ShiftCell] = field(default_factory=list)
    peers: list[ShiftCell] = field(default_factory=list)


def _daily_result(rows: pd.DataFrame, grid: np.ndarray, cal: StudyCalendar, alpha: float,
                  method: str) -> ChangeResult | None:
    epochs, sums = daily_totals(grid, volume_on_grid(rows, grid), cal)
    try:
        return quantify(Series(("daily",), DAILY_G, epochs, sums), cal, alpha, method)
    except InsufficientData:
        return None


def org_shift_tables(store: pd.DataFrame, directory: PrefixDirectory, cal: StudyCalendar,
                     alpha: float = 0.5, min_daily_change: float = TB,
                     method: str = "auto") -> OrgShiftTables:
    """Daily inbound/outbound change per local org and label, and per local
    org and remote category.

    A cell is kept only when the test finds a direction and the mean daily
    volume moved by at least ``min_daily_change`` bytes.  Local-local rows
    count as inbound traffic of the serving org.
    """
    out = OrgShiftTables()
    grid = bin_grid(store)
    local_ids = sorted(o.id for o in directory.orgs.values() if o.local)
    flows_in = store[store.orientation.isin(("inbound", "local-local"))]
    flows_out = store[store.orientation == "outbound"]

    def keep(res):
        return res is not None and res.direction != NONE and abs(res.delta) >= min_daily_change

    for org in local_ids:
        for name, rows, target in (("inbound", flows_in, out.inbound),
                                   ("outbound", flows_out, out.outbound)):
            org_rows = rows[rows.local_org == org]
            for label in sorted(org_rows.label.unique()):
                res = _daily_result(org_rows[org_rows.label == label], grid, cal, alpha, method)
                if keep(res):
                    target.append(ShiftCell(org, label, name, res))
            for cat in sorted(org_rows.remote_category.unique()):
                res = _daily_result(org_rows[org_rows.remote_category == cat], grid, cal,
                                    alpha, method)
                if keep(res):
                    out.peers.append(ShiftCell(org, cat, name, res))
    return out


# ---------------------------------------------------------------------------
# Prefix liveness
# ---------------------------------------------------------------------------

@dataclass
class LivenessRecord:
    prefix: int
    category: str  # organization category
    daily_max: np.ndarray
    change: ChangeResult | None
    trend: str  # inc|same|dec

    def to_dict(self) -> dict:
        return {"prefix": format_prefix(self.prefix), "org_category": self.category,
                "trend": self.trend,
                "change": self.change.to_dict() if self.change else None}


def daily_live_counts(table: FlowTable, local_prefixes: Iterable[int], cal: StudyCalendar,
                      days: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct local addresses seen per prefix per local day.

    Returns (prefixes, day numbers, counts[prefix, day]).
    """
    prefixes = np.array(sorted(set(int(p) for p in local_prefixes)), dtype=np.int64)
    day = local_day_number(table.ts_start, cal)
    if days is None:
        days = np.arange(day.min(), day.max() + 1) if len(day) else np.empty(0, dtype=np.int64)
    counts = np.zeros((len(prefixes), len(days)), dtype=np.int64)
    if not len(table) or not len(prefixes):
        return prefixes, days, counts
    addrs, addr_days = [], []
    for ip in (table.src_ip, table.dst_ip):
        hit = np.isin(ip & PREFIX_MASK, prefixes)
        addrs.append(ip[hit])
        addr_days.append(day[hit])
    ip = np.concatenate(addrs)
    dy = np.concatenate(addr_days)
    pairs = np.unique(np.stack([dy, ip]), axis=1)
    p_idx = np.searchsorted(prefixes, pairs[1] & PREFIX_MASK)
    d_idx = np.searchsorted(days, pairs[0])
    ok = (d_idx < len(days))
    ok[ok] &= days[d_idx[ok]] == pairs[0][ok]
    np.add.at(counts, (p_idx[ok], d_idx[ok]), 1)
    return prefixes, days, counts


def liveness_analysis(table: FlowTable, directory: PrefixDirectory, cal: StudyCalendar,
                      alpha: float = 0.5, method: str = "auto"
                      ) -> tuple[list[LivenessRecord], dict[str, dict[str, float]]]:
    """WMW on before/after daily live-address counts of every local /24.

    Returns the per-prefix records and a table keyed by org category with
    inc/same/dec counts and percentages.
    """
    days = np.arange(day_number(cal.first_day), day_number(cal.last_day) + 1)
    prefixes, days, counts = daily_live_counts(table, directory.local_prefixes, cal, days)
    epochs = days * DAY - cal.timezone_offset * HOUR
    records = []
    for i, p in enumerate(prefixes.tolist()):
        series = Series(("prefix-liveness", p), DAILY_G, epochs, counts[i])
        try:
            res = quantify(series, cal, alpha, method)
            trend = {"up": INC, "down": DEC}.get(res.direction, SAME)
        except InsufficientData:
            res, trend = None, SAME
        records.append(LivenessRecord(p, directory.lookup(p).category, counts[i], res, trend))
    return records, liveness_counts(records)


def liveness_counts(records: Sequence[LivenessRecord]) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, float]] = {}
    for cat in list(CATEGORIES) + ["all"]:
        rows = [r for r in records if cat == "all" or r.category == cat]
        if not rows:
            continue
        n = len(rows)
        entry: dict[str, float] = {"total": n}
        for t in (INC, SAME, DEC):
            k = sum(r.trend == t for r in rows)
            entry[t] = k
            entry[f"{t}_pct"] = 100.0 * k / n
        table[cat] = entry
    return table


# ---------------------------------------------------------------------------
# Individual addresses
# ---------------------------------------------------------------------------

@dataclass
class IpReport:
    ip: int
    role: str
    work: ChangeResult | None
    rest: ChangeResult | None
    hourly: dict[str, np.ndarray]  # period -> mean bytes per local hour of day
    weekly: list[tuple[float, float]]  # (week start epoch, bytes)

    def to_dict(self) -> dict:
        return {
            "ip": int_to_ip(self.ip), "role": self.role,
            "work": self.work.to_dict() if self.work else None,
            "rest": self.rest.to_dict() if self.rest else None,
        }


def ip_change_report(ip: int, table: FlowTable, cal: StudyCalendar, alpha: float = 0.5,
                     svc_ports: frozenset[int] = DEFAULT_SVC_PORTS,
                     method: str = "auto") -> IpReport:
    role = classify_ip_role(ip, table, svc_ports=svc_ports)
    touch = (table.src_ip == ip) | (table.dst_ip == ip)
    ts = table.ts_start[touch]
    vol = table.bytes[touch].astype(float)
    bins = (np.floor(ts / FIVE_MIN) * FIVE_MIN)
    grid = np.arange(cal.epoch_of(cal.first_day), cal.epoch_of(cal.last_day) + DAY, FIVE_MIN)
    idx = np.searchsorted(grid, bins)
    ok = (idx < len(grid))
    ok[ok] &= grid[idx[ok]] == bins[ok]
    binned = np.zeros(len(grid))
    np.add.at(binned, idx[ok], vol[ok])

    results = {}
    for hours in (WORK, REST):
        epochs, sums = daily_totals(grid, binned, cal, hours)
        try:
            results[hours] = quantify(Series(("ip", ip), DAILY_G, epochs, sums), cal, alpha,
                                      method)
        except InsufficientData:
            results[hours] = None

    codes = period_codes(grid, cal)
    local_hour = (((grid + cal.timezone_offset * HOUR) % DAY) // HOUR).astype(int)
    hourly = {}
    for name, code in (("before", 0), ("after", 2)):
        sel = codes == code
        n_days = max(1, int(sel.sum()) * FIVE_MIN // DAY)
        hourly[name] = np.bincount(local_hour[sel], weights=binned[sel], minlength=24) / n_days
    week = (local_day_number(grid, cal) - day_number(cal.first_day)) // 7
    weekly = [(float(cal.epoch_of(cal.first_day) + w * 7 * DAY), float(binned[week == w].sum()))
              for w in np.unique(week)]
    return IpReport(ip, role, results[WORK], results[REST], hourly, weekly)


# ---------------------------------------------------------------------------
# Single-day profiles
# ---------------------------------------------------------------------------

def daily_profile(store: pd.DataFrame, day, cal: StudyCalendar,
                  labels: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """24 hourly volumes per label for one local day (labels absent that day
    are left out)."""
    start = cal.epoch_of(day)
    sel = store[(store.bin_start >= start) & (store.bin_start < start + DAY)]
    out = {}
    for label in labels or sorted(sel.label.unique()):
        rows = sel[sel.label == label]
        if not len(rows):
            continue
        hour = ((rows.bin_start.to_numpy() - start) // HOUR).astype(int)
        out[label] = np.bincount(hour, weights=rows.bytes.to_numpy(dtype=float), minlength=24)
    return out

