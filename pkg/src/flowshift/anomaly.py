"""Volumetric anomaly detection with two detectors and a corroboration rule.

The equilibrium detector looks for bin pairs where per-key volume changes
fail to cancel out; the threshold detector looks for destination /24s above
fixed per-kind ceilings.  Every event gets a peak intensity index
``zeta = v_peak / v_exp``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .flows import (
    AFTER, BEFORE, DAY, FIVE_MIN, PROTO_ICMP, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_SYN,
    StudyCalendar, format_timestamp, period_codes,
)
from .table import PREFIX_MASK, FlowTable

log = logging.getLogger(__name__)

DNS_AMP, NTP_AMP, ICMP_FLOOD, SYN_FLOOD, OTHER = (
    "dns_amp", "ntp_amp", "icmp_flood", "syn_flood", "other_bandwidth")
KINDS = (DNS_AMP, NTP_AMP, ICMP_FLOOD, SYN_FLOOD, OTHER)
OVERALL, NTP, DNS, ICMP, SYN_SYNACK = "overall", "ntp", "dns", "icmp", "syn_synack"
STREAMS = (OVERALL, NTP, DNS, ICMP, SYN_SYNACK)
STREAM_OF_KIND = {DNS_AMP: DNS, NTP_AMP: NTP, ICMP_FLOOD: ICMP, SYN_FLOOD: SYN_SYNACK,
                  OTHER: OVERALL}
KIND_OF_STREAM = {v: k for k, v in STREAM_OF_KIND.items()}
EQUILIBRIUM, THRESHOLD = "equilibrium", "threshold"
PACKETS, BYTES = "packets", "bytes"
K_THRESHOLD = 3.29
SHORT_EVENT = 30 * 60


def stream_mask(table: FlowTable, name: str) -> np.ndarray:
    if name == OVERALL:
        return np.ones(len(table), dtype=bool)
    if name == NTP:
        return (table.proto == PROTO_UDP) & (table.src_port == 123)
    if name == DNS:
        return (table.proto == PROTO_UDP) & (table.src_port == 53)
    if name == ICMP:
        return table.proto == PROTO_ICMP
    if name == SYN_SYNACK:
        return (table.proto == PROTO_TCP) & ((table.tcp_flags == TCP_SYN)
                                             | (table.tcp_flags == TCP_SYN | TCP_ACK))
    raise ValueError(f"unknown stream {name!r}")


def stream_unit(name: str) -> str:
    return PACKETS if name in (ICMP, SYN_SYNACK) else BYTES


@dataclass
class MonitorStream:
    """One monitored traffic subset on a fixed bin grid.

    ``volume[i]`` is the total of ``unit`` in bin ``first_bin + i``; the
    sparse per-key volumes feed the equilibrium detector.
    """

    name: str
    unit: str
    width: int
    first_bin: int
    volume: np.ndarray
    key_code: np.ndarray  # sorted key * n_bins + bin offset
    key_volume: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.volume)

    def bin_start(self, i) -> np.ndarray:
        return (self.first_bin + np.asarray(i)) * self.width

    def rate(self) -> np.ndarray:
        """Per-second volume of every bin."""
        return self.volume / self.width


def _grid(table: FlowTable, width: int) -> tuple[int, int]:
    if not len(table):
        return 0, 0
    b = np.floor(table.ts_start / width).astype(np.int64)
    return int(b.min()), int(b.max() - b.min() + 1)


def flow_keys(table: FlowTable) -> np.ndarray:
    """Dense ids for (src /24, dst /24, dst_port, proto)."""
    if not len(table):
        return np.empty(0, dtype=np.int64)
    hi = ((table.src_ip & PREFIX_MASK) << 16) | ((table.dst_ip & PREFIX_MASK) >> 8)
    lo = (table.dst_port << 8) | table.proto
    _, inv = np.unique(np.stack([hi, lo], axis=1), axis=0, return_inverse=True)
    return inv.reshape(-1).astype(np.int64)


def build_stream(table: FlowTable, name: str, width: int = FIVE_MIN,
                 grid: tuple[int, int] | None = None, keys: np.ndarray | None = None
                 ) -> MonitorStream:
    first, n = grid if grid is not None else _grid(table, width)
    mask = stream_mask(table, name)
    unit = stream_unit(name)
    vals = (table.packets if unit == PACKETS else table.bytes)[mask].astype(float)
    b = np.floor(table.ts_start[mask] / width).astype(np.int64) - first
    ok = (b >= 0) & (b < n)
    volume = np.zeros(n)
    np.add.at(volume, b[ok], vals[ok])
    k = (flow_keys(table) if keys is None else keys)[mask][ok]
    code = k * max(n, 1) + b[ok]
    ucode, inv = np.unique(code, return_inverse=True)
    kvol = np.zeros(len(ucode))
    np.add.at(kvol, inv.reshape(-1), vals[ok])
    return MonitorStream(name, unit, width, first, volume, ucode, kvol)


def build_streams(table: FlowTable, width: int = FIVE_MIN) -> dict[str, MonitorStream]:
    grid = _grid(table, width)
    keys = flow_keys(table)
    return {name: build_stream(table, name, width, grid, keys) for name in STREAMS}


# ---------------------------------------------------------------------------
# Equilibrium detector
# ---------------------------------------------------------------------------

def k_statistic(deltas: Sequence[float]) -> float:
    """mean * sqrt(F) / sd (sample sd) of the per-key deltas of one bin pair."""
    d = np.asarray(deltas, dtype=float)
    F = len(d)
    if F == 0:
        return 0.0
    mean = d.mean()
    sd = d.std(ddof=1) if F > 1 else 0.0
    if sd == 0:
        return 0.0 if mean == 0 else math.copysign(math.inf, mean)
    return mean * math.sqrt(F) / sd


def _aggregate(stream: MonitorStream, window: int) -> MonitorStream:
    if window == 1:
        return stream
    n = -(-stream.n_bins // window)
    volume = np.zeros(n)
    np.add.at(volume, np.arange(stream.n_bins) // window, stream.volume)
    key, b = np.divmod(stream.key_code, max(stream.n_bins, 1))
    code = key * n + b // window
    ucode, inv = np.unique(code, return_inverse=True)
    kvol = np.zeros(len(ucode))
    np.add.at(kvol, inv, stream.key_volume)
    return MonitorStream(stream.name, stream.unit, stream.width * window,
                         stream.first_bin // window, volume, ucode, kvol)


def k_series(stream: MonitorStream) -> np.ndarray:
    """K for every consecutive bin pair; entry ``t`` compares bins t-1 and t
    (entry 0 is zero)."""
    n = stream.n_bins
    out = np.zeros(n)
    if n < 2 or not len(stream.key_code):
        return out
    key, b = np.divmod(stream.key_code, n)
    v = stream.key_volume
    # entries with a predecessor (same key, previous bin) sit right before them
    has_prev = np.zeros(len(b), dtype=bool)
    has_prev[1:] = stream.key_code[1:] == stream.key_code[:-1] + 1
    has_prev &= b > 0
    prev_v = np.zeros(len(b))
    prev_v[1:] = v[:-1]
    prev_v[~has_prev] = 0.0
    cnt = np.bincount(b, minlength=n).astype(float)
    sq = np.bincount(b, weights=v * v, minlength=n)
    tot = np.bincount(b, weights=v, minlength=n)
    both = np.bincount(b[has_prev], minlength=n).astype(float)
    cross = np.bincount(b[has_prev], weights=v[has_prev] * prev_v[has_prev], minlength=n)
    F = cnt[1:] + cnt[:-1] - both[1:]
    s1 = tot[1:] - tot[:-1]
    s2 = sq[1:] + sq[:-1] - 2 * cross[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s1 / F
        var = (s2 - F * mean * mean) / (F - 1)
        var = np.where(var < 1e-12 * np.maximum(s2, 1e-300), 0.0, var)
        k = mean * np.sqrt(F) / np.sqrt(var)
    k = np.where(F <= 0, 0.0, k)
    zero_sd = (F > 0) & ((F == 1) | (var == 0))
    k = np.where(zero_sd, np.where(mean > 0, np.inf, np.where(mean < 0, -np.inf, 0.0)), k)
    out[1:] = np.nan_to_num(k, nan=0.0, posinf=np.inf, neginf=-np.inf)
    return out


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    stream: str
    detector: str

    def overlaps(self, other: "Interval") -> bool:
        return self.start < other.end and other.start < self.end


def equilibrium_detect(stream: MonitorStream, window: int = 1, k_threshold: float = K_THRESHOLD,
                       max_duration: float = DAY) -> list[Interval]:
    """Intervals opened by a significant positive K and closed by the next
    significant negative K.

    An interval that is still open after ``max_duration``, or when the next
    positive K arrives, is reported as its onset bin only (the level shift
    did not come back down).
    """
    s = _aggregate(stream, window)
    if s.n_bins < 2:
        return []
    k = k_series(s)
    flags = np.flatnonzero(np.abs(k) > k_threshold)
    out = []
    open_at = None
    for t in flags.tolist():
        start = float(s.bin_start(t))
        if open_at is not None and start - open_at > max_duration:
            out.append(Interval(open_at, open_at + s.width, s.name, EQUILIBRIUM))
            open_at = None
        if k[t] > 0:
            # a fresh onset replaces an interval that never came back down
            if open_at is not None:
                out.append(Interval(open_at, open_at + s.width, s.name, EQUILIBRIUM))
            open_at = start
        elif open_at is not None:
            out.append(Interval(open_at, start, s.name, EQUILIBRIUM))
            open_at = None
    if open_at is not None:
        out.append(Interval(open_at, open_at + s.width, s.name, EQUILIBRIUM))
    return out


# ---------------------------------------------------------------------------
# Threshold detector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThresholdRules:
    """Per destination /24 and bin ceilings."""

    syn_pps: float = 50_000.0
    icmp_pps: float = 20_000.0
    ntp_bps: float = 100e6
    dns_bps: float = 100e6

    def ceilings(self) -> dict[str, tuple[str, float]]:
        """kind -> (unit, per-second ceiling in that unit)."""
        return {SYN_FLOOD: (PACKETS, self.syn_pps), ICMP_FLOOD: (PACKETS, self.icmp_pps),
                NTP_AMP: (BYTES, self.ntp_bps / 8), DNS_AMP: (BYTES, self.dns_bps / 8)}


def threshold_mask(table: FlowTable, kind: str) -> np.ndarray:
    if kind == SYN_FLOOD:
        return (table.proto == PROTO_TCP) & (table.tcp_flags == TCP_SYN)
    if kind == ICMP_FLOOD:
        return table.proto == PROTO_ICMP
    if kind == NTP_AMP:
        return stream_mask(table, NTP)
    if kind == DNS_AMP:
        return stream_mask(table, DNS)
    raise ValueError(f"no threshold rule for {kind!r}")


def _bridge(bins: np.ndarray, gap: int = 1) -> list[tuple[int, int]]:
    """Runs of flagged bins, joining runs separated by at most ``gap`` bins."""
    runs = []
    for b in bins.tolist():
        if runs and b - runs[-1][1] <= gap + 1:
            runs[-1][1] = b
        else:
            runs.append([b, b])
    return [(lo, hi) for lo, hi in runs]


def threshold_detect(table: FlowTable, rules: ThresholdRules | None = None,
                     width: int = FIVE_MIN, hysteresis: int = 1) -> list[Interval]:
    rules = rules or ThresholdRules()
    out = []
    for kind, (unit, ceiling) in rules.ceilings().items():
        if ceiling <= 0:
            log.warning("threshold for %s is %s: every bin will be flagged", kind, ceiling)
        m = threshold_mask(table, kind)
        if not m.any():
            continue
        vals = (table.packets if unit == PACKETS else table.bytes)[m].astype(float)
        b = np.floor(table.ts_start[m] / width).astype(np.int64)
        dst = table.dst_ip[m] & PREFIX_MASK
        codes, inv = np.unique(np.stack([b, dst], axis=1), axis=0, return_inverse=True)
        per = np.zeros(len(codes))
        np.add.at(per, inv.reshape(-1), vals)
        hot = np.unique(codes[per / width > ceiling, 0])
        for lo, hi in _bridge(hot, hysteresis):
            out.append(Interval(float(lo * width), float((hi + 1) * width),
                                STREAM_OF_KIND[kind], THRESHOLD))
    return out


# ---------------------------------------------------------------------------
# Expected volume, zeta and corroboration
# ---------------------------------------------------------------------------

def expected_volume(stream: MonitorStream, start: float, end: float, peak_bin: int,
                    excluded: np.ndarray | None = None, short: float = SHORT_EVENT,
                    days: int = 3) -> float | None:
    """Expected per-second volume for an event (``None`` when unavailable).

    Short events use the bin right before the event; longer ones average the
    peak's time-of-day bin over the ``days`` days on either side, skipping
    bins flagged in ``excluded``.
    """
    rate = stream.rate()
    if end - start <= short:
        i = int(start // stream.width) - stream.first_bin - 1
        if 0 <= i < stream.n_bins:
            return float(rate[i])
        return None
    per_day = DAY // stream.width
    picks = []
    for off in range(-days, days + 1):
        i = peak_bin + off * per_day
        if 0 <= i < stream.n_bins and (excluded is None or not excluded[i]):
            picks.append(rate[i])
    if not picks:
        return None
    return float(np.mean(picks))


@dataclass
class AnomalyEvent:
    kind: str
    start: float
    end: float
    detectors: tuple[str, ...]
    v_peak: float
    v_exp: float | None
    zeta: float | None
    confirmed: bool
    unit: str = BYTES

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": format_timestamp(self.start),
                "end": format_timestamp(self.end), "detectors": list(self.detectors),
                "v_peak": self.v_peak, "v_exp": self.v_exp, "zeta": self.zeta,
                "confirmed": self.confirmed, "unit": self.unit}


def is_confirmed(detectors: Iterable[str], zeta: float | None) -> bool:
    d = set(detectors)
    if EQUILIBRIUM in d and THRESHOLD in d:
        return True
    return bool(d) and zeta is not None and zeta >= 2


def _union(intervals: list[Interval]) -> list[tuple[float, float, set[str]]]:
    groups: list[tuple[float, float, set[str]]] = []
    for iv in sorted(intervals, key=lambda x: (x.start, x.end)):
        if groups and iv.start < groups[-1][1]:
            lo, hi, dets = groups[-1]
            groups[-1] = (lo, max(hi, iv.end), dets | {iv.detector})
        else:
            groups.append((iv.start, iv.end, {iv.detector}))
    return groups


def corroborate(eq: Sequence[Interval], th: Sequence[Interval],
                streams: dict[str, MonitorStream]) -> list[AnomalyEvent]:
    """Merge candidate intervals into events, score them and apply the
    confirmation rule.

    Overall-stream equilibrium intervals that overlap a kind-specific event
    add their detector to it; the rest become other_bandwidth events.
    """
    specific = [iv for iv in list(eq) + list(th) if iv.stream != OVERALL]
    overall = [iv for iv in eq if iv.stream == OVERALL]
    candidates = []
    for name in STREAMS:
        if name == OVERALL:
            continue
        for lo, hi, dets in _union([iv for iv in specific if iv.stream == name]):
            candidates.append([KIND_OF_STREAM[name], lo, hi, dets])
    for iv in overall:
        hits = [c for c in candidates if c[1] < iv.end and iv.start < c[2]]
        for c in hits:
            c[3] = c[3] | {EQUILIBRIUM}
        if not hits:
            candidates.append([OTHER, iv.start, iv.end, {EQUILIBRIUM}])

    excluded = {}
    for name, s in streams.items():
        mask = np.zeros(s.n_bins, dtype=bool)
        for iv in list(eq) + list(th):
            lo = int(iv.start // s.width) - s.first_bin
            hi = int(-(-iv.end // s.width)) - s.first_bin
            mask[max(lo, 0):max(min(hi, s.n_bins), 0)] = True
        excluded[name] = mask

    events = []
    for kind, lo, hi, dets in sorted(candidates, key=lambda c: (c[1], c[0])):
        s = streams[STREAM_OF_KIND[kind]]
        i0 = max(int(lo // s.width) - s.first_bin, 0)
        i1 = min(int(-(-hi // s.width)) - s.first_bin, s.n_bins)
        if i1 <= i0:
            continue
        rate = s.rate()
        peak = i0 + int(np.argmax(rate[i0:i1]))
        v_peak = float(rate[peak])
        v_exp = expected_volume(s, lo, hi, peak, excluded[s.name])
        zeta = v_peak / v_exp if v_exp else None
        if v_exp is None:
            log.warning("expected volume unavailable for %s event at %s", kind,
                        format_timestamp(lo))
        detectors = tuple(sorted(dets))
        events.append(AnomalyEvent(kind, lo, hi, detectors, v_peak, v_exp, zeta,
                                   is_confirmed(detectors, zeta), s.unit))
    return events


@dataclass
class DetectorConfig:
    width: int = FIVE_MIN
    window: int = 1
    k_threshold: float = K_THRESHOLD
    max_duration: float = DAY
    rules: ThresholdRules = field(default_factory=ThresholdRules)


def detect(table: FlowTable, config: DetectorConfig | None = None) -> list[AnomalyEvent]:
    config = config or DetectorConfig()
    if not len(table):
        return []
    streams = build_streams(table, config.width)
    eq = []
    for name in STREAMS:
        eq.extend(equilibrium_detect(streams[name], config.window, config.k_threshold,
                                     config.max_duration))
    th = threshold_detect(table, config.rules, config.width)
    return corroborate(eq, th, streams)


def events_jsonl(events: Sequence[AnomalyEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in events)


# ---------------------------------------------------------------------------
# Period comparison
# ---------------------------------------------------------------------------

def anomaly_change_table(events: Sequence[AnomalyEvent], cal: StudyCalendar,
                         confirmed_only: bool = True) -> list[dict]:
    """Per kind: events per day, mean duration and mean zeta before and
    after, with after/before ratios (``None`` when the before side is empty)."""
    chosen = [e for e in events if e.confirmed or not confirmed_only]
    if not chosen:
        return []
    n_days = {BEFORE: (cal.before[1] - cal.before[0]).days + 1,
              AFTER: (cal.after[1] - cal.after[0]).days + 1}
    codes = period_codes(np.array([e.start for e in chosen]), cal)
    rows = []
    for kind in KINDS:
        stats = {}
        for period, code in ((BEFORE, 0), (AFTER, 2)):
            evs = [e for e, c in zip(chosen, codes) if e.kind == kind and c == code]
            zetas = [e.zeta for e in evs if e.zeta is not None]
            stats[period] = {
                "count": len(evs),
                "per_day": len(evs) / n_days[period],
                "mean_duration": float(np.mean([e.duration for e in evs])) if evs else None,
                "mean_zeta": float(np.mean(zetas)) if zetas else None,
            }
        if not stats[BEFORE]["count"] and not stats[AFTER]["count"]:
            continue
        row = {"kind": kind, "before": stats[BEFORE], "after": stats[AFTER]}
        for name in ("per_day", "mean_duration", "mean_zeta"):
            b, a = stats[BEFORE][name], stats[AFTER][name]
            row[f"{name}_ratio"] = (a / b) if (b and a is not None and stats[BEFORE]["count"]) else None
        rows.append(row)
    return rows
