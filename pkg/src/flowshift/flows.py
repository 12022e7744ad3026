"""Flow records, up-sampling, time bins and the study calendar."""
from __future__ import annotations

import csv
import io
import ipaddress
from collections import defaultdict
from dataclasses import dataclass, field, fields
from datetime import date, datetime, timedelta, timezone
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from . import InputError

FIVE_MIN = 300
HOUR = 3600
DAY = 86400
BIN_WIDTHS = (FIVE_MIN, HOUR, DAY)

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10

CSV_HEADER = (
    "ts_start", "ts_end", "proto", "src_ip", "src_port", "dst_ip", "dst_port",
    "packets", "bytes", "tcp_flags", "sampling_rate",
)


def ip_to_int(ip: str) -> int:
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(int(value)))


def parse_timestamp(text: str) -> float:
    """ISO-8601 UTC text -> epoch seconds with millisecond precision."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    ms = (delta.days * DAY + delta.seconds) * 1000 + delta.microseconds // 1000
    return ms / 1000.0


def format_timestamp(ts: float) -> str:
    ms = round(ts * 1000)
    dt = datetime(1970, 1, 1) + timedelta(milliseconds=ms)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ms % 1000:03d}Z"


@dataclass(frozen=True)
class FlowRecord:
    """One sampled, unidirectional flow observation."""

    ts_start: float
    ts_end: float
    proto: int
    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    sampled_packets: int
    sampled_bytes: int
    tcp_flags: int
    sampling_rate: int

    def __post_init__(self):
        if self.ts_start > self.ts_end:
            raise ValueError("ts_start after ts_end")
        if self.sampled_packets < 1:
            raise ValueError("flow has no sampled packets")
        if self.sampled_bytes < self.sampled_packets:
            raise ValueError("fewer bytes than packets")
        if self.sampling_rate < 1:
            raise ValueError("nonpositive sampling rate")


@dataclass(frozen=True)
class UpsampledFlow(FlowRecord):
    """A flow record with volumes scaled back up by its sampling rate."""

    packets: int = 0
    bytes: int = 0


def upsample(rec: FlowRecord) -> UpsampledFlow:
    values = {f.name: getattr(rec, f.name) for f in fields(FlowRecord)}
    return UpsampledFlow(
        **values,
        packets=rec.sampled_packets * rec.sampling_rate,
        bytes=rec.sampled_bytes * rec.sampling_rate,
    )


# ---------------------------------------------------------------------------
# CSV ingest
# ---------------------------------------------------------------------------

@dataclass
class IngestConfig:
    rates: frozenset[int] | None = None  # None accepts any positive rate
    strict: bool = False


@dataclass
class ParseReport:
    errors: list[tuple[int, str]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.errors)


def _parse_line(row: Sequence[str], config: IngestConfig) -> FlowRecord:
    if len(row) != len(CSV_HEADER):
        raise ValueError(f"expected {len(CSV_HEADER)} fields, got {len(row)}")
    ts_start = parse_timestamp(row[0])
    ts_end = parse_timestamp(row[1])
    proto, src_port, dst_port, packets, nbytes, flags, rate = (
        int(row[i]) for i in (2, 4, 6, 7, 8, 9, 10)
    )
    if rate <= 0:
        raise ValueError("nonpositive sampling rate")
    if config.rates is not None and rate not in config.rates:
        raise ValueError(f"undeclared sampling rate {rate}")
    if not 0 <= proto <= 255:
        raise ValueError(f"protocol out of range: {proto}")
    for port in (src_port, dst_port):
        if not 0 <= port <= 65535:
            raise ValueError(f"port out of range: {port}")
    if not 0 <= flags <= 255:
        raise ValueError(f"tcp_flags out of range: {flags}")
    return FlowRecord(
        ts_start=ts_start, ts_end=ts_end, proto=proto,
        src_ip=ip_to_int(row[3]), src_port=src_port,
        dst_ip=ip_to_int(row[5]), dst_port=dst_port,
        sampled_packets=packets, sampled_bytes=nbytes,
        tcp_flags=flags, sampling_rate=rate,
    )


def iter_flows(stream: TextIO, config: IngestConfig | None = None,
               report: ParseReport | None = None) -> Iterator[FlowRecord]:
    """Yield records from the flow CSV; bad lines go to ``report``.

    In strict mode the first bad line raises :class:`InputError`.
    """
    config = config or IngestConfig()
    report = report if report is not None else ParseReport()
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None:
        return
    if tuple(h.strip() for h in header) != CSV_HEADER:
        raise InputError(f"bad flow CSV header: {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            yield _parse_line(row, config)
        except ValueError as exc:
            if config.strict:
                raise InputError(f"line {lineno}: {exc}") from exc
            report.errors.append((lineno, str(exc)))


def parse_flows(stream: TextIO, config: IngestConfig | None = None
                ) -> tuple[list[FlowRecord], ParseReport]:
    report = ParseReport()
    records = list(iter_flows(stream, config, report))
    return records, report


def format_flow(rec: FlowRecord) -> str:
    return ",".join((
        format_timestamp(rec.ts_start), format_timestamp(rec.ts_end),
        str(rec.proto), int_to_ip(rec.src_ip), str(rec.src_port),
        int_to_ip(rec.dst_ip), str(rec.dst_port), str(rec.sampled_packets),
        str(rec.sampled_bytes), str(rec.tcp_flags), str(rec.sampling_rate),
    ))


def write_flows(records: Iterable[FlowRecord], stream: TextIO) -> None:
    stream.write(",".join(CSV_HEADER) + "\n")
    for rec in records:
        stream.write(format_flow(rec) + "\n")


def flows_to_text(records: Iterable[FlowRecord]) -> str:
    buf = io.StringIO()
    write_flows(records, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Time bins
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class TimeBin:
    width: int
    index: int

    @property
    def start(self) -> int:
        return self.index * self.width

    @property
    def end(self) -> int:
        return (self.index + 1) * self.width

    @classmethod
    def containing(cls, ts: float, width: int) -> "TimeBin":
        return cls(width, int(ts // width))


@dataclass
class BinVolume:
    bytes: int = 0
    packets: int = 0
    flow_count: int = 0

    def __add__(self, other: "BinVolume") -> "BinVolume":
        return BinVolume(self.bytes + other.bytes, self.packets + other.packets,
                         self.flow_count + other.flow_count)


def _split_integer(total: int, weights: Sequence[float]) -> list[int]:
    """Split ``total`` proportionally to ``weights``; parts sum to ``total``."""
    wsum = sum(weights)
    raw = [total * w / wsum for w in weights]
    parts = [int(r) for r in raw]
    short = total - sum(parts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - parts[i]), i))
    for i in order[:short]:
        parts[i] += 1
    return parts


def bin_volume(flows: Iterable[UpsampledFlow], width: int = FIVE_MIN,
               assign: str = "start") -> dict[TimeBin, BinVolume]:
    """Aggregate up-sampled volume per time bin.

    ``assign="start"`` puts a flow's whole volume in the bin holding its
    start; ``"proportional"`` spreads it over every bin it overlaps, in
    proportion to the overlap.  Flow counts are always attributed by start
    time so that each flow is counted once.
    """
    if width not in BIN_WIDTHS:
        raise ValueError(f"unsupported bin width {width}")
    if assign not in ("start", "proportional"):
        raise ValueError(f"unknown assignment rule {assign!r}")
    out: dict[TimeBin, BinVolume] = defaultdict(BinVolume)
    for f in flows:
        first = TimeBin.containing(f.ts_start, width)
        out[first].flow_count += 1
        last = TimeBin.containing(f.ts_end, width)
        if assign == "start" or first == last or f.ts_end == f.ts_start:
            out[first].bytes += f.bytes
            out[first].packets += f.packets
            continue
        if f.ts_end == last.start:
            last = TimeBin(width, last.index - 1)
        bins = [TimeBin(width, i) for i in range(first.index, last.index + 1)]
        weights = [min(f.ts_end, b.end) - max(f.ts_start, b.start) for b in bins]
        for b, nb, npk in zip(bins, _split_integer(f.bytes, weights),
                              _split_integer(f.packets, weights)):
            out[b].bytes += nb
            out[b].packets += npk
    return dict(out)


def merge_bins(*maps: Mapping[TimeBin, BinVolume]) -> dict[TimeBin, BinVolume]:
    """Field-wise sum of partial bin maps (partitioned ingestion)."""
    out: dict[TimeBin, BinVolume] = defaultdict(BinVolume)
    for m in maps:
        for k, v in m.items():
            out[k] = out[k] + v
    return dict(out)


# ---------------------------------------------------------------------------
# Study calendar
# ---------------------------------------------------------------------------

BEFORE, TRANSITION, AFTER, OUTSIDE = "before", "transition", "after", "outside"
WORK, REST = "work", "rest"
PERIODS = (BEFORE, TRANSITION, AFTER)


@dataclass(frozen=True)
class Segment:
    period: str
    hours: str


@dataclass(frozen=True)
class StudyCalendar:
    """Before/transition/after date ranges (inclusive, local dates) and the
    weekday work-hours window."""

    before: tuple[date, date] = (date(2020, 2, 24), date(2020, 3, 13))
    transition: tuple[date, date] = (date(2020, 3, 14), date(2020, 3, 30))
    after: tuple[date, date] = (date(2020, 3, 31), date(2020, 5, 21))
    work_start: int = 8
    work_end: int = 17
    workdays: tuple[int, ...] = (0, 1, 2, 3, 4)
    timezone_offset: float = -7.0

    def __post_init__(self):
        spans = (self.before, self.transition, self.after)
        for lo, hi in spans:
            if lo > hi:
                raise ValueError(f"empty calendar interval {lo}..{hi}")
        if not (self.before[1] < self.transition[0] and self.transition[1] < self.after[0]):
            raise ValueError("calendar intervals must be disjoint and ordered")
        if not 0 <= self.work_start < self.work_end <= 24:
            raise ValueError("bad work-hours window")

    def local(self, ts: float) -> datetime:
        return datetime(1970, 1, 1) + timedelta(seconds=ts + self.timezone_offset * HOUR)

    def local_date(self, ts: float) -> date:
        return self.local(ts).date()

    def period_of_date(self, d: date) -> str:
        for name, (lo, hi) in zip(PERIODS, (self.before, self.transition, self.after)):
            if lo <= d <= hi:
                return name
        return OUTSIDE

    def period(self, ts: float) -> str:
        return self.period_of_date(self.local_date(ts))

    def is_work(self, ts: float) -> bool:
        lt = self.local(ts)
        return lt.weekday() in self.workdays and self.work_start <= lt.hour < self.work_end

    def epoch_of(self, d: date) -> float:
        """UTC epoch seconds of local midnight starting ``d``."""
        return (d - date(1970, 1, 1)).days * DAY - self.timezone_offset * HOUR

    @property
    def first_day(self) -> date:
        return self.before[0]

    @property
    def last_day(self) -> date:
        return self.after[1]

    def to_dict(self) -> dict:
        return {
            "before": [self.before[0].isoformat(), self.before[1].isoformat()],
            "transition": [self.transition[0].isoformat(), self.transition[1].isoformat()],
            "after": [self.after[0].isoformat(), self.after[1].isoformat()],
            "work_start": self.work_start, "work_end": self.work_end,
            "workdays": list(self.workdays), "timezone_offset": self.timezone_offset,
        }

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "StudyCalendar":
        if not d:
            return cls()

        def span(key, default):
            if key not in d:
                return default
            lo, hi = d[key]
            return (_as_date(lo), _as_date(hi))

        base = cls()
        return cls(
            before=span("before", base.before),
            transition=span("transition", base.transition),
            after=span("after", base.after),
            work_start=int(d.get("work_start", base.work_start)),
            work_end=int(d.get("work_end", base.work_end)),
            workdays=tuple(d.get("workdays", base.workdays)),
            timezone_offset=float(d.get("timezone_offset", base.timezone_offset)),
        )


def _as_date(v) -> date:
    return v if isinstance(v, date) else date.fromisoformat(str(v))


def segment(t: float, cal: StudyCalendar) -> Segment:
    return Segment(cal.period(t), WORK if cal.is_work(t) else REST)


# Vectorised calendar helpers.  Period codes index into PERIODS; -1 = outside.

def local_day_number(ts, cal: StudyCalendar):
    return np.floor((np.asarray(ts, dtype=float) + cal.timezone_offset * HOUR) / DAY).astype(np.int64)


def day_number(d: date) -> int:
    return (d - date(1970, 1, 1)).days


def date_of_day_number(n: int) -> date:
    return date(1970, 1, 1) + timedelta(days=int(n))


def period_codes(ts, cal: StudyCalendar):
    days = local_day_number(ts, cal)
    codes = np.full(days.shape, -1, dtype=np.int8)
    for code, (lo, hi) in enumerate((cal.before, cal.transition, cal.after)):
        codes[(days >= day_number(lo)) & (days <= day_number(hi))] = code
    return codes


def work_mask(ts, cal: StudyCalendar):
    local = np.asarray(ts, dtype=float) + cal.timezone_offset * HOUR
    days = np.floor(local / DAY).astype(np.int64)
    weekday = (days + 3) % 7
    hour = np.floor((local - days * DAY) / HOUR).astype(np.int64)
    return np.isin(weekday, cal.workdays) & (hour >= cal.work_start) & (hour < cal.work_end)
