"""Synthetic sampled-flow corpora with planted ground truth.

A scenario declares organizations, volume series (label, orientation,
before-level rate, after/before multipliers), meeting/gaming server
prefixes, liveness plans and scheduled anomalies.  :func:`generate` turns it
into a :class:`FlowTable` plus a :class:`GroundTruth`; :func:`write_scenario`
lays everything out on disk in the formats the analysis commands read.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from typing import Any, Mapping

import numpy as np
import yaml

from . import InputError
from .anomaly import DNS_AMP, ICMP_FLOOD, KINDS, NTP_AMP, OTHER, SYN_FLOOD
from .classify import DEFAULT_PORTS, MG_LABELS
from .flows import (
    DAY, FIVE_MIN, HOUR, PROTO_ICMP, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_PSH, TCP_SYN,
    StudyCalendar, day_number, int_to_ip, local_day_number, parse_timestamp, work_mask,
)
from .mg import DATA_DIR
from .orgs import CATEGORIES, format_prefix
from .store import STORE_LABELS, atomic_write_text
from .table import PREFIX_MASK, FlowTable

EPHEMERAL = (49152, 65535)
PKT_SIZE = {"icmp": 84, "syn": 60, "ntp": 468, "dns": 512, "otprot": 1200}
DEFAULT_PKT = 1000
ATTACK_PKT = {NTP_AMP: 468, DNS_AMP: 1200, ICMP_FLOOD: 84, SYN_FLOOD: 60, OTHER: 1400}

# Port profiles per application: (proto, first port, last port, weight).
MG_PROFILES = {
    "zoom": [(PROTO_UDP, 8801, 8801, 0.45), (PROTO_UDP, 8802, 8810, 0.15),
             (PROTO_TCP, 443, 443, 0.2), (PROTO_TCP, 8801, 8801, 0.1),
             (PROTO_UDP, 3478, 3478, 0.05), (PROTO_TCP, 80, 80, 0.05)],
    "webex": [(PROTO_UDP, 9000, 9000, 0.45), (PROTO_UDP, 5004, 5004, 0.25),
              (PROTO_TCP, 443, 443, 0.2), (PROTO_TCP, 5004, 5004, 0.05),
              (PROTO_TCP, 80, 80, 0.05)],
    "skype": [(PROTO_UDP, 3478, 3478, 0.3), (PROTO_UDP, 3479, 3479, 0.2),
              (PROTO_UDP, 3480, 3480, 0.15), (PROTO_UDP, 3481, 3481, 0.1),
              (PROTO_TCP, 443, 443, 0.2), (PROTO_TCP, 80, 80, 0.05)],
    "bluejeans": [(PROTO_UDP, 5000, 5999, 0.7), (PROTO_TCP, 443, 443, 0.3)],
    "goto": [(PROTO_UDP, 1853, 1853, 0.4), (PROTO_UDP, 8200, 8200, 0.25),
             (PROTO_TCP, 8200, 8200, 0.1), (PROTO_TCP, 443, 443, 0.2),
             (PROTO_TCP, 80, 80, 0.05)],
    "gmeet": [(PROTO_UDP, 19302, 19309, 0.65), (PROTO_UDP, 3478, 3478, 0.1),
              (PROTO_TCP, 443, 443, 0.25)],
    "steam": [(PROTO_UDP, 27000, 27100, 0.5), (PROTO_TCP, 27015, 27030, 0.4),
              (PROTO_UDP, 4380, 4380, 0.1)],
}


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------

@dataclass
class OrgSpec:
    id: str
    name: str = ""
    category: str = "business"
    prefixes: int = 1
    local: bool = False


@dataclass
class SeriesSpec:
    label: str
    local_org: str
    remote_org: str
    orientation: str = "inbound"  # inbound: local server, outbound: local client
    rate: float = 1e6  # bytes/s before the transition at diurnal shape 1
    keys: int = 4
    multiplier: Any = 1.0  # number or {work: x, rest: y}
    hours: str = "all"  # all|work|rest: when the series emits
    sampling_rate: int | None = None

    def mult(self, hours: str) -> float:
        if isinstance(self.multiplier, Mapping):
            return float(self.multiplier.get(hours, 1.0))
        return float(self.multiplier)


@dataclass
class MgServerSpec:
    app: str
    org: str
    prefixes: int = 1
    ground_truth: bool = True
    flows_per_hour: tuple[float, float] = (80.0, 200.0)
    client_org: str = ""
    hosts: int = 8


@dataclass
class DecoySpec:
    org: str
    prefixes: int = 1
    flows_per_hour: tuple[float, float] = (60.0, 150.0)
    ports: tuple = ((PROTO_TCP, 443),)
    client_org: str = ""


@dataclass
class LivenessSpec:
    org: str
    plan: str  # inc|same|dec
    before: int
    after: int
    prefixes: int = 1
    remote_org: str = ""
    jitter: int = 0


@dataclass
class AnomalySpec:
    kind: str
    start: str  # ISO timestamp, aligned to a 5-minute boundary
    duration_min: int
    zeta: float
    victim_org: str
    sources: int = 40
    decoy: bool = False


@dataclass
class ScenarioSpec:
    seed: int = 0
    calendar: StudyCalendar = field(default_factory=StudyCalendar)
    start: date | None = None
    end: date | None = None
    sampling_rate: int = 100
    noise: float = 0.1
    key_noise: float = 0.1
    size_sigma: float = 0.5
    diurnal: dict = field(default_factory=lambda: {"shape": "office"})
    anonymize: bool = True
    orgs: list[OrgSpec] = field(default_factory=list)
    series: list[SeriesSpec] = field(default_factory=list)
    mg_servers: list[MgServerSpec] = field(default_factory=list)
    decoys: list[DecoySpec] = field(default_factory=list)
    liveness: list[LivenessSpec] = field(default_factory=list)
    anomalies: list[AnomalySpec] = field(default_factory=list)

    @property
    def first_day(self) -> date:
        return self.start or self.calendar.first_day

    @property
    def last_day(self) -> date:
        return self.end or self.calendar.last_day

    def org(self, org_id: str) -> OrgSpec:
        for o in self.orgs:
            if o.id == org_id:
                return o
        raise InputError(f"scenario references unknown org {org_id!r}")

    def validate(self) -> None:
        ids = [o.id for o in self.orgs]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate org ids in scenario")
        for o in self.orgs:
            if o.category not in CATEGORIES:
                raise InputError(f"org {o.id}: unknown category {o.category!r}")
            if not 1 <= o.prefixes <= 256:
                raise InputError(f"org {o.id}: prefix count must be 1..256")
        if self.first_day > self.last_day:
            raise InputError("scenario ends before it starts")
        for s in self.series:
            if s.label not in STORE_LABELS:
                raise InputError(f"series label {s.label!r} is not a known label")
            for h in ("work", "rest"):
                if not s.mult(h) > 0:
                    raise InputError(f"series {s.label}: multipliers must be positive")
            if s.orientation not in ("inbound", "outbound"):
                raise InputError(f"series {s.label}: orientation must be inbound or outbound")
            if s.keys < 1 or s.rate < 0:
                raise InputError(f"series {s.label}: keys must be >= 1 and rate >= 0")
            self.org(s.local_org), self.org(s.remote_org)
        for m in self.mg_servers:
            if m.app not in MG_LABELS:
                raise InputError(f"unknown meeting/gaming app {m.app!r}")
            self.org(m.org)
        for lv in self.liveness:
            if lv.plan not in ("inc", "same", "dec"):
                raise InputError(f"liveness plan must be inc, same or dec, not {lv.plan!r}")
            if not (0 <= lv.before <= 254 and 0 <= lv.after <= 254):
                raise InputError("liveness host counts must be within 0..254")
        lo = self.calendar.epoch_of(self.first_day)
        hi = self.calendar.epoch_of(self.last_day) + DAY
        for a in self.anomalies:
            if a.kind not in KINDS:
                raise InputError(f"unknown anomaly kind {a.kind!r}")
            t = parse_timestamp(a.start)
            if t % FIVE_MIN or not (lo <= t and t + a.duration_min * 60 <= hi):
                raise InputError(f"anomaly at {a.start} is unaligned or outside the window")
            if a.zeta <= 1 or a.sources < 1 or a.duration_min < 5:
                raise InputError("anomalies need zeta > 1, sources >= 1, duration >= 5 min")
            self.org(a.victim_org)

    # -- (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "seed": self.seed, "calendar": self.calendar.to_dict(),
            "start": self.first_day.isoformat(), "end": self.last_day.isoformat(),
            "sampling_rate": self.sampling_rate, "noise": self.noise,
            "key_noise": self.key_noise, "size_sigma": self.size_sigma,
            "diurnal": dict(self.diurnal), "anonymize": self.anonymize,
        }
        for name in ("orgs", "series", "mg_servers", "decoys", "liveness", "anomalies"):
            d[name] = [_plain(asdict(x)) for x in getattr(self, name)]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        def build(kind, rows):
            out = []
            for r in rows or []:
                try:
                    out.append(kind(**r))
                except TypeError as exc:
                    raise InputError(f"bad {kind.__name__} entry {r}: {exc}") from exc
            return out

        spec = cls(
            seed=int(d.get("seed", 0)),
            calendar=StudyCalendar.from_dict(d.get("calendar")),
            start=_date_or_none(d.get("start")), end=_date_or_none(d.get("end")),
            sampling_rate=int(d.get("sampling_rate", 100)),
            noise=float(d.get("noise", 0.1)), key_noise=float(d.get("key_noise", 0.1)),
            size_sigma=float(d.get("size_sigma", 0.5)),
            diurnal=dict(d.get("diurnal") or {"shape": "office"}),
            anonymize=bool(d.get("anonymize", True)),
            orgs=build(OrgSpec, d.get("orgs")), series=build(SeriesSpec, d.get("series")),
            mg_servers=build(MgServerSpec, d.get("mg_servers")),
            decoys=build(DecoySpec, d.get("decoys")),
            liveness=build(LivenessSpec, d.get("liveness")),
            anomalies=build(AnomalySpec, d.get("anomalies")),
        )
        spec.validate()
        return spec


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _date_or_none(v) -> date | None:
    if v is None:
        return None
    return v if isinstance(v, date) else date.fromisoformat(str(v))


def load_scenario(path) -> ScenarioSpec:
    if not os.path.exists(path):
        raise InputError(f"missing scenario file: {path}")
    with open(path) as fh:
        return ScenarioSpec.from_dict(yaml.safe_load(fh) or {})


# ---------------------------------------------------------------------------
# Address plan
# ---------------------------------------------------------------------------

def org_block(index: int) -> int:
    """Real /16 base address of the ``index``-th organization."""
    return ((23 + index // 200) << 24) | ((10 + index % 200) << 16)


def attack_block(index: int) -> int:
    """/16 used for the spoofed or reflecting sources of one anomaly."""
    return ((200 + index // 200) << 24) | ((index % 200) << 16)


class AddressPlan:
    def __init__(self, spec: ScenarioSpec):
        self.index = {o.id: i for i, o in enumerate(spec.orgs)}
        self.spec = spec

    def prefixes(self, org_id: str) -> np.ndarray:
        o = self.spec.org(org_id)
        base = org_block(self.index[org_id])
        return base + (np.arange(o.prefixes, dtype=np.int64) << 8)


# ---------------------------------------------------------------------------
# Time structure
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def diurnal_shape(times: np.ndarray, cal: StudyCalendar, params: Mapping) -> np.ndarray:
    """Relative activity at bin start times (mean around 1 on weekdays)."""
    local = np.asarray(times, dtype=float) + cal.timezone_offset * HOUR
    days = np.floor(local / DAY)
    h = (local - days * DAY) / HOUR + 2.5 / 60  # bin centre
    shape = params.get("shape", "office")
    if shape == "flat":
        return np.ones(len(h))
    if shape == "cosine":
        amp = float(params.get("amplitude", 0.3))
        return 1.0 + amp * np.cos(2 * np.pi * (h - float(params.get("peak_hour", 14))) / 24)
    if shape != "office":
        raise InputError(f"unknown diurnal shape {shape!r}")
    rest = float(params.get("rest_level", 0.35))
    evening = float(params.get("evening_peak", 0.3))
    edge = float(params.get("edge_hours", 0.25))
    workday = np.isin(((days.astype(np.int64)) + 3) % 7, cal.workdays)
    plateau = _sigmoid((h - cal.work_start) / edge) - _sigmoid((h - cal.work_end) / edge)
    day_level = np.where(workday, 1.0 - rest, 0.15)
    return rest + day_level * plateau + evening * np.exp(-0.5 * ((h - 20.5) / 0.7) ** 2)


def period_multiplier(times: np.ndarray, cal: StudyCalendar, work_mult: float,
                      rest_mult: float) -> np.ndarray:
    """After/before multiplier per bin; the transition interpolates linearly."""
    work = work_mask(times, cal)
    target = np.where(work, work_mult, rest_mult)
    day = local_day_number(times, cal)
    t0 = day_number(cal.transition[0])
    t1 = day_number(cal.transition[1])
    frac = np.clip((day - t0 + 0.5) / (t1 - t0 + 1), 0.0, 1.0)
    frac = np.where(day < t0, 0.0, np.where(day > t1, 1.0, frac))
    return 1.0 + (target - 1.0) * frac


# ---------------------------------------------------------------------------
# Flow assembly
# ---------------------------------------------------------------------------

@dataclass
class _Cols:
    ts: list = field(default_factory=list)
    dur: list = field(default_factory=list)
    proto: list = field(default_factory=list)
    src_ip: list = field(default_factory=list)
    src_port: list = field(default_factory=list)
    dst_ip: list = field(default_factory=list)
    dst_port: list = field(default_factory=list)
    packets: list = field(default_factory=list)
    pkt_size: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    rate: list = field(default_factory=list)

    def add(self, n, **cols):
        for name, value in cols.items():
            getattr(self, name).append(np.broadcast_to(np.asarray(value), (n,)).copy())

    def cat(self, name, dtype):
        parts = getattr(self, name)
        return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype=dtype)


def _label_template(label: str, rng, n_keys: int):
    """(proto, server port per key, tcp flags, packet size) for a label."""
    tcp_data = TCP_ACK | TCP_PSH
    if label in DEFAULT_PORTS:
        proto = PROTO_UDP if label in ("dns", "ntp") else PROTO_TCP
        return proto, np.full(n_keys, min(DEFAULT_PORTS[label])), tcp_data if proto == PROTO_TCP else 0, \
            PKT_SIZE.get(label, DEFAULT_PKT)
    if label == "highhigh":
        return PROTO_TCP, rng.integers(30000, 40000, n_keys), tcp_data, DEFAULT_PKT
    if label == "noservice":
        return PROTO_TCP, rng.integers(6000, 7000, n_keys), tcp_data, DEFAULT_PKT
    if label == "twoservice":
        return PROTO_TCP, np.full(n_keys, 389), tcp_data, DEFAULT_PKT
    if label == "unlabeled":
        return PROTO_TCP, np.full(n_keys, 389), tcp_data, DEFAULT_PKT
    if label == "icmp":
        return PROTO_ICMP, np.zeros(n_keys, dtype=np.int64), 0, PKT_SIZE["icmp"]
    if label == "syn":
        return PROTO_TCP, np.full(n_keys, 80), TCP_SYN, PKT_SIZE["syn"]
    if label == "otprot":
        return 41, np.zeros(n_keys, dtype=np.int64), 0, PKT_SIZE["otprot"]
    if label in MG_LABELS:
        profile = MG_PROFILES[label]
        proto, lo, _, _ = profile[0]
        return proto, np.full(n_keys, lo), tcp_data if proto == PROTO_TCP else 0, DEFAULT_PKT
    raise InputError(f"no flow template for label {label!r}")


def _client_ports(label: str, rng, n: int) -> np.ndarray:
    if label in ("icmp", "otprot"):
        return np.zeros(n, dtype=np.int64)
    if label == "highhigh":
        return rng.integers(30000, 40000, n)
    if label == "twoservice":
        return np.full(n, 636)
    return rng.integers(EPHEMERAL[0], EPHEMERAL[1] + 1, n)


def _hosts(prefixes: np.ndarray, rng, n: int) -> np.ndarray:
    pick = prefixes[np.arange(n) % len(prefixes)]
    return pick + rng.integers(1, 255, n)


def _lognormal(rng, sigma: float, shape) -> np.ndarray:
    if sigma <= 0:
        return np.ones(shape)
    return np.exp(sigma * rng.standard_normal(shape) - sigma * sigma / 2)


@dataclass
class GroundTruth:
    multipliers: dict = field(default_factory=dict)  # "label/hours" -> multiplier
    series_hosts: list = field(default_factory=list)
    mg_prefixes: dict = field(default_factory=dict)  # anonymized /24 -> {app, ground_truth, bytes}
    anomalies: list = field(default_factory=list)
    liveness: dict = field(default_factory=dict)  # anonymized /24 -> inc|same|dec
    totals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _grid(spec: ScenarioSpec) -> np.ndarray:
    cal = spec.calendar
    lo = cal.epoch_of(spec.first_day)
    hi = cal.epoch_of(spec.last_day) + DAY
    return np.arange(lo, hi, FIVE_MIN, dtype=float)


def expected_series(spec: ScenarioSpec, s: SeriesSpec, grid: np.ndarray,
                    shape: np.ndarray | None = None) -> np.ndarray:
    """Noise-free bytes/s of one series on the grid."""
    cal = spec.calendar
    shape = diurnal_shape(grid, cal, spec.diurnal) if shape is None else shape
    mult = period_multiplier(grid, cal, s.mult("work"), s.mult("rest"))
    out = s.rate * shape * mult
    if s.hours != "all":
        work = work_mask(grid, cal)
        out = np.where(work if s.hours == "work" else ~work, out, 0.0)
    return out


def _sample(rng, packets: np.ndarray, rate: np.ndarray) -> np.ndarray:
    return rng.binomial(packets.astype(np.int64), 1.0 / rate.astype(float))


def _emit_series(spec, plan, s: SeriesSpec, grid, shape, rng, cols: _Cols, truth: GroundTruth):
    n_bins = len(grid)
    k = s.keys
    local = _hosts(plan.prefixes(s.local_org), rng, k)
    remote = _hosts(plan.prefixes(s.remote_org), rng, k)
    proto, sport, flags, pkt = _label_template(s.label, rng, k)
    cport = _client_ports(s.label, rng, k)
    if s.orientation == "inbound":
        server, client = local, remote
    else:
        server, client = remote, local
    weights = np.exp(spec.size_sigma * rng.standard_normal(k))
    weights /= weights.sum()
    level = expected_series(spec, s, grid, shape)
    common = _lognormal(rng, spec.noise, n_bins)
    per_key = _lognormal(rng, spec.key_noise, (n_bins, k))
    vol = (level * common * FIVE_MIN)[:, None] * weights[None, :] * per_key
    packets = np.rint(vol / pkt)
    b, key = np.nonzero(packets >= 1)
    n = len(b)
    offs = rng.uniform(0, FIVE_MIN - 1, n)
    cols.add(n, ts=grid[b] + offs, dur=rng.uniform(0, 60, n), proto=proto,
             src_ip=server[key], src_port=sport[key], dst_ip=client[key], dst_port=cport[key],
             packets=packets[b, key], pkt_size=pkt, flags=flags,
             rate=s.sampling_rate or spec.sampling_rate)
    for h in ("work", "rest"):
        truth.multipliers.setdefault(f"{s.label}/{h}", s.mult(h))
    truth.series_hosts.append({"label": s.label, "local_org": s.local_org,
                               "local_hosts": sorted(set(local.tolist())),
                               "work": s.mult("work"), "rest": s.mult("rest")})


def _profile_ports(app: str, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    profile = MG_PROFILES[app]
    w = np.array([p[3] for p in profile])
    pick = rng.choice(len(profile), size=n, p=w / w.sum())
    protos = np.array([p[0] for p in profile])[pick]
    lo = np.array([p[1] for p in profile])[pick]
    hi = np.array([p[2] for p in profile])[pick]
    return protos, lo + np.floor(rng.uniform(0, 1, n) * (hi - lo + 1)).astype(np.int64)


def _emit_servers(spec, plan, prefixes: np.ndarray, ports_fn, fph, client_org, rng, cols,
                  grid_hours, hosts=8) -> list[float]:
    """Per-hour Poisson flow bursts from server prefixes; returns bytes per prefix."""
    clients = plan.prefixes(client_org)
    out = []
    for p in prefixes.tolist():
        lam = rng.uniform(*fph)
        counts = rng.poisson(lam, len(grid_hours))
        n = int(counts.sum())
        ts = np.repeat(grid_hours, counts) + rng.uniform(0, HOUR - 1, n)
        protos, sport = ports_fn(n)
        server = p + rng.integers(1, hosts + 1, n)
        client = _hosts(clients, rng, n)
        packets = np.maximum(np.rint(_lognormal(rng, 1.0, n) * 2000), 200)
        cols.add(n, ts=ts, dur=rng.uniform(0, 600, n), proto=protos, src_ip=server,
                 src_port=sport, dst_ip=client,
                 dst_port=rng.integers(EPHEMERAL[0], EPHEMERAL[1] + 1, n), packets=packets,
                 pkt_size=DEFAULT_PKT,
                 flags=np.where(protos == PROTO_TCP, TCP_ACK | TCP_PSH, 0),
                 rate=spec.sampling_rate)
        out.append(float(packets.sum() * DEFAULT_PKT))
    return out


def _emit_liveness(spec, plan, lv: LivenessSpec, rng, cols, truth_live: dict):
    cal = spec.calendar
    days = np.arange(day_number(spec.first_day), day_number(spec.last_day) + 1)
    t0, t1 = day_number(cal.transition[0]), day_number(cal.transition[1])
    frac = np.clip((days - t0 + 0.5) / (t1 - t0 + 1), 0, 1)
    level = np.rint(lv.before + (lv.after - lv.before) * frac).astype(np.int64)
    level = np.where(days < t0, lv.before, np.where(days > t1, lv.after, level))
    remote = plan.prefixes(lv.remote_org or lv.org)
    for p in plan.prefixes(lv.org).tolist():
        order = rng.permutation(np.arange(1, 255))
        counts = level.copy()
        if lv.jitter and lv.plan != "same":
            counts = np.clip(counts + rng.integers(-lv.jitter, lv.jitter + 1, len(days)), 0, 254)
        n = int(counts.sum())
        day_idx = np.repeat(np.arange(len(days)), counts)
        host_rank = np.concatenate([np.arange(c) for c in counts]) if n else np.empty(0, int)
        ts = (days[day_idx] * DAY - cal.timezone_offset * HOUR) + rng.uniform(0, DAY - 700, n)
        cols.add(n, ts=ts, dur=rng.uniform(0, 600, n), proto=PROTO_TCP,
                 src_ip=p + order[host_rank],
                 src_port=rng.integers(EPHEMERAL[0], EPHEMERAL[1] + 1, n),
                 dst_ip=_hosts(remote, rng, n), dst_port=443, packets=2000,
                 pkt_size=DEFAULT_PKT, flags=TCP_ACK | TCP_PSH, rate=spec.sampling_rate)
        truth_live[p] = lv.plan


def _stream_expectation(spec, kind: str, grid, shape) -> np.ndarray:
    """Noise-free per-second volume of the monitored stream of ``kind``."""
    label = {NTP_AMP: "ntp", DNS_AMP: "dns", ICMP_FLOOD: "icmp", SYN_FLOOD: "syn"}.get(kind)
    out = np.zeros(len(grid))
    for s in spec.series:
        if label is not None and s.label != label:
            continue
        level = expected_series(spec, s, grid, shape)
        if kind in (ICMP_FLOOD, SYN_FLOOD):
            level = level / _label_template(s.label, np.random.default_rng(0), 1)[3]
        out += level
    return out


def _emit_anomaly(spec, plan, a: AnomalySpec, idx: int, grid, shape, rng, cols) -> dict:
    t = parse_timestamp(a.start)
    i0 = int(np.searchsorted(grid, t))
    n_bins = a.duration_min * 60 // FIVE_MIN
    bins = np.arange(i0, i0 + n_bins)
    expected = _stream_expectation(spec, a.kind, grid, shape)[bins]
    if not (expected > 0).all():
        raise InputError(f"anomaly {a.kind} at {a.start}: its stream has no baseline traffic")
    m = a.sources
    victim = int(plan.prefixes(a.victim_org)[0]) + 10
    sources = attack_block(idx) + (np.arange(m, dtype=np.int64) << 8) + rng.integers(1, 255, m)
    size = ATTACK_PKT[a.kind]
    # attack volume per second keeps (baseline + attack) / baseline at zeta in every bin
    attack = (a.zeta - 1.0) * expected
    unit_to_bytes = size if a.kind in (ICMP_FLOOD, SYN_FLOOD) else 1.0
    per = (attack * unit_to_bytes * FIVE_MIN)[:, None] / m * _lognormal(rng, spec.key_noise,
                                                                        (n_bins, m))
    packets = np.maximum(np.rint(per / size), 1)
    b, key = np.nonzero(packets >= 1)
    n = len(b)
    if a.kind == NTP_AMP:
        proto, sport, dport, flags = PROTO_UDP, np.full(m, 123), rng.integers(1024, 65536, m), 0
    elif a.kind == DNS_AMP:
        proto, sport, dport, flags = PROTO_UDP, np.full(m, 53), rng.integers(1024, 65536, m), 0
    elif a.kind == ICMP_FLOOD:
        proto, sport, dport, flags = PROTO_ICMP, np.zeros(m, int), np.zeros(m, int), 0
    elif a.kind == SYN_FLOOD:
        proto, sport, dport, flags = PROTO_TCP, rng.integers(1024, 65536, m), np.full(m, 80), TCP_SYN
    else:
        proto, sport, dport, flags = PROTO_UDP, 40000 + np.arange(m), np.full(m, 33000), 0
    cols.add(n, ts=grid[bins[b]] + rng.uniform(0, FIVE_MIN - 1, n), dur=rng.uniform(0, 60, n),
             proto=proto, src_ip=sources[key], src_port=sport[key], dst_ip=victim,
             dst_port=dport[key], packets=packets[b, key], pkt_size=size, flags=flags,
             rate=spec.sampling_rate)
    return {"kind": a.kind, "start": float(t), "end": float(t + n_bins * FIVE_MIN),
            "zeta": a.zeta, "decoy": a.decoy, "sources": m,
            "victim_prefix": victim & PREFIX_MASK}


# ---------------------------------------------------------------------------
# Anonymization
# ---------------------------------------------------------------------------

@dataclass
class PrefixAnonymizer:
    """Seeded bijection on IPv4 /24 labels that keeps /16 grouping.

    /16 blocks are permuted as a whole and the third octet is permuted
    within each block; host octets are untouched.
    """

    seed: int

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 16])
        self.block = rng.permutation(65536).astype(np.int64)
        self.block_inv = np.argsort(self.block)
        self._octet: dict[int, np.ndarray] = {}

    def _perm(self, block: int) -> np.ndarray:
        p = self._octet.get(block)
        if p is None:
            p = np.random.default_rng([self.seed, 24, block]).permutation(256).astype(np.int64)
            self._octet[block] = p
        return p

    def forward(self, ips) -> np.ndarray:
        ips = np.asarray(ips, dtype=np.int64)
        blk = ips >> 16
        third = (ips >> 8) & 255
        out = np.empty_like(ips)
        for b in np.unique(blk).tolist():
            m = blk == b
            out[m] = (self.block[b] << 16) | (self._perm(b)[third[m]] << 8) | (ips[m] & 255)
        return out

    def inverse(self, ips) -> np.ndarray:
        ips = np.asarray(ips, dtype=np.int64)
        blk = ips >> 16
        third = (ips >> 8) & 255
        out = np.empty_like(ips)
        for b in np.unique(blk).tolist():
            m = blk == b
            real_block = int(self.block_inv[b])
            inv = np.argsort(self._perm(real_block))
            out[m] = (real_block << 16) | (inv[third[m]] << 8) | (ips[m] & 255)
        return out


def anonymize_prefixes(table: FlowTable, seed: int) -> tuple[FlowTable, dict[int, int]]:
    """Rewrite every address; returns the new table and the anon -> real /24 map."""
    anon = PrefixAnonymizer(seed)
    cols = table.columns()
    cols["src_ip"] = anon.forward(table.src_ip)
    cols["dst_ip"] = anon.forward(table.dst_ip)
    real = np.unique(np.concatenate([table.src_ip, table.dst_ip]) & PREFIX_MASK)
    mapped = anon.forward(real)
    return FlowTable(**cols), dict(zip(mapped.tolist(), real.tolist()))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    table: FlowTable
    truth: GroundTruth
    anon_map: dict[int, int]  # anonymized /24 -> real /24
    spec: ScenarioSpec
    gt_prefixes: list[tuple[str, int]]  # (app, real /24)


def generate(spec: ScenarioSpec) -> Corpus:
    """Build the corpus; deterministic for a given spec (seed included)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    plan = AddressPlan(spec)
    grid = _grid(spec)
    shape = diurnal_shape(grid, spec.calendar, spec.diurnal)
    cols = _Cols()
    truth = GroundTruth()

    for s in spec.series:
        _emit_series(spec, plan, s, grid, shape, rng, cols, truth)

    gt_prefixes: list[tuple[str, int]] = []
    for s in spec.series:
        if s.label in MG_LABELS:
            server_org = s.remote_org if s.orientation == "outbound" else s.local_org
            gt_prefixes.extend((s.label, int(p)) for p in plan.prefixes(server_org))
    hours = grid[::HOUR // FIVE_MIN]
    mg_real: dict[int, dict] = {}
    for m in spec.mg_servers:
        prefixes = plan.prefixes(m.org)
        vols = _emit_servers(spec, plan, prefixes, lambda n, app=m.app: _profile_ports(app, rng, n),
                             m.flows_per_hour, m.client_org or spec.orgs[0].id, rng, cols,
                             hours, m.hosts)
        for p, v in zip(prefixes.tolist(), vols):
            mg_real[p] = {"app": m.app, "ground_truth": m.ground_truth, "bytes": v}
            if m.ground_truth:
                gt_prefixes.append((m.app, p))
    for d in spec.decoys:
        ports = [tuple(p) for p in d.ports]

        def decoy_ports(n, ports=ports):
            pick = rng.integers(0, len(ports), n)
            return (np.array([p[0] for p in ports])[pick], np.array([p[1] for p in ports])[pick])
        _emit_servers(spec, plan, plan.prefixes(d.org), decoy_ports, d.flows_per_hour,
                      d.client_org or spec.orgs[0].id, rng, cols, hours)

    live_real: dict[int, str] = {}
    for lv in spec.liveness:
        _emit_liveness(spec, plan, lv, rng, cols, live_real)

    planted = [_emit_anomaly(spec, plan, a, i, grid, shape, rng, cols)
               for i, a in enumerate(spec.anomalies)]

    table = _finish(cols, rng)
    order = np.lexsort((table.dst_port, table.src_port, table.dst_ip, table.src_ip,
                        table.ts_start))
    table = table.take(order)
    truth.totals = {"flows": len(table), "bytes": int(table.bytes.sum()),
                    "packets": int(table.packets.sum())}

    if spec.anonymize:
        table, anon_map = anonymize_prefixes(table, spec.seed)
        anonymizer = PrefixAnonymizer(spec.seed)

        def fwd(p):
            return int(anonymizer.forward([p])[0])
    else:
        real = np.unique(np.concatenate([table.src_ip, table.dst_ip]) & PREFIX_MASK)
        anon_map = {int(p): int(p) for p in real}

        def fwd(p):
            return int(p)
    truth.mg_prefixes = {format_prefix(fwd(p)): v for p, v in sorted(mg_real.items())}
    truth.liveness = {format_prefix(fwd(p)): v for p, v in sorted(live_real.items())}
    for a in planted:
        a["victim_prefix"] = format_prefix(fwd(a["victim_prefix"]))
        truth.anomalies.append(a)
    for h in truth.series_hosts:
        h["local_hosts"] = [int_to_ip(int(fwd(x & PREFIX_MASK)) | (x & 255))
                            for x in h["local_hosts"]]
    return Corpus(table, truth, anon_map, spec, gt_prefixes)


def _finish(cols: _Cols, rng) -> FlowTable:
    ts = np.round(cols.cat("ts", float) * 1000) / 1000
    if not len(ts):
        return FlowTable.empty()
    dur = np.round(cols.cat("dur", float) * 1000) / 1000
    packets = cols.cat("packets", np.int64)
    rate = cols.cat("rate", np.int64)
    pkt = cols.cat("pkt_size", float)
    sampled = _sample(rng, packets, rate)
    keep = sampled >= 1
    sp = sampled[keep]
    sb = np.maximum(np.rint(sp * pkt[keep]), sp).astype(np.uint64)
    return FlowTable(
        ts_start=ts[keep], ts_end=ts[keep] + dur[keep], proto=cols.cat("proto", np.int64)[keep],
        src_ip=cols.cat("src_ip", np.int64)[keep], src_port=cols.cat("src_port", np.int64)[keep],
        dst_ip=cols.cat("dst_ip", np.int64)[keep], dst_port=cols.cat("dst_port", np.int64)[keep],
        sampled_packets=sp.astype(np.uint64), sampled_bytes=sb,
        tcp_flags=cols.cat("flags", np.int64)[keep], sampling_rate=rate[keep].astype(np.uint64),
    )


# ---------------------------------------------------------------------------
# Files on disk
# ---------------------------------------------------------------------------

def write_scenario(corpus: Corpus, outdir) -> dict[str, str]:
    """Write the corpus and its side files; returns the run configuration paths."""
    os.makedirs(outdir, exist_ok=True)
    spec = corpus.spec
    plan = AddressPlan(spec)
    paths = {name: os.path.join(outdir, fname) for name, fname in (
        ("flows", "flows.csv"), ("org_db", "org_db.csv"), ("local_prefixes", "local_prefixes.txt"),
        ("anon_map", "anon_map.csv"), ("gt_prefixes", "gt_prefixes.csv"),
        ("gt_ports", "gt_ports.csv"), ("ground_truth", "ground_truth.json"),
        ("scenario", "scenario.yaml"))}

    tmp = paths["flows"] + ".tmp"
    corpus.table.write_csv(tmp)
    os.replace(tmp, paths["flows"])

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cidr", "org_id", "name", "category"])
    for o in spec.orgs:
        block = org_block(plan.index[o.id])
        w.writerow([f"{int_to_ip(block)}/16", o.id, o.name or o.id, o.category])
    atomic_write_text(paths["org_db"], buf.getvalue())

    local = [format_prefix(p) for o in spec.orgs if o.local for p in plan.prefixes(o.id).tolist()]
    atomic_write_text(paths["local_prefixes"], "".join(p + "\n" for p in local))

    lines = ["anon_prefix,real_prefix"] + [f"{format_prefix(a)},{format_prefix(r)}"
                                           for a, r in sorted(corpus.anon_map.items())]
    atomic_write_text(paths["anon_map"], "\n".join(lines) + "\n")

    lines = ["app,cidr"] + [f"{app},{format_prefix(p)}" for app, p in corpus.gt_prefixes]
    atomic_write_text(paths["gt_prefixes"], "\n".join(lines) + "\n")
    with open(os.path.join(DATA_DIR, "gt_ports.csv")) as fh:
        atomic_write_text(paths["gt_ports"], fh.read())
    atomic_write_text(paths["ground_truth"],
                      json.dumps(corpus.truth.to_dict(), indent=1, sort_keys=True) + "\n")
    atomic_write_text(paths["scenario"], yaml.safe_dump(spec.to_dict(), sort_keys=True))

    run = {"flows": "flows.csv", "org_db": "org_db.csv", "local_prefixes": "local_prefixes.txt",
           "anon_map": "anon_map.csv", "gt_prefixes": "gt_prefixes.csv",
           "gt_ports": "gt_ports.csv", "calendar": spec.calendar.to_dict(), "seed": spec.seed}
    paths["run"] = os.path.join(outdir, "run.yaml")
    atomic_write_text(paths["run"], yaml.safe_dump(run, sort_keys=True))
    return paths


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _cal(before, transition, after, **kw) -> StudyCalendar:
    return StudyCalendar.from_dict({"before": before, "transition": transition,
                                    "after": after, **kw})


def change_preset(seed: int = 7, noise: float = 0.1) -> ScenarioSpec:
    """Three weeks before, two of transition and three after, with the
    multipliers of the application change table planted."""
    cal = _cal(["2020-02-17", "2020-03-08"], ["2020-03-09", "2020-03-22"],
               ["2020-03-23", "2020-04-12"])
    orgs = [
        OrgSpec("E01", "State University", "education", 8, True),
        OrgSpec("G01", "County Office", "government", 2, True),
        OrgSpec("B01", "Example Business", "business", 16),
        OrgSpec("I01", "Residential ISP", "isp", 32),
        OrgSpec("VALVE", "Valve Corp", "business", 2),
        OrgSpec("U01", "Unidata Partner", "education", 4),
    ]
    series = [
        SeriesSpec("https", "E01", "B01", "inbound", 4e8, 4, {"work": 0.46, "rest": 0.6}),
        SeriesSpec("vpn", "E01", "I01", "inbound", 2e7, 4, {"work": 5.54, "rest": 2.5}),
        SeriesSpec("steam", "E01", "VALVE", "outbound", 5e7, 4, 0.14),
        SeriesSpec("unidata", "E01", "U01", "inbound", 1e8, 4, 1.04),
        SeriesSpec("ntp", "G01", "I01", "inbound", 2e6, 4, 0.96),
        SeriesSpec("web", "E01", "B01", "outbound", 1e8, 4, {"work": 0.5, "rest": 0.8}),
        SeriesSpec("ssh", "E01", "I01", "inbound", 5e6, 3, {"work": 1.8, "rest": 1.5}),
        SeriesSpec("highhigh", "E01", "U01", "outbound", 3e8, 4, 0.7),
        SeriesSpec("icmp", "E01", "I01", "inbound", 1e6, 3, 1.0),
        SeriesSpec("syn", "G01", "I01", "inbound", 5e5, 3, 1.0),
    ]
    return ScenarioSpec(seed=seed, calendar=cal, noise=noise, key_noise=0.05, orgs=orgs,
                        series=series)


MG_PARTNERS = {
    "zoom": ("AMZN", "Amazon.com, Inc.", "hosting"),
    "webex": ("CSCO", "Cisco Systems, Inc.", "business"),
    "skype": ("MSFT", "Microsoft Corporation", "business"),
    "bluejeans": ("ATT", "AT&T Services, Inc.", "isp"),
    "goto": ("LOGM", "LogMeIn, Inc.", "business"),
    "gmeet": ("GOOG", "Google LLC", "business"),
}
MG_PROVIDERS = {
    "zoom": ("ZOOM-GT", "Zoom Video Communications"),
    "webex": ("WEBEX-GT", "Cisco Webex"),
    "skype": ("SKYPE-GT", "Microsoft Skype"),
    "bluejeans": ("BJN-GT", "BlueJeans Network"),
    "goto": ("GOTO-GT", "LogMeIn GoTo"),
    "gmeet": ("GMEET-GT", "Google Meet"),
    "steam": ("STEAM-GT", "Valve Steam"),
}


def mg_preset(seed: int = 11, days: int = 3, gt_per_app: int = 4, hidden_per_app: int = 2
              ) -> ScenarioSpec:
    """Ground-truth and hidden meeting/gaming servers plus unrelated decoys."""
    cal = _cal(["2020-03-02", "2020-03-03"], ["2020-03-04", "2020-03-04"],
               ["2020-03-05", "2020-03-08"])
    start = date(2020, 3, 2)
    orgs = [OrgSpec("E01", "State University", "education", 16, True)]
    mg = []
    for app, (oid, name) in MG_PROVIDERS.items():
        orgs.append(OrgSpec(oid, name, "business", gt_per_app))
        mg.append(MgServerSpec(app, oid, gt_per_app, True, client_org="E01"))
    for app, (oid, name, cat) in MG_PARTNERS.items():
        orgs.append(OrgSpec(oid, name, cat, hidden_per_app))
        mg.append(MgServerSpec(app, oid, hidden_per_app, False, client_org="E01"))
    orgs.append(OrgSpec("WEBHOST", "Acme Web Hosting", "hosting", 4))
    orgs.append(OrgSpec("STUN", "ExampleISP", "isp", 2))
    decoys = [DecoySpec("WEBHOST", 4, ports=((PROTO_TCP, 443), (PROTO_TCP, 80)), client_org="E01"),
              DecoySpec("STUN", 2, ports=((PROTO_UDP, 3478),), client_org="E01")]
    return ScenarioSpec(seed=seed, calendar=cal, start=start,
                        end=start + timedelta(days=days - 1), orgs=orgs, mg_servers=mg,
                        decoys=decoys)


def liveness_preset(seed: int = 5, per_plan: int = 20) -> ScenarioSpec:
    """``per_plan`` local /24s each with increasing, stable and decreasing
    daily live-host counts, one single-prefix org per /24."""
    cal = _cal(["2020-02-24", "2020-03-08"], ["2020-03-09", "2020-03-15"],
               ["2020-03-16", "2020-03-29"])
    orgs = [OrgSpec("R01", "Remote Services", "hosting", 8)]
    liveness = []
    rng = np.random.default_rng(seed)
    for plan in ("inc", "same", "dec"):
        for _ in range(per_plan):
            i = len(liveness)
            lo, hi = int(rng.integers(0, 30)), int(rng.integers(100, 200))
            before, after = {"inc": (lo, hi), "dec": (hi, lo)}.get(plan, (lo + 5, lo + 5))
            oid = f"L{i:02d}"
            orgs.append(OrgSpec(oid, f"Local unit {i}", "education" if i % 2 else "business",
                                1, True))
            liveness.append(LivenessSpec(oid, plan, before, after, 1, "R01", jitter=3))
    return ScenarioSpec(seed=seed, calendar=cal, orgs=orgs, liveness=liveness)


def anomaly_preset(seed: int = 3, planted: bool = True, decoy: bool = True) -> ScenarioSpec:
    """Smooth background on every monitored stream plus twelve planted events."""
    cal = _cal(["2020-03-02", "2020-03-12"], ["2020-03-13", "2020-03-15"],
               ["2020-03-16", "2020-03-26"])
    orgs = [OrgSpec("E01", "State University", "education", 40, True),
            OrgSpec("G01", "County Office", "government", 40, True),
            OrgSpec("I01", "Residential ISP", "isp", 60),
            OrgSpec("B01", "Example Business", "business", 40)]
    series = [
        SeriesSpec("https", "E01", "B01", "inbound", 2e8, 40),
        SeriesSpec("ntp", "E01", "I01", "outbound", 4e7, 30),
        SeriesSpec("dns", "G01", "I01", "outbound", 4e7, 30),
        SeriesSpec("icmp", "E01", "I01", "inbound", 1.2e6, 30),
        SeriesSpec("syn", "G01", "I01", "inbound", 2.4e6, 30),
    ]
    events = []
    if planted:
        plan = [
            (NTP_AMP, "2020-03-03T15:00:00Z", 20, 5.0), (NTP_AMP, "2020-03-10T02:00:00Z", 120, 12.0),
            (NTP_AMP, "2020-03-20T18:00:00Z", 15, 30.0), (DNS_AMP, "2020-03-05T12:00:00Z", 25, 4.0),
            (DNS_AMP, "2020-03-22T06:00:00Z", 180, 20.0), (ICMP_FLOOD, "2020-03-06T20:00:00Z", 30, 3.0),
            (ICMP_FLOOD, "2020-03-18T10:00:00Z", 90, 8.0), (SYN_FLOOD, "2020-03-08T04:00:00Z", 20, 6.0),
            (SYN_FLOOD, "2020-03-17T14:00:00Z", 60, 50.0), (SYN_FLOOD, "2020-03-24T22:00:00Z", 10, 15.0),
            (OTHER, "2020-03-11T16:00:00Z", 45, 3.5), (OTHER, "2020-03-25T09:00:00Z", 150, 10.0),
        ]
        for i, (kind, start, dur, zeta) in enumerate(plan):
            events.append(AnomalySpec(kind, start, dur, zeta, "E01" if i % 2 else "G01",
                                      sources=30 + (i * 7) % 50))
    if decoy:
        events.append(AnomalySpec(NTP_AMP, "2020-03-19T19:00:00Z", 20, 1.5, "G01", sources=1,
                                  decoy=True))
    return ScenarioSpec(seed=seed, calendar=cal, noise=0.0, key_noise=0.1, size_sigma=0.5,
                        diurnal={"shape": "cosine", "amplitude": 0.3}, orgs=orgs, series=series,
                        anomalies=events)


def demo_preset(seed: int = 1) -> ScenarioSpec:
    """Small end-to-end corpus touching every analysis."""
    spec = change_preset(seed)
    spec.calendar = _cal(["2020-03-02", "2020-03-05"], ["2020-03-06", "2020-03-06"],
                         ["2020-03-07", "2020-03-10"])
    spec.series = spec.series[:6]
    for s in spec.series:
        s.keys = 2
    mg = mg_preset(seed, gt_per_app=2, hidden_per_app=1)
    spec.orgs += [o for o in mg.orgs if o.id != "E01"]
    for m in mg.mg_servers:
        m.flows_per_hour = (50.0, 120.0)
    spec.mg_servers = mg.mg_servers
    spec.decoys = mg.decoys
    return spec


def clean_anomaly_preset(seed: int = 3) -> ScenarioSpec:
    """The anomaly scenario's background traffic with nothing planted."""
    return anomaly_preset(seed, planted=False, decoy=False)


PRESETS = {"change": change_preset, "mg": mg_preset, "liveness": liveness_preset,
           "anomaly": anomaly_preset, "anomaly-clean": clean_anomaly_preset,
           "demo": demo_preset}
