"""Coarse traffic classes and port/prefix based application labels."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import InputError
from .flows import PROTO_ICMP, PROTO_TCP, PROTO_UDP, TCP_SYN, FlowRecord
from .orgs import DST, DirectedFlow, Direction, prefix_of
from .table import FlowTable

ICMP, OTPROT, SYN, CANDIDATE = "icmp", "otprot", "syn", "candidate"
COARSE_CLASSES = (ICMP, OTPROT, SYN, CANDIDATE)

MG_LABELS = ("steam", "bluejeans", "zoom", "skype", "gmeet", "goto", "webex")
PORT_LABELS = ("ssh", "telnet", "ftp", "web", "unidata", "https", "rsync", "vpn",
               "perfsonar", "email", "dns", "ntp")
HIGHHIGH, TWOSERVICE, NOSERVICE = "highhigh", "twoservice", "noservice"
APP_LABELS = PORT_LABELS + MG_LABELS + (HIGHHIGH, TWOSERVICE, NOSERVICE)
LABEL_CODE = {label: i for i, label in enumerate(APP_LABELS)}
NO_LABEL = -1

DEFAULT_PORTS = {
    "web": (80, 81, 82, 8080, 8090),
    "https": (443, 4433),
    "vpn": (4500, 4501, 4502),
    "email": (25, 110, 995, 143, 993, 2525, 465),
    "ftp": (20, 21),
    "telnet": (23,),
    "ssh": (22,),
    "unidata": (388,),
    "rsync": (873,),
    "perfsonar": (5201,),
    "dns": (53,),
    "ntp": (123,),
}


@dataclass(frozen=True)
class PortMap:
    ports: Mapping[str, frozenset[int]] = field(
        default_factory=lambda: {k: frozenset(v) for k, v in DEFAULT_PORTS.items()})

    def __post_init__(self):
        seen: dict[int, str] = {}
        for label, ports in self.ports.items():
            if label not in PORT_LABELS:
                raise InputError(f"port map label {label!r} is not a port-based label")
            for p in ports:
                if not 0 <= p <= 65535:
                    raise InputError(f"port out of range: {p}")
                if p in seen and seen[p] != label:
                    raise InputError(f"port {p} mapped to both {seen[p]} and {label}")
                seen[p] = label

    def label_of(self, port: int) -> str | None:
        for label, ports in self.ports.items():
            if port in ports:
                return label
        return None

    @property
    def all_ports(self) -> frozenset[int]:
        return frozenset().union(*self.ports.values())

    @property
    def service_ports(self) -> frozenset[int]:
        return frozenset(range(1024)) | self.all_ports

    def lookup_table(self) -> np.ndarray:
        lut = np.full(65536, NO_LABEL, dtype=np.int16)
        for label, ports in self.ports.items():
            lut[list(ports)] = LABEL_CODE[label]
        return lut


def load_portmap(path) -> PortMap:
    """Read ``label:port,port,...`` lines; listed labels replace the defaults."""
    if not os.path.exists(path):
        raise InputError(f"missing port map file: {path}")
    ports = {k: frozenset(v) for k, v in DEFAULT_PORTS.items()}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                label, _, rest = line.partition(":")
                ports[label.strip()] = frozenset(int(p) for p in rest.split(",") if p.strip())
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return PortMap(ports)


def coarse_class(flow: FlowRecord) -> str:
    if flow.proto == PROTO_ICMP:
        return ICMP
    if flow.proto not in (PROTO_TCP, PROTO_UDP):
        return OTPROT
    if flow.proto == PROTO_TCP and flow.tcp_flags == TCP_SYN:
        return SYN
    return CANDIDATE


def app_label(flow: DirectedFlow, ports: PortMap | None = None,
              mg: Mapping[int, str] | None = None) -> str | None:
    """Label a candidate flow.

    Precedence: known-mg prefix, single-sided port map match against a
    dynamic peer port, highhigh, twoservice, noservice; otherwise ``None``.
    """
    ports = ports or PortMap()
    mg = mg or {}
    src_app = mg.get(prefix_of(flow.src_ip))
    dst_app = mg.get(prefix_of(flow.dst_ip))
    if src_app or dst_app:
        if src_app and dst_app:
            return dst_app if flow.server_side == DST else src_app
        return src_app or dst_app
    sl, dl = ports.label_of(flow.src_port), ports.label_of(flow.dst_port)
    if sl is not None and dl is None and flow.dst_port > 1023:
        return sl
    if dl is not None and sl is None and flow.src_port > 1023:
        return dl
    if flow.src_port > 10000 and flow.dst_port > 10000:
        return HIGHHIGH
    svc = ports.service_ports
    src_svc, dst_svc = flow.src_port in svc, flow.dst_port in svc
    if src_svc and dst_svc:
        return TWOSERVICE
    if not src_svc and not dst_svc:
        return NOSERVICE
    return None


# ---------------------------------------------------------------------------
# Column-wise classification
# ---------------------------------------------------------------------------

def coarse_codes(table: FlowTable) -> np.ndarray:
    """Index into :data:`COARSE_CLASSES` per flow."""
    codes = np.full(len(table), COARSE_CLASSES.index(CANDIDATE), dtype=np.int8)
    codes[(table.proto != PROTO_TCP) & (table.proto != PROTO_UDP)] = COARSE_CLASSES.index(OTPROT)
    codes[table.proto == PROTO_ICMP] = COARSE_CLASSES.index(ICMP)
    codes[(table.proto == PROTO_TCP) & (table.tcp_flags == TCP_SYN)] = COARSE_CLASSES.index(SYN)
    return codes


def _mg_codes(prefixes: np.ndarray, mg: Mapping[int, str]) -> np.ndarray:
    if not mg:
        return np.full(len(prefixes), NO_LABEL, dtype=np.int16)
    uniq, inv = np.unique(prefixes, return_inverse=True)
    mapped = np.array([LABEL_CODE[mg[p]] if p in mg else NO_LABEL for p in uniq.tolist()],
                      dtype=np.int16)
    return mapped[inv]


def label_codes(table: FlowTable, ports: PortMap | None = None,
                mg: Mapping[int, str] | None = None,
                direction: Direction | None = None,
                coarse: np.ndarray | None = None) -> np.ndarray:
    """Application label code per flow (index into :data:`APP_LABELS`).

    Non-candidate flows and unlabeled candidates get :data:`NO_LABEL`.
    """
    ports = ports or PortMap()
    n = len(table)
    if coarse is None:
        coarse = coarse_codes(table)
    out = np.full(n, NO_LABEL, dtype=np.int16)
    sp, dp = table.src_port, table.dst_port

    svc = np.zeros(65536, dtype=bool)
    svc[list(ports.service_ports)] = True
    src_svc, dst_svc = svc[sp], svc[dp]
    out[~src_svc & ~dst_svc] = LABEL_CODE[NOSERVICE]
    out[src_svc & dst_svc] = LABEL_CODE[TWOSERVICE]
    out[(sp > 10000) & (dp > 10000)] = LABEL_CODE[HIGHHIGH]

    lut = ports.lookup_table()
    sl, dl = lut[sp], lut[dp]
    src_only = (sl != NO_LABEL) & (dl == NO_LABEL) & (dp > 1023)
    dst_only = (dl != NO_LABEL) & (sl == NO_LABEL) & (sp > 1023)
    out[src_only] = sl[src_only]
    out[dst_only] = dl[dst_only]

    if mg:
        ms = _mg_codes(table.src_prefix, mg)
        md = _mg_codes(table.dst_prefix, mg)
        prefer_dst = (md != NO_LABEL) & (ms == NO_LABEL)
        if direction is not None:
            server_dst = ~direction.server_is_src & ~direction.ambiguous
            prefer_dst |= (md != NO_LABEL) & server_dst
        out = np.where(ms != NO_LABEL, ms, out)
        out = np.where(prefer_dst, md, out)

    out[coarse != COARSE_CLASSES.index(CANDIDATE)] = NO_LABEL
    return out


@dataclass
class Classified:
    """Per-flow classification results for one :class:`FlowTable`."""

    coarse: np.ndarray
    label: np.ndarray

    def label_names(self) -> list[str | None]:
        return [APP_LABELS[c] if c >= 0 else None for c in self.label.tolist()]


def classify_table(table: FlowTable, ports: PortMap | None = None,
                   mg: Mapping[int, str] | None = None,
                   direction: Direction | None = None) -> Classified:
    coarse = coarse_codes(table)
    return Classified(coarse, label_codes(table, ports, mg, direction, coarse))

