"""Prefix -> organization attribution and flow direction inference."""
from __future__ import annotations

import csv
import ipaddress
import logging
import os
from dataclasses import dataclass, field, fields as _fields
from typing import Iterable, Sequence

import numpy as np

from . import InputError, InsufficientData
from .flows import UpsampledFlow
from .table import PREFIX_MASK, FlowTable

log = logging.getLogger(__name__)

CATEGORIES = ("education", "government", "business", "isp", "hosting", "unknown")

# Ports above 1023 that the application port map treats as service ports.
APP_SERVICE_PORTS = frozenset({4500, 4501, 4502, 5201, 8080, 8090, 4433, 2525})
DEFAULT_SVC_PORTS = frozenset(range(1024)) | APP_SERVICE_PORTS

INBOUND, OUTBOUND, LOCAL_LOCAL, TRANSIT = "inbound", "outbound", "local-local", "transit"
ORIENTATIONS = (INBOUND, OUTBOUND, LOCAL_LOCAL, TRANSIT)
SRC, DST, AMBIGUOUS = "src", "dst", "ambiguous"


def prefix_of(ip: int) -> int:
    return int(ip) & PREFIX_MASK


def parse_prefix24(text: str) -> int:
    """``a.b.c.0/24`` (or a bare address) -> integer base of its /24."""
    net = ipaddress.IPv4Network(text.strip(), strict=False)
    if net.prefixlen != 24 and "/" in text:
        raise ValueError(f"not a /24 prefix: {text}")
    return int(net.network_address) & PREFIX_MASK


def format_prefix(prefix: int) -> str:
    return f"{ipaddress.IPv4Address(int(prefix))}/24"


def gov_reclassify(category: str, domain: str | None) -> str:
    """Business organizations whose domain ends in ``.gov`` are government."""
    if category == "business" and domain and domain.lower().rstrip(".").endswith(".gov"):
        return "government"
    return category


@dataclass(frozen=True)
class Organization:
    id: str
    name: str
    category: str = "unknown"
    local: bool = False


UNKNOWN_ORG = Organization("UNKNOWN", "unknown", "unknown", False)


@dataclass
class PrefixDirectory:
    """Immutable-after-load mapping from (anonymized) /24 prefixes to
    organizations.

    Lookups take anonymized prefixes.  When ``anon_to_real`` is empty the
    corpus is taken to be unanonymized and prefixes are looked up directly.
    """

    orgs: dict[str, Organization] = field(default_factory=dict)
    claims: dict[tuple[int, int], str] = field(default_factory=dict)  # (network, length) -> org id
    local_real: frozenset[int] = frozenset()
    anon_to_real: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.real_to_anon = {r: a for a, r in self.anon_to_real.items()}
        self._lengths = sorted({length for _, length in self.claims}, reverse=True)

    # -- translation -------------------------------------------------------
    def real_prefix(self, anon_prefix: int) -> int | None:
        if not self.anon_to_real:
            return prefix_of(anon_prefix)
        return self.anon_to_real.get(prefix_of(anon_prefix))

    def anon_prefix(self, real_prefix: int) -> int | None:
        if not self.anon_to_real:
            return prefix_of(real_prefix)
        return self.real_to_anon.get(prefix_of(real_prefix))

    # -- lookups -------------------------------------------------------------
    def _org_id_real(self, real: int) -> str | None:
        for length in self._lengths:
            mask = (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF if length else 0
            oid = self.claims.get((real & mask, length))
            if oid is not None:
                return oid
        return None

    def lookup(self, anon_prefix: int) -> Organization:
        real = self.real_prefix(anon_prefix)
        if real is None:
            return UNKNOWN_ORG
        oid = self._org_id_real(real)
        return self.orgs[oid] if oid is not None else UNKNOWN_ORG

    def is_local(self, anon_prefix: int) -> bool:
        real = self.real_prefix(anon_prefix)
        return real is not None and real in self.local_real

    @property
    def local_prefixes(self) -> list[int]:
        """Anonymized form of every local /24 that has a mapping."""
        out = [self.anon_prefix(r) for r in self.local_real]
        return sorted(p for p in out if p is not None)

    @property
    def local_count(self) -> int:
        return len(self.local_real)

    def org_list(self) -> list[Organization]:
        return [self.orgs[k] for k in sorted(self.orgs)] + [UNKNOWN_ORG]

    def resolve(self, prefixes: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[Organization]]:
        """Vectorised lookup.

        Returns (org index per element, local flag per element, org table);
        the org table is :meth:`org_list`, unknown last.
        """
        table = self.org_list()
        index = {o.id: i for i, o in enumerate(table)}
        uniq, inv = np.unique(np.asarray(prefixes, dtype=np.int64) & PREFIX_MASK,
                              return_inverse=True)
        org_idx = np.empty(len(uniq), dtype=np.int64)
        local = np.empty(len(uniq), dtype=bool)
        for i, p in enumerate(uniq.tolist()):
            org_idx[i] = index[self.lookup(p).id]
            local[i] = self.is_local(p)
        return org_idx[inv], local[inv], table


def _open_rows(path) -> list[list[str]]:
    if not os.path.exists(path):
        raise InputError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row and not row[0].lstrip().startswith("#")]


def load_directory(org_db, local_prefixes, anon_map=None) -> PrefixDirectory:
    """Load the org database, local prefix list and optional anonymization map.

    Overlapping claims resolve longest-match-first; an exact duplicate claim
    keeps the first row and logs a warning.  Malformed rows are skipped with
    a warning.
    """
    orgs: dict[str, Organization] = {}
    claims: dict[tuple[int, int], str] = {}
    raw_orgs: dict[str, tuple[str, str]] = {}
    for lineno, row in enumerate(_open_rows(org_db), start=1):
        try:
            net = ipaddress.IPv4Network(row[0].strip(), strict=False)
            oid = row[1].strip()
            if len(row) >= 4:
                name, category = row[2].strip(), row[3].strip().lower()
            else:
                name, category = oid, row[2].strip().lower()
            if category not in CATEGORIES:
                raise ValueError(f"unknown category {category!r}")
        except (ValueError, IndexError) as exc:
            if lineno == 1:
                continue  # header
            log.warning("org_db line %d skipped: %s", lineno, exc)
            continue
        length = min(net.prefixlen, 24)
        key = (int(net.network_address) & ((0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF), length)
        if key in claims:
            if claims[key] != oid:
                log.warning("org_db line %d: %s already claimed by %s", lineno, row[0], claims[key])
            continue
        claims[key] = oid
        raw_orgs.setdefault(oid, (name, category))

    local: set[int] = set()
    for lineno, row in enumerate(_open_rows(local_prefixes), start=1):
        try:
            local.add(parse_prefix24(row[0]))
        except ValueError as exc:
            log.warning("local prefix line %d skipped: %s", lineno, exc)

    anon: dict[int, int] = {}
    if anon_map is not None:
        seen_real: set[int] = set()
        for lineno, row in enumerate(_open_rows(anon_map), start=1):
            try:
                a, r = parse_prefix24(row[0]), parse_prefix24(row[1])
            except (ValueError, IndexError) as exc:
                if lineno > 1:
                    log.warning("anon_map line %d skipped: %s", lineno, exc)
                continue
            if a in anon or r in seen_real:
                log.warning("anon_map line %d breaks the bijection; skipped", lineno)
                continue
            anon[a] = r
            seen_real.add(r)

    local_ids = set()
    probe = PrefixDirectory(claims=claims)
    for p in local:
        oid = probe._org_id_real(p)
        if oid is not None:
            local_ids.add(oid)
    for oid, (name, category) in raw_orgs.items():
        orgs[oid] = Organization(oid, name, category, oid in local_ids)
    return PrefixDirectory(orgs=orgs, claims=claims, local_real=frozenset(local),
                           anon_to_real=anon)


# ---------------------------------------------------------------------------
# Direction inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DirectedFlow(UpsampledFlow):
    server_side: str = AMBIGUOUS
    orientation: str = TRANSIT


def _orient(server_local: bool, client_local: bool) -> str:
    if server_local and client_local:
        return LOCAL_LOCAL
    if server_local:
        return INBOUND
    if client_local:
        return OUTBOUND
    return TRANSIT


def infer_direction(flow: UpsampledFlow, directory: PrefixDirectory,
                    svc_ports: frozenset[int] = DEFAULT_SVC_PORTS) -> DirectedFlow:
    """Decide which endpoint is the server and orient the flow.

    ``server_side`` is the endpoint on a service port when exactly one side
    has one.  Ambiguous flows are still oriented, taking the lower port (the
    source on equal ports) as the server, so that direction-conditioned
    tables can carry e.g. high-port to high-port traffic.
    """
    src_svc = flow.src_port in svc_ports
    dst_svc = flow.dst_port in svc_ports
    if src_svc and not dst_svc:
        side = SRC
    elif dst_svc and not src_svc:
        side = DST
    else:
        side = AMBIGUOUS
    server_is_src = side == SRC or (side == AMBIGUOUS and flow.src_port <= flow.dst_port)
    src_local = directory.is_local(prefix_of(flow.src_ip))
    dst_local = directory.is_local(prefix_of(flow.dst_ip))
    if server_is_src:
        orientation = _orient(src_local, dst_local)
    else:
        orientation = _orient(dst_local, src_local)
    values = {f.name: getattr(flow, f.name) for f in _fields(UpsampledFlow)}
    return DirectedFlow(**values, server_side=side, orientation=orientation)


def port_mask(ports: Iterable[int]) -> np.ndarray:
    mask = np.zeros(65536, dtype=bool)
    mask[list(ports)] = True
    return mask


@dataclass
class Direction:
    """Column-wise direction inference for a :class:`FlowTable`.

    ``orientation`` holds indices into :data:`ORIENTATIONS`.
    """

    server_is_src: np.ndarray
    ambiguous: np.ndarray
    src_local: np.ndarray
    dst_local: np.ndarray
    orientation: np.ndarray

    @property
    def server_local(self) -> np.ndarray:
        return np.where(self.server_is_src, self.src_local, self.dst_local)

    @property
    def client_local(self) -> np.ndarray:
        return np.where(self.server_is_src, self.dst_local, self.src_local)


def direct(table: FlowTable, directory: PrefixDirectory,
           svc_ports: frozenset[int] = DEFAULT_SVC_PORTS,
           src_local: np.ndarray | None = None, dst_local: np.ndarray | None = None) -> Direction:
    mask = port_mask(svc_ports)
    src_svc = mask[table.src_port]
    dst_svc = mask[table.dst_port]
    ambiguous = src_svc == dst_svc
    server_is_src = np.where(ambiguous, table.src_port <= table.dst_port, src_svc)
    if src_local is None:
        _, src_local, _ = directory.resolve(table.src_ip)
    if dst_local is None:
        _, dst_local, _ = directory.resolve(table.dst_ip)
    server_local = np.where(server_is_src, src_local, dst_local)
    client_local = np.where(server_is_src, dst_local, src_local)
    orientation = np.full(len(table), 3, dtype=np.int8)
    orientation[server_local & ~client_local] = 0
    orientation[~server_local & client_local] = 1
    orientation[server_local & client_local] = 2
    return Direction(server_is_src, ambiguous, src_local, dst_local, orientation)


# ---------------------------------------------------------------------------
# Individual IP roles
# ---------------------------------------------------------------------------

SERVER, CLIENT = "server", "client"


def server_byte_fraction(ip: int, table: FlowTable,
                         svc_ports: frozenset[int] = DEFAULT_SVC_PORTS) -> float:
    touches = (table.src_ip == ip) | (table.dst_ip == ip)
    total = int(table.bytes[touches].sum())
    if total == 0:
        raise InsufficientData("insufficient activity")
    serving = (table.src_ip == ip) & port_mask(svc_ports)[table.src_port] & (table.dst_port > 1023)
    return int(table.bytes[serving].sum()) / total


def classify_ip_role(ip: int, flows: FlowTable | Sequence[UpsampledFlow],
                     threshold: float = 0.5,
                     svc_ports: frozenset[int] = DEFAULT_SVC_PORTS) -> str:
    """``server`` when more than ``threshold`` of the address's bytes are sent
    from a service port toward high ports, else ``client``."""
    if not isinstance(flows, FlowTable):
        flows = FlowTable.from_records(flows)
    frac = server_byte_fraction(ip, flows, svc_ports)
    return SERVER if frac > threshold else CLIENT

