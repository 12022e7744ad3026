"""Online meeting / gaming server identification.

Pipeline: ground-truth prefixes are widened to /24s; every prefix-hour
becomes a port vector (sorted server ports, front-padded with zeros, plus
the flow count); a CART tree learns application profiles from the
ground-truth vectors; prefixes seen serving ground-truth ports are labelled
by majority vote over their vectors and kept only if their owner is the
application's provider or a known partner.
"""
from __future__ import annotations

import csv
import ipaddress
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import InputError, InsufficientData
from .classify import MG_LABELS
from .flows import HOUR, PROTO_TCP, PROTO_UDP
from .orgs import (
    DEFAULT_SVC_PORTS, Direction, DirectedFlow, PrefixDirectory, SRC, AMBIGUOUS,
    direct, format_prefix, parse_prefix24,
)
from .table import PREFIX_MASK, FlowTable

log = logging.getLogger(__name__)

DEFAULT_WIDTH = 16
MIN_FLOWS = 50
GROUND_TRUTH, VERIFIED = "ground-truth", "verified"
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

DEFAULT_RELATIONS = {
    "bluejeans": ("AT&T", "CenturyLink", "Level3", "Microsoft"),
    "zoom": ("Amazon", "Cisco", "Zoom"),
    "webex": ("Cisco", "AT&T", "CenturyLink", "Amazon"),
    "gmeet": ("Google",),
    "goto": ("Logmein",),
    "skype": ("Microsoft",),
    "steam": (),
}

_PROTO_NAMES = {"tcp": PROTO_TCP, "udp": PROTO_UDP}


# ---------------------------------------------------------------------------
# Ground truth inputs
# ---------------------------------------------------------------------------

def _rows(path) -> list[list[str]]:
    if not os.path.exists(path):
        raise InputError(f"missing input file: {path}")
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]


def covering_24s(cidr: str) -> list[int]:
    net = ipaddress.IPv4Network(cidr.strip(), strict=False)
    if not 8 <= net.prefixlen <= 32:
        raise ValueError(f"CIDR length out of range: {cidr}")
    if net.prefixlen >= 24:
        return [int(net.network_address) & PREFIX_MASK]
    base = int(net.network_address)
    return [base + (i << 8) for i in range(1 << (24 - net.prefixlen))]


def expand_ground_truth(entries: Iterable[tuple[str, str]] | str | os.PathLike
                        ) -> tuple[dict[int, str], list[tuple[int, str, str]]]:
    """Widen ``(app, cidr)`` claims to /24s.

    Returns the /24 -> app map and the conflicts (prefix, kept app, dropped
    app).  The first claim on a /24 wins.
    """
    if isinstance(entries, (str, os.PathLike)):
        rows = _rows(entries)
        if rows and rows[0][0].strip().lower() == "app":
            rows = rows[1:]
        entries = [(r[0].strip().lower(), r[1].strip()) for r in rows]
    out: dict[int, str] = {}
    conflicts = []
    for app, cidr in entries:
        for p in covering_24s(cidr):
            if p in out:
                if out[p] != app:
                    conflicts.append((p, out[p], app))
                    log.warning("ground-truth conflict on %s: keeping %s, dropping %s",
                                format_prefix(p), out[p], app)
                continue
            out[p] = app
    return out, conflicts


def load_gt_ports(path=None) -> dict[str, frozenset[tuple[int, int]]]:
    """``app,proto,port[-port]`` rows -> app -> {(proto, port)}."""
    path = path or os.path.join(DATA_DIR, "gt_ports.csv")
    out: dict[str, set[tuple[int, int]]] = {}
    for lineno, row in enumerate(_rows(path), start=1):
        try:
            app, proto, ports = (c.strip().lower() for c in row[:3])
            proto_num = _PROTO_NAMES[proto] if proto in _PROTO_NAMES else int(proto)
            lo, _, hi = ports.partition("-")
            lo_i, hi_i = int(lo), int(hi or lo)
        except (ValueError, KeyError, IndexError) as exc:
            if lineno == 1:
                continue
            raise InputError(f"{path}:{lineno}: bad ground-truth port row {row}") from exc
        out.setdefault(app, set()).update((proto_num, p) for p in range(lo_i, hi_i + 1))
    return {k: frozenset(v) for k, v in out.items()}


@dataclass(frozen=True)
class BusinessRelations:
    partners: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_RELATIONS))

    def consistent(self, app: str, owner_name: str) -> bool:
        owner = owner_name.lower()
        return any(p.lower() in owner for p in self.partners.get(app, ()))


def load_relations(path) -> BusinessRelations:
    partners: dict[str, list[str]] = {}
    for row in _rows(path):
        if row[0].strip().lower() == "app":
            continue
        partners.setdefault(row[0].strip().lower(), []).append(row[1].strip())
    return BusinessRelations({k: tuple(v) for k, v in partners.items()})


# ---------------------------------------------------------------------------
# Port vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PortVector:
    prefix: int
    hour: int  # hour index since the epoch
    ports: tuple[int, ...]
    flow_count: int
    label: str | None = None

    def features(self) -> np.ndarray:
        return np.array(self.ports + (self.flow_count,), dtype=float)


def _server_columns(flows) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(server prefix, server port, start time) arrays."""
    if isinstance(flows, tuple):
        table, direction = flows
        sis = direction.server_is_src
        return (np.where(sis, table.src_prefix, table.dst_prefix),
                np.where(sis, table.src_port, table.dst_port), table.ts_start)
    flows = list(flows)
    sis = np.array([f.server_side == SRC or (f.server_side == AMBIGUOUS and f.src_port <= f.dst_port)
                    for f in flows], dtype=bool)
    src_pfx = np.array([f.src_ip & PREFIX_MASK for f in flows], dtype=np.int64)
    dst_pfx = np.array([f.dst_ip & PREFIX_MASK for f in flows], dtype=np.int64)
    sp = np.array([f.src_port for f in flows], dtype=np.int64)
    dp = np.array([f.dst_port for f in flows], dtype=np.int64)
    ts = np.array([f.ts_start for f in flows], dtype=float)
    return np.where(sis, src_pfx, dst_pfx), np.where(sis, sp, dp), ts


def extract_vectors(flows: Sequence[DirectedFlow] | tuple[FlowTable, Direction],
                    prefixes: Iterable[int], width: int = DEFAULT_WIDTH,
                    min_flows: int = MIN_FLOWS,
                    labels: Mapping[int, str] | None = None) -> list[PortVector]:
    """One vector per (prefix, hour) whose server side is in ``prefixes``.

    ``flows`` is either a sequence of :class:`DirectedFlow` or a
    ``(FlowTable, Direction)`` pair.  The ``width`` most frequent server
    ports are kept (ties to the lower port), sorted ascending and padded in
    front with zeros.  Vectors with fewer than ``min_flows`` flows are
    dropped.
    """
    if width < 1:
        raise ValueError("vector width must be at least 1")
    wanted = np.array(sorted(set(int(p) for p in prefixes)), dtype=np.int64)
    spfx, sport, ts = _server_columns(flows)
    keep = np.isin(spfx, wanted)
    if not keep.any():
        return []
    spfx, sport = spfx[keep], sport[keep]
    hour = np.floor(ts[keep] / HOUR).astype(np.int64)
    h0 = hour.min()
    group_key = (spfx << 20) | (hour - h0)
    groups, gid, gsize = np.unique(group_key, return_inverse=True, return_counts=True)
    pk, pcount = np.unique((gid.astype(np.int64) << 16) | sport, return_counts=True)
    p_gid, p_port = pk >> 16, pk & 0xFFFF
    order = np.lexsort((p_port, -pcount, p_gid))
    p_gid, p_port = p_gid[order], p_port[order]
    starts = np.searchsorted(p_gid, np.arange(len(groups)))
    rank = np.arange(len(p_gid)) - starts[p_gid]
    top = rank < width

    out = []
    top_gid, top_port = p_gid[top], p_port[top]
    bounds = np.searchsorted(top_gid, np.arange(len(groups) + 1))
    for g in range(len(groups)):
        if gsize[g] < min_flows:
            continue
        ports = sorted(top_port[bounds[g]:bounds[g + 1]].tolist())
        prefix = int(groups[g] >> 20)
        vec = (0,) * (width - len(ports)) + tuple(ports)
        out.append(PortVector(prefix, int((groups[g] & 0xFFFFF) + h0), vec, int(gsize[g]),
                              labels.get(prefix) if labels else None))
    return out


# ---------------------------------------------------------------------------
# CART decision tree
# ---------------------------------------------------------------------------

@dataclass
class DecisionTree:
    """Binary CART classifier with Gini impurity.

    Nodes are stored in flat lists; a node with ``feature == -1`` is a leaf
    whose ``counts`` hold the training class distribution.
    """

    max_depth: int = 12
    min_leaf: int = 5
    classes: list[str] = field(default_factory=list)
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)
    seed: int | None = None

    def fit(self, X: np.ndarray, y: Sequence[str]) -> "DecisionTree":
        X = np.asarray(X, dtype=float)
        self.classes = sorted(set(y))
        yi = np.array([self.classes.index(v) for v in y], dtype=np.int64)
        self.feature, self.threshold, self.left, self.right, self.counts = [], [], [], [], []
        self._grow(X, yi, np.arange(len(yi)), 0)
        return self

    def _new_node(self, counts) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.counts.append([int(c) for c in counts])
        return len(self.feature) - 1

    def _grow(self, X, y, idx, depth) -> int:
        k = len(self.classes)
        counts = np.bincount(y[idx], minlength=k)
        node = self._new_node(counts)
        n = len(idx)
        if depth >= self.max_depth or n < 2 * self.min_leaf or (counts > 0).sum() <= 1:
            return node
        split = self._best_split(X[idx], y[idx], counts)
        if split is None:
            return node
        f, thr = split
        go_left = X[idx, f] <= thr
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self._grow(X, y, idx[go_left], depth + 1)
        self.right[node] = self._grow(X, y, idx[~go_left], depth + 1)
        return node

    def _best_split(self, Xn, yn, counts):
        n, nf = Xn.shape
        k = len(self.classes)
        parent = 1.0 - ((counts / n) ** 2).sum()
        best_gain, best = 1e-12, None
        onehot = np.zeros((n, k))
        onehot[np.arange(n), yn] = 1.0
        lo, hi = self.min_leaf, n - self.min_leaf
        for f in range(nf):
            order = np.argsort(Xn[:, f], kind="mergesort")
            xs = Xn[order, f]
            left_counts = np.cumsum(onehot[order], axis=0)[:-1]
            n_left = np.arange(1, n)
            valid = (xs[:-1] < xs[1:]) & (n_left >= lo) & (n_left <= hi)
            if not valid.any():
                continue
            right_counts = counts - left_counts
            n_right = n - n_left
            gini_l = 1.0 - ((left_counts / n_left[:, None]) ** 2).sum(axis=1)
            gini_r = 1.0 - ((right_counts / n_right[:, None]) ** 2).sum(axis=1)
            gain = parent - (n_left * gini_l + n_right * gini_r) / n
            gain[~valid] = -np.inf
            i = int(np.argmax(gain))
            if gain[i] > best_gain + 1e-12:
                best_gain = gain[i]
                best = (f, (xs[i] + xs[i + 1]) / 2.0)
        return best

    def _leaf(self, x) -> int:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return node

    def predict_one(self, x) -> tuple[str, float]:
        """Label and leaf confidence (majority share of the leaf)."""
        c = self.counts[self._leaf(np.asarray(x, dtype=float))]
        i = int(np.argmax(c))
        return self.classes[i], c[i] / sum(c)

    def predict(self, X) -> list[str]:
        return [self.predict_one(x)[0] for x in np.asarray(X, dtype=float)]

    @property
    def depth(self) -> int:
        def d(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(d(self.left[node]), d(self.right[node]))
        return d(0) if self.feature else 0

    def to_dict(self) -> dict:
        return {
            "criterion": "gini", "max_depth": self.max_depth, "min_leaf": self.min_leaf,
            "seed": self.seed, "classes": self.classes,
            "nodes": [
                {"feature": int(f), "threshold": float(t), "left": int(l), "right": int(r),
                 "counts": [int(x) for x in c]}
                for f, t, l, r, c in zip(self.feature, self.threshold, self.left,
                                         self.right, self.counts)
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecisionTree":
        nodes = d["nodes"]
        return cls(
            max_depth=d["max_depth"], min_leaf=d["min_leaf"], classes=list(d["classes"]),
            feature=[n["feature"] for n in nodes], threshold=[n["threshold"] for n in nodes],
            left=[n["left"] for n in nodes], right=[n["right"] for n in nodes],
            counts=[list(n["counts"]) for n in nodes], seed=d.get("seed"),
        )


@dataclass
class TrainReport:
    n_train: int
    n_test: int
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]

    def to_dict(self) -> dict:
        return {"n_train": self.n_train, "n_test": self.n_test, "accuracy": self.accuracy,
                "precision": self.precision, "recall": self.recall}


def split_indices(n: int, split: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < split < 1:
        raise ValueError("split must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * split))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train(vectors: Sequence[PortVector], split: float = 0.5, seed: int = 0,
          max_depth: int = 12, min_leaf: int = 5) -> tuple[DecisionTree, TrainReport]:
    labels = [v.label for v in vectors]
    if any(lab is None for lab in labels):
        raise ValueError("training vectors must be labelled")
    if len(set(labels)) < 2:
        raise InsufficientData("degenerate training set")
    X = np.array([v.features() for v in vectors])
    y = np.array(labels, dtype=object)
    tr, te = split_indices(len(vectors), split, seed)
    if len(set(y[tr])) < 2:
        raise InsufficientData("degenerate training set")
    tree = DecisionTree(max_depth=max_depth, min_leaf=min_leaf, seed=seed).fit(X[tr], list(y[tr]))
    pred = np.array(tree.predict(X[te]), dtype=object)
    truth = y[te]
    acc = float((pred == truth).mean()) if len(te) else float("nan")
    precision, recall = {}, {}
    for lab in sorted(set(labels)):
        tp = int(((pred == lab) & (truth == lab)).sum())
        n_pred = int((pred == lab).sum())
        n_true = int((truth == lab).sum())
        precision[lab] = tp / n_pred if n_pred else float("nan")
        recall[lab] = tp / n_true if n_true else float("nan")
    return tree, TrainReport(len(tr), len(te), acc, precision, recall)


def label_prefix(tree: DecisionTree, vectors: Sequence[PortVector]) -> tuple[str, float]:
    """Majority vote over a prefix's vectors.

    Ties go to the label with the higher mean leaf confidence, then to the
    lexicographically first label.
    """
    if not vectors:
        raise InsufficientData("insufficient activity")
    votes: Counter[str] = Counter()
    conf: dict[str, list[float]] = {}
    for v in vectors:
        lab, c = tree.predict_one(v.features())
        votes[lab] += 1
        conf.setdefault(lab, []).append(c)
    best = min(votes, key=lambda lab: (-votes[lab], -float(np.mean(conf[lab])), lab))
    return best, votes[best] / len(vectors)


# ---------------------------------------------------------------------------
# Candidate discovery and pruning
# ---------------------------------------------------------------------------

def _gt_lookup(gt_ports: Mapping[str, frozenset[tuple[int, int]]]) -> np.ndarray:
    """Boolean [proto(0..255), port] table of ground-truth (proto, port) pairs."""
    mask = np.zeros((256, 65536), dtype=bool)
    for pairs in gt_ports.values():
        for proto, port in pairs:
            mask[proto, port] = True
    return mask


def find_candidates(table: FlowTable, gt_ports: Mapping[str, frozenset[tuple[int, int]]],
                    exclude: Iterable[int] = ()) -> set[int]:
    """Prefixes serving a ground-truth port to a dynamic (>1023) peer port."""
    if not len(table):
        return set()
    mask = _gt_lookup(gt_ports)
    proto = np.clip(table.proto, 0, 255)
    src_hit = mask[proto, table.src_port] & (table.dst_port > 1023)
    dst_hit = mask[proto, table.dst_port] & (table.src_port > 1023)
    found = set(np.unique(table.src_prefix[src_hit]).tolist())
    found |= set(np.unique(table.dst_prefix[dst_hit]).tolist())
    return found - set(int(p) for p in exclude)


@dataclass(frozen=True)
class MgEntry:
    label: str
    provenance: str
    vote_fraction: float | None = None


@dataclass
class KnownMgPrefixes:
    entries: dict[int, MgEntry] = field(default_factory=dict)

    def add(self, prefix: int, entry: MgEntry) -> bool:
        current = self.entries.get(prefix)
        if current is not None and current.provenance == GROUND_TRUTH:
            return False
        self.entries[prefix] = entry
        return True

    def label_map(self) -> dict[int, str]:
        return {p: e.label for p, e in self.entries.items()}

    def counts(self) -> dict[str, dict[str, int]]:
        """Per application: number of ground-truth and verified prefixes."""
        out = {app: {GROUND_TRUTH: 0, VERIFIED: 0} for app in MG_LABELS}
        for e in self.entries.values():
            out.setdefault(e.label, {GROUND_TRUTH: 0, VERIFIED: 0})[e.provenance] += 1
        return out

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["prefix", "app", "provenance", "vote_fraction"])
            for p in sorted(self.entries):
                e = self.entries[p]
                frac = "" if e.vote_fraction is None else f"{e.vote_fraction:.6f}"
                w.writerow([format_prefix(p), e.label, e.provenance, frac])

    @classmethod
    def load(cls, path) -> "KnownMgPrefixes":
        out = cls()
        for row in _rows(path)[1:]:
            frac = float(row[3]) if len(row) > 3 and row[3] else None
            out.entries[parse_prefix24(row[0])] = MgEntry(row[1], row[2], frac)
        return out


def prune_by_ownership(labeled: Mapping[int, tuple[str, float]], directory: PrefixDirectory,
                       relations: BusinessRelations | None = None) -> KnownMgPrefixes:
    """Keep candidates whose owner matches the provider or a partner of their label."""
    relations = relations or BusinessRelations()
    out = KnownMgPrefixes()
    for prefix in sorted(labeled):
        label, frac = labeled[prefix]
        if relations.consistent(label, directory.lookup(prefix).name):
            out.entries[prefix] = MgEntry(label, VERIFIED, frac)
    return out


# ---------------------------------------------------------------------------
# Whole pipeline
# ---------------------------------------------------------------------------

@dataclass
class MgResult:
    known: KnownMgPrefixes
    tree: DecisionTree
    report: TrainReport
    gt_votes: dict[int, tuple[str, float]]
    candidates: set[int]
    strong: dict[int, tuple[str, float]]
    conflicts: list


def mg_service_ports(gt_ports: Mapping[str, frozenset[tuple[int, int]]]) -> frozenset[int]:
    return DEFAULT_SVC_PORTS | frozenset(p for pairs in gt_ports.values() for _, p in pairs)


def build_known_mg(table: FlowTable, directory: PrefixDirectory,
                   gt_prefixes: Mapping[int, str],
                   gt_ports: Mapping[str, frozenset[tuple[int, int]]],
                   relations: BusinessRelations | None = None,
                   width: int = DEFAULT_WIDTH, min_flows: int = MIN_FLOWS,
                   split: float = 0.5, seed: int = 0, max_depth: int = 12,
                   min_leaf: int = 5) -> MgResult:
    """Run every step from ground-truth /24s to the known-mg prefix list.

    ``gt_prefixes`` maps *real* /24s to applications; they are translated
    into the corpus' anonymized space through ``directory``.
    """
    gt_anon: dict[int, str] = {}
    for real, app in gt_prefixes.items():
        anon = directory.anon_prefix(real)
        if anon is not None:
            gt_anon[anon] = app
    direction = direct(table, directory, mg_service_ports(gt_ports))
    gt_vectors = extract_vectors((table, direction), gt_anon, width, min_flows, labels=gt_anon)
    tree, report = train(gt_vectors, split, seed, max_depth, min_leaf)

    by_prefix: dict[int, list[PortVector]] = {}
    for v in gt_vectors:
        by_prefix.setdefault(v.prefix, []).append(v)
    gt_votes = {p: label_prefix(tree, vs) for p, vs in sorted(by_prefix.items())}

    candidates = find_candidates(table, gt_ports, exclude=gt_anon)
    cand_vectors = extract_vectors((table, direction), candidates, width, min_flows)
    by_cand: dict[int, list[PortVector]] = {}
    for v in cand_vectors:
        by_cand.setdefault(v.prefix, []).append(v)
    strong = {p: label_prefix(tree, vs) for p, vs in sorted(by_cand.items())}

    known = KnownMgPrefixes()
    for p in sorted(gt_anon):
        known.add(p, MgEntry(gt_anon[p], GROUND_TRUTH, None))
    for p, e in prune_by_ownership(strong, directory, relations).entries.items():
        known.add(p, e)
    return MgResult(known, tree, report, gt_votes, candidates, strong, [])
