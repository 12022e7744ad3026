"""Per-bin labeled volume aggregates.

One row per (bin_start, label, local_org, remote_category, orientation).
Non-candidate flows carry their coarse class as label; candidate flows
without an application label carry ``unlabeled``.  The store is persisted as
CSV files partitioned by UTC day.
"""
from __future__ import annotations

import os
import tempfile
from datetime import datetime, timezone
from typing import Mapping

import numpy as np
import pandas as pd

from . import InputError
from .classify import APP_LABELS, COARSE_CLASSES, ICMP, OTPROT, SYN, PortMap, classify_table
from .flows import FIVE_MIN
from .orgs import DEFAULT_SVC_PORTS, ORIENTATIONS, PrefixDirectory, direct
from .table import FlowTable, group_sum

UNLABELED = "unlabeled"
STORE_LABELS = APP_LABELS + (UNLABELED, ICMP, OTPROT, SYN)
CANDIDATE_LABELS = APP_LABELS + (UNLABELED,)
COLUMNS = ("bin_start", "label", "local_org", "remote_category", "orientation",
           "bytes", "packets", "flows")
_CAT_NONE = ""


def empty_store() -> pd.DataFrame:
    return pd.DataFrame({
        "bin_start": pd.Series([], dtype=np.int64), "label": pd.Series([], dtype=object),
        "local_org": pd.Series([], dtype=object), "remote_category": pd.Series([], dtype=object),
        "orientation": pd.Series([], dtype=object), "bytes": pd.Series([], dtype=np.uint64),
        "packets": pd.Series([], dtype=np.uint64), "flows": pd.Series([], dtype=np.int64),
    })


def store_label_codes(table: FlowTable, ports: PortMap | None, mg: Mapping[int, str] | None,
                      direction) -> np.ndarray:
    """Index into :data:`STORE_LABELS` per flow."""
    cls = classify_table(table, ports, mg, direction)
    codes = cls.label.astype(np.int64)
    codes[codes < 0] = STORE_LABELS.index(UNLABELED)
    for name in (ICMP, OTPROT, SYN):
        codes[cls.coarse == COARSE_CLASSES.index(name)] = STORE_LABELS.index(name)
    return codes


def aggregate(table: FlowTable, directory: PrefixDirectory, ports: PortMap | None = None,
              mg: Mapping[int, str] | None = None, width: int = FIVE_MIN,
              svc_ports: frozenset[int] = DEFAULT_SVC_PORTS) -> pd.DataFrame:
    if not len(table):
        return empty_store()
    ports = ports or PortMap()
    src_org, src_local, orgs = directory.resolve(table.src_ip)
    dst_org, dst_local, _ = directory.resolve(table.dst_ip)
    d = direct(table, directory, svc_ports | ports.all_ports, src_local, dst_local)
    labels = store_label_codes(table, ports, mg, d)

    server_org = np.where(d.server_is_src, src_org, dst_org)
    client_org = np.where(d.server_is_src, dst_org, src_org)
    o = d.orientation
    # inbound and local-local rows belong to the server's org, outbound to the client's
    local_org = np.where(o == 1, client_org, np.where(o == 3, len(orgs), server_org))
    remote_org = np.where(o == 1, server_org, np.where(o == 3, server_org, client_org))
    categories = sorted({org.category for org in orgs})
    cat_of_org = np.array([categories.index(org.category) for org in orgs], dtype=np.int64)
    remote_cat = cat_of_org[remote_org]

    bins = (np.floor(table.ts_start / width).astype(np.int64))
    b0 = bins.min()
    fields_ = [(bins - b0, int(bins.max() - b0) + 1), (labels, len(STORE_LABELS)),
               (local_org, len(orgs) + 1), (remote_cat, len(categories)),
               (o.astype(np.int64), len(ORIENTATIONS))]
    key = np.zeros(len(table), dtype=np.int64)
    radix = 1
    for col, size in reversed(fields_):
        key += col * radix
        radix *= size
    if radix >= 2 ** 62:
        raise OverflowError("store key space too large")
    uniq, inv = np.unique(key, return_inverse=True)
    parts = []
    rem = uniq
    for _, size in reversed(fields_):
        parts.append(rem % size)
        rem = rem // size
    parts.reverse()
    org_ids = np.array([org.id for org in orgs] + [_CAT_NONE], dtype=object)
    df = pd.DataFrame({
        "bin_start": (parts[0] + b0) * width,
        "label": np.array(STORE_LABELS, dtype=object)[parts[1]],
        "local_org": org_ids[parts[2]],
        "remote_category": np.array(categories, dtype=object)[parts[3]],
        "orientation": np.array(ORIENTATIONS, dtype=object)[parts[4]],
        "bytes": group_sum(inv, table.bytes, len(uniq)),
        "packets": group_sum(inv, table.packets, len(uniq)),
        "flows": np.bincount(inv, minlength=len(uniq)).astype(np.int64),
    })
    return sort_store(df)


def sort_store(df: pd.DataFrame) -> pd.DataFrame:
    return df.sort_values(list(COLUMNS[:5]), kind="mergesort").reset_index(drop=True)


def candidate_total(df: pd.DataFrame, column: str = "bytes") -> int:
    return int(df.loc[df.label.isin(CANDIDATE_LABELS), column].to_numpy(dtype=np.uint64).sum())


def label_totals(df: pd.DataFrame, column: str = "bytes") -> dict[str, int]:
    out = {}
    for label, grp in df.groupby("label", sort=True):
        out[label] = int(grp[column].to_numpy(dtype=np.uint64).sum())
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _day_of(bin_start: int) -> str:
    return datetime.fromtimestamp(int(bin_start), tz=timezone.utc).strftime("%Y-%m-%d")


def save_store(df: pd.DataFrame, directory) -> list[str]:
    """Write one CSV per UTC day; stale partitions from earlier runs are removed."""
    os.makedirs(directory, exist_ok=True)
    written = []
    if len(df):
        days = (df.bin_start.to_numpy() // 86400) * 86400
        for day in np.unique(days):
            part = df[days == day]
            path = os.path.join(directory, f"{_day_of(day)}.csv")
            atomic_write_text(path, part.to_csv(index=False, lineterminator="\n"))
            written.append(path)
    keep = {os.path.basename(p) for p in written}
    for name in os.listdir(directory):
        if name.endswith(".csv") and name not in keep:
            os.unlink(os.path.join(directory, name))
    return written


def load_store(directory) -> pd.DataFrame:
    if not os.path.isdir(directory):
        raise InputError(f"labeled-volume store not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".csv"))
    if not names:
        return empty_store()
    frames = [pd.read_csv(os.path.join(directory, n), keep_default_na=False,
                          dtype={"label": str, "local_org": str, "remote_category": str,
                                 "orientation": str, "bytes": np.uint64, "packets": np.uint64,
                                 "flows": np.int64, "bin_start": np.int64})
              for n in names]
    return sort_store(pd.concat(frames, ignore_index=True))
