"""Columnar flow storage used by every bulk operation.

:class:`FlowTable` holds one numpy array per CSV column.  Volume columns are
unsigned 64-bit so that up-sampled byte totals stay exact integers.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields
from typing import Iterable, Sequence, TextIO

import numpy as np
import pandas as pd

from . import InputError
from .flows import (
    CSV_HEADER, FlowRecord, IngestConfig, ParseReport, UpsampledFlow,
    iter_flows, upsample,
)

_DTYPES = {
    "ts_start": np.float64,
    "ts_end": np.float64,
    "proto": np.int64,
    "src_ip": np.int64,
    "src_port": np.int64,
    "dst_ip": np.int64,
    "dst_port": np.int64,
    "sampled_packets": np.uint64,
    "sampled_bytes": np.uint64,
    "tcp_flags": np.int64,
    "sampling_rate": np.uint64,
}
_INT_CSV_COLUMNS = ("proto", "src_port", "dst_port", "packets", "bytes",
                    "tcp_flags", "sampling_rate")
_OCTETS = np.array([str(i) for i in range(256)], dtype=object)

PREFIX_MASK = 0xFFFFFF00


@dataclass
class FlowTable:
    ts_start: np.ndarray
    ts_end: np.ndarray
    proto: np.ndarray
    src_ip: np.ndarray
    src_port: np.ndarray
    dst_ip: np.ndarray
    dst_port: np.ndarray
    sampled_packets: np.ndarray
    sampled_bytes: np.ndarray
    tcp_flags: np.ndarray
    sampling_rate: np.ndarray

    def __post_init__(self):
        n = None
        for name, dtype in _DTYPES.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            if arr.ndim != 1:
                raise ValueError(f"column {name} must be one-dimensional")
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise ValueError(f"column {name} has length {len(arr)}, expected {n}")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return len(self.ts_start)

    # up-sampled volumes
    @property
    def packets(self) -> np.ndarray:
        return self.sampled_packets * self.sampling_rate

    @property
    def bytes(self) -> np.ndarray:
        return self.sampled_bytes * self.sampling_rate

    @property
    def src_prefix(self) -> np.ndarray:
        return self.src_ip & PREFIX_MASK

    @property
    def dst_prefix(self) -> np.ndarray:
        return self.dst_ip & PREFIX_MASK

    @classmethod
    def empty(cls) -> "FlowTable":
        return cls(**{name: np.empty(0, dtype=dt) for name, dt in _DTYPES.items()})

    def columns(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _DTYPES}

    def take(self, index) -> "FlowTable":
        return FlowTable(**{name: col[index] for name, col in self.columns().items()})

    @classmethod
    def concat(cls, tables: Sequence["FlowTable"]) -> "FlowTable":
        tables = [t for t in tables if len(t)]
        if not tables:
            return cls.empty()
        return cls(**{name: np.concatenate([getattr(t, name) for t in tables])
                      for name in _DTYPES})

    def sorted(self) -> "FlowTable":
        """Stable sort by start time (then by end time)."""
        order = np.lexsort((self.ts_end, self.ts_start))
        return self.take(order)

    def validate(self) -> list[tuple[int, str]]:
        """Return (row, reason) for rows that break the record invariants."""
        problems = []
        checks = (
            (self.ts_start > self.ts_end, "ts_start after ts_end"),
            (self.sampled_packets < 1, "flow has no sampled packets"),
            (self.sampled_bytes < self.sampled_packets, "fewer bytes than packets"),
            (self.sampling_rate < 1, "nonpositive sampling rate"),
            ((self.proto < 0) | (self.proto > 255), "protocol out of range"),
            ((self.src_port < 0) | (self.src_port > 65535)
             | (self.dst_port < 0) | (self.dst_port > 65535), "port out of range"),
            ((self.tcp_flags < 0) | (self.tcp_flags > 255), "tcp_flags out of range"),
        )
        for mask, reason in checks:
            problems.extend((int(i), reason) for i in np.flatnonzero(mask))
        return sorted(problems)

    # -- record conversion -------------------------------------------------
    @classmethod
    def from_records(cls, records: Iterable[FlowRecord]) -> "FlowTable":
        records = list(records)
        if not records:
            return cls.empty()
        names = [f.name for f in fields(FlowRecord)]
        cols = {n: [getattr(r, n) for r in records] for n in names}
        return cls(**cols)

    def to_records(self) -> list[FlowRecord]:
        cols = [getattr(self, n).tolist() for n in _DTYPES]
        return [FlowRecord(*row) for row in zip(*cols)]

    def upsampled(self) -> list[UpsampledFlow]:
        return [upsample(r) for r in self.to_records()]

    # -- CSV -----------------------------------------------------------------
    @classmethod
    def read_csv(cls, source: str | os.PathLike | TextIO,
                 config: IngestConfig | None = None) -> tuple["FlowTable", ParseReport]:
        """Load the flow CSV.

        Clean files take a vectorised path; any malformed content falls back
        to the line-by-line parser so that errors carry line numbers.
        """
        config = config or IngestConfig()
        text = None
        if not isinstance(source, (str, os.PathLike)):
            text = source.read()
        try:
            table = cls._read_fast(io.StringIO(text) if text is not None else source, config)
            return table, ParseReport()
        except (ValueError, TypeError, KeyError, OverflowError, pd.errors.ParserError):
            pass
        report = ParseReport()
        if text is not None:
            records = list(iter_flows(io.StringIO(text), config, report))
        else:
            with open(source, newline="") as fh:
                records = list(iter_flows(fh, config, report))
        return cls.from_records(records), report

    @classmethod
    def _read_fast(cls, source, config: IngestConfig) -> "FlowTable":
        dtypes = {c: str for c in CSV_HEADER}
        dtypes.update({c: np.int64 for c in _INT_CSV_COLUMNS})
        df = pd.read_csv(source, dtype=dtypes, keep_default_na=False)
        if tuple(df.columns) != CSV_HEADER:
            if not len(df.columns) or tuple(c.strip() for c in df.columns) != CSV_HEADER:
                raise InputError(f"bad flow CSV header: {','.join(df.columns)}")
            df.columns = list(CSV_HEADER)
        if df.empty:
            return cls.empty()
        ints = {c: (df[c] if df[c].dtype.kind in "iu" else pd.to_numeric(df[c], errors="raise"))
                .to_numpy() for c in _INT_CSV_COLUMNS}
        for c, arr in ints.items():
            if arr.dtype.kind not in "iu":
                raise ValueError(f"non-integer values in {c}")
        if (ints["sampling_rate"] <= 0).any():
            raise ValueError("nonpositive sampling rate")
        if config.rates is not None and not np.isin(ints["sampling_rate"], list(config.rates)).all():
            raise ValueError("undeclared sampling rate")
        table = cls(
            ts_start=_parse_ts(df["ts_start"]), ts_end=_parse_ts(df["ts_end"]),
            proto=ints["proto"], src_ip=_parse_ips(df["src_ip"]), src_port=ints["src_port"],
            dst_ip=_parse_ips(df["dst_ip"]), dst_port=ints["dst_port"],
            sampled_packets=ints["packets"], sampled_bytes=ints["bytes"],
            tcp_flags=ints["tcp_flags"], sampling_rate=ints["sampling_rate"],
        )
        if table.validate():
            raise ValueError("invalid rows")
        return table

    def write_csv(self, dest: str | os.PathLike | TextIO) -> None:
        df = pd.DataFrame({
            "ts_start": _format_ts(self.ts_start),
            "ts_end": _format_ts(self.ts_end),
            "proto": self.proto,
            "src_ip": _format_ips(self.src_ip),
            "src_port": self.src_port,
            "dst_ip": _format_ips(self.dst_ip),
            "dst_port": self.dst_port,
            "packets": self.sampled_packets,
            "bytes": self.sampled_bytes,
            "tcp_flags": self.tcp_flags,
            "sampling_rate": self.sampling_rate,
        })
        df.to_csv(dest, index=False, lineterminator="\n")


def _parse_ts(col: pd.Series) -> np.ndarray:
    stamps = pd.to_datetime(col, format="ISO8601", utc=True)
    ns = stamps.to_numpy(dtype="datetime64[ns]").astype(np.int64)
    return (ns // 1_000_000) / 1000.0


def _format_ts(ts: np.ndarray) -> np.ndarray:
    if not len(ts):
        return np.empty(0, dtype=object)
    ms = np.round(ts * 1000).astype(np.int64)
    base = pd.to_datetime(ms - ms % 1000, unit="ms").strftime("%Y-%m-%dT%H:%M:%S.")
    frac = pd.Series(ms % 1000).map("{:03d}Z".format)
    return (pd.Series(base) + frac).to_numpy()


def _parse_ips(col: pd.Series) -> np.ndarray:
    values = col.tolist()
    flat = ".".join(values).split(".")
    if len(flat) != 4 * len(values) or not all(v.isdigit() for v in flat):
        raise ValueError("malformed IPv4 address")
    octets = np.array(flat, dtype=np.int64).reshape(-1, 4)
    if ((octets < 0) | (octets > 255)).any():
        raise ValueError("malformed IPv4 address")
    return (octets[:, 0] << 24) | (octets[:, 1] << 16) | (octets[:, 2] << 8) | octets[:, 3]


def _format_ips(ips: np.ndarray) -> np.ndarray:
    if not len(ips):
        return np.empty(0, dtype=object)
    o = [pd.Series(_OCTETS[(ips >> s) & 255]) for s in (24, 16, 8, 0)]
    return (o[0] + "." + o[1] + "." + o[2] + "." + o[3]).to_numpy()


def group_sum(inverse: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Exact per-group sums (``np.bincount`` would go through float64)."""
    out = np.zeros(n, dtype=values.dtype)
    np.add.at(out, inverse, values)
    return out
