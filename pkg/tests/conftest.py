import os

import numpy as np
import pytest

from flowshift.flows import FlowRecord, ip_to_int, parse_timestamp
from flowshift.orgs import load_directory
from flowshift.table import FlowTable

T0 = parse_timestamp("2020-03-05T17:00:00Z")  # Thursday 10:00 local


def rec(src="10.0.0.1", dst="10.0.1.1", sport=443, dport=51514, proto=6, pkts=10, nbytes=15000,
        flags=0x18, rate=100, ts=T0, dur=60.0) -> FlowRecord:
    if isinstance(src, str):
        src = ip_to_int(src)
    if isinstance(dst, str):
        dst = ip_to_int(dst)
    return FlowRecord(ts, ts + dur, proto, src, sport, dst, dport, pkts, nbytes, flags, rate)


def table(records) -> FlowTable:
    return FlowTable.from_records(records)


def columns(n, rng, **fixed) -> FlowTable:
    """Random flow table with ``n`` rows; keyword arguments pin columns."""
    ts = fixed.pop("ts_start", T0 + rng.uniform(0, 3600, n))
    cols = dict(
        ts_start=ts, ts_end=ts + rng.uniform(0, 600, n),
        proto=rng.choice([1, 6, 17, 41], n, p=[0.05, 0.6, 0.3, 0.05]),
        src_ip=rng.integers(0x0A000000, 0x0A000400, n),
        src_port=rng.integers(0, 65536, n),
        dst_ip=rng.integers(0x0A000000, 0x0A000400, n),
        dst_port=rng.integers(0, 65536, n),
        sampled_packets=rng.integers(1, 50, n),
        tcp_flags=rng.choice([0x02, 0x12, 0x18, 0x10], n),
        sampling_rate=rng.choice([1, 100, 4096], n),
    )
    cols["sampled_bytes"] = cols["sampled_packets"] * rng.integers(40, 1500, n)
    cols.update(fixed)
    return FlowTable(**cols)


def write_lines(path, lines):
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))
    return str(path)


@pytest.fixture
def small_dir(tmp_path):
    """Two local orgs in 10.0.0.0/23 plus a remote business in 10.0.2.0/24."""
    org_db = write_lines(tmp_path / "org_db.csv", [
        "cidr,org_id,name,category",
        "10.0.0.0/24,E01,State University,education",
        "10.0.1.0/24,G01,County Office,government",
        "10.0.2.0/24,B01,Amazon.com Inc,business",
        "10.0.3.0/24,I01,ExampleISP,isp",
    ])
    local = write_lines(tmp_path / "local.txt", ["10.0.0.0/24", "10.0.1.0/24"])
    return load_directory(org_db, local)


@pytest.fixture(scope="session")
def rng_seed():
    return int(os.environ.get("FLOWSHIFT_TEST_SEED", "1234"))


@pytest.fixture
def rng(rng_seed):
    return np.random.default_rng(rng_seed)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
