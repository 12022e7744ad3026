import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowshift import InputError
from flowshift.flows import ip_to_int, upsample
from flowshift.orgs import (
    AMBIGUOUS, CLIENT, DST, INBOUND, LOCAL_LOCAL, ORIENTATIONS, OUTBOUND, SERVER, SRC, TRANSIT,
    classify_ip_role, direct, format_prefix, gov_reclassify, infer_direction, load_directory,
    parse_prefix24,
)

from conftest import columns, rec, table, write_lines


def test_direct_mapping(tmp_path):
    org_db = write_lines(tmp_path / "db.csv", ["203.0.113.0/24,E09,education"])
    local = write_lines(tmp_path / "local.txt", [])
    d = load_directory(org_db, local)
    assert d.lookup(parse_prefix24("203.0.113.0/24")).id == "E09"
    assert d.lookup(parse_prefix24("203.0.113.0/24")).category == "education"


def test_unknown_prefix_is_total(small_dir):
    org = small_dir.lookup(ip_to_int("192.0.2.0"))
    assert org.category == "unknown" and not org.local


def test_local_count(tmp_path):
    rows = [f"{10 + i // 65536}.{(i // 256) % 256}.{i % 256}.0/24" for i in range(6103)]
    org_db = write_lines(tmp_path / "db.csv", ["10.0.0.0/8,E01,education"])
    d = load_directory(org_db, write_lines(tmp_path / "local.txt", rows))
    assert d.local_count == 6103
    assert d.orgs["E01"].local


def test_longest_match_and_duplicate_claims(tmp_path, caplog):
    org_db = write_lines(tmp_path / "db.csv", [
        "10.0.0.0/16,BIG,Big Org,business",
        "10.0.5.0/24,SMALL,Small Org,hosting",
        "10.0.5.0/24,OTHER,Other,isp",
        "not-a-prefix,X,education",
    ])
    d = load_directory(org_db, write_lines(tmp_path / "l.txt", []))
    assert d.lookup(ip_to_int("10.0.5.0")).id == "SMALL"
    assert d.lookup(ip_to_int("10.0.6.0")).id == "BIG"
    assert "already claimed" in caplog.text


def test_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_directory(tmp_path / "nope.csv", tmp_path / "nope.txt")


def test_anon_map_translation(tmp_path):
    org_db = write_lines(tmp_path / "db.csv", ["198.51.100.0/24,B1,Acme,business"])
    local = write_lines(tmp_path / "l.txt", ["198.51.100.0/24"])
    amap = write_lines(tmp_path / "a.csv", ["anon_prefix,real_prefix", "7.7.7.0/24,198.51.100.0/24"])
    d = load_directory(org_db, local, amap)
    anon = ip_to_int("7.7.7.0")
    assert d.lookup(anon).id == "B1" and d.is_local(anon)
    assert d.local_prefixes == [anon]
    assert d.anon_prefix(ip_to_int("198.51.100.0")) == anon
    # unmapped anonymized prefixes are unknown
    assert d.lookup(ip_to_int("7.7.8.0")).id == "UNKNOWN"


def test_gov_reclassify():
    assert gov_reclassify("business", "dmv.colorado.gov") == "government"
    assert gov_reclassify("business", "example.com") == "business"
    assert gov_reclassify("education", "x.gov") == "education"


# -- direction -------------------------------------------------------------

def test_direction_examples(small_dir):
    f = infer_direction(upsample(rec(src="10.0.0.5", dst="10.0.3.7", sport=443, dport=51514)), small_dir)
    assert (f.server_side, f.orientation) == (SRC, INBOUND)
    f = infer_direction(upsample(rec(sport=40000, dport=40001)), small_dir)
    assert f.server_side == AMBIGUOUS
    f = infer_direction(upsample(rec(sport=80, dport=22)), small_dir)
    assert f.server_side == AMBIGUOUS


def test_orientation_cases(small_dir):
    cases = [("10.0.3.1", "10.0.0.1", 443, 50000, OUTBOUND),
             ("10.0.0.1", "10.0.1.1", 22, 50000, LOCAL_LOCAL),
             ("10.0.3.1", "10.0.2.1", 53, 50000, TRANSIT),
             ("10.0.3.1", "10.0.0.1", 50000, 443, INBOUND)]
    for src, dst, sp, dp, want in cases:
        assert infer_direction(upsample(rec(src=src, dst=dst, sport=sp, dport=dp)), small_dir).orientation == want


def test_direction_follows_ports_not_field_order(small_dir, rng):
    t = columns(400, rng)
    for r in t.upsampled():
        a = infer_direction(r, small_dir)
        swapped = type(r)(**{**r.__dict__, "src_ip": r.dst_ip, "dst_ip": r.src_ip,
                             "src_port": r.dst_port, "dst_port": r.src_port})
        b = infer_direction(swapped, small_dir)
        flip = {SRC: DST, DST: SRC, AMBIGUOUS: AMBIGUOUS}
        assert b.server_side == flip[a.server_side]
        if a.server_side != AMBIGUOUS or r.src_port != r.dst_port:
            assert a.orientation == b.orientation


def test_columnwise_matches_scalar(small_dir, rng):
    t = columns(1000, rng)
    d = direct(t, small_dir)
    scalar = [infer_direction(r, small_dir) for r in t.upsampled()]
    assert [ORIENTATIONS[o] for o in d.orientation.tolist()] == [f.orientation for f in scalar]
    assert d.ambiguous.tolist() == [f.server_side == AMBIGUOUS for f in scalar]


def test_orientation_partition(small_dir, rng):
    d = direct(columns(2000, rng), small_dir)
    assert set(np.unique(d.orientation).tolist()) <= {0, 1, 2, 3}
    touching = d.src_local | d.dst_local
    assert (touching == (d.orientation != 3)).all()


# -- IP role -----------------------------------------------------------------

def _role_table(serve_bytes, client_bytes, ip="10.0.0.9"):
    rows = []
    if serve_bytes:
        rows.append(rec(src=ip, dst="10.0.3.1", sport=443, dport=50000, pkts=1, nbytes=serve_bytes, rate=1))
    if client_bytes:
        rows.append(rec(src=ip, dst="10.0.3.1", sport=50001, dport=443, pkts=1, nbytes=client_bytes, rate=1))
    return table(rows)


def test_ip_role_examples():
    ip = ip_to_int("10.0.0.9")
    assert classify_ip_role(ip, _role_table(900, 100)) == SERVER
    assert classify_ip_role(ip, _role_table(0, 1000)) == CLIENT
    t = _role_table(600, 400)
    assert classify_ip_role(ip, t, threshold=0.5) == SERVER
    assert classify_ip_role(ip, t, threshold=0.7) == CLIENT


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10**6), st.integers(1, 10**6), st.floats(0.05, 0.95))
def test_ip_role_matches_direct_summation(serve, other, threshold):
    ip = ip_to_int("10.0.0.9")
    frac = serve / (serve + other)
    want = SERVER if frac > threshold else CLIENT
    assert classify_ip_role(ip, _role_table(serve, other), threshold) == want


def test_prefix_text_round_trip():
    for s in ("10.0.0.0/24", "198.51.100.0/24"):
        assert format_prefix(parse_prefix24(s)) == s
    with pytest.raises(ValueError):
        parse_prefix24("10.0.0.0/16")
