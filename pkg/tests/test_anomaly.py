import math
from collections import defaultdict

import numpy as np
import pytest

from flowshift.anomaly import (
    BYTES, DNS_AMP, EQUILIBRIUM, NTP, NTP_AMP, OTHER, OVERALL, THRESHOLD, AnomalyEvent, Interval,
    MonitorStream, ThresholdRules, anomaly_change_table, build_stream, corroborate,
    equilibrium_detect, expected_volume, is_confirmed, k_series, k_statistic, threshold_detect,
)
from flowshift.flows import DAY, FIVE_MIN, HOUR, StudyCalendar
from flowshift.table import FlowTable

from conftest import T0
from oracles import k_formula

CAL = StudyCalendar()


def flows(ts, src, dst, dport, proto, nbytes, sport=None, flags=0x18):
    n = len(ts)
    ts = np.asarray(ts, dtype=float)
    sport = np.full(n, 40000) if sport is None else np.asarray(sport)
    return FlowTable(ts_start=ts, ts_end=ts + 1, proto=np.asarray(proto), src_ip=np.asarray(src),
                     src_port=sport, dst_ip=np.asarray(dst), dst_port=np.asarray(dport),
                     sampled_packets=np.ones(n, dtype=np.int64), sampled_bytes=np.asarray(nbytes),
                     tcp_flags=np.full(n, flags), sampling_rate=np.ones(n, dtype=np.int64))


def random_table(rng, n=3000, bins=12):
    base = (int(T0) // FIVE_MIN) * FIVE_MIN
    return flows(base + rng.uniform(0, bins * FIVE_MIN, n),
                 0x0A000000 + rng.integers(0, 6, n) * 256 + rng.integers(0, 4, n),
                 0x0B000000 + rng.integers(0, 5, n) * 256,
                 rng.choice([53, 80, 443, 8801], n), rng.choice([6, 17], n),
                 rng.integers(40, 100000, n))


def oracle_k(table):
    """K per bin pair from per-key dictionaries built flow by flow."""
    b = np.floor(table.ts_start / FIVE_MIN).astype(int)
    first, n = b.min(), b.max() - b.min() + 1
    per_bin = [defaultdict(float) for _ in range(n)]
    for i in range(len(table)):
        key = (int(table.src_ip[i]) >> 8, int(table.dst_ip[i]) >> 8, int(table.dst_port[i]),
               int(table.proto[i]))
        per_bin[b[i] - first][key] += float(table.bytes[i])
    out = [0.0]
    for t in range(1, n):
        keys = set(per_bin[t]) | set(per_bin[t - 1])
        if not keys:
            out.append(0.0)
            continue
        out.append(k_formula([per_bin[t].get(k, 0.0) - per_bin[t - 1].get(k, 0.0) for k in keys]))
    return np.array(out)


def _same(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        if math.isinf(y):
            assert x == y
        else:
            assert x == pytest.approx(y, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_k_series_matches_oracle(seed):
    t = random_table(np.random.default_rng(seed), n=400 + 200 * seed)
    _same(k_series(build_stream(t, OVERALL)), oracle_k(t))


def test_k_series_sparse_keys(rng):
    # few flows so many keys appear in only one bin of a pair
    t = random_table(rng, n=40, bins=20)
    _same(k_series(build_stream(t, OVERALL)), oracle_k(t))


def test_k_examples():
    assert k_statistic(np.zeros(100)) == 0.0
    d = np.zeros(101)
    d[0] = 1e6
    k = k_statistic(d)
    # a lone outlier inflates the sd as fast as the mean: K stays near 1
    assert k == pytest.approx(k_formula(d)) == pytest.approx(1.0)
    assert k < 3.29
    d = np.full(101, 1e4) + np.arange(101)
    assert k_statistic(d) == pytest.approx(k_formula(d)) and k_statistic(d) > 3.29
    d = np.zeros(100)
    d[0], d[1] = 5e5, -5e5
    assert k_statistic(d) == 0.0
    assert k_statistic([7.0, 7.0]) == math.inf and k_statistic([]) == 0.0


def test_k_relabel_and_reversal(rng):
    d = rng.normal(10, 50, 60)
    assert k_statistic(rng.permutation(d)) == pytest.approx(k_statistic(d))
    assert k_statistic(-d) == pytest.approx(-k_statistic(d))


def test_k_series_time_reversal(rng):
    t = random_table(rng, n=500, bins=6)
    s = build_stream(t, OVERALL)
    last = s.bin_start(s.n_bins - 1)
    rev = flows(last + s.bin_start(0) - np.floor(t.ts_start / FIVE_MIN) * FIVE_MIN + 1,
                t.src_ip, t.dst_ip, t.dst_port, t.proto, t.sampled_bytes)
    _same(k_series(build_stream(rev, OVERALL))[1:], -k_series(s)[1:][::-1])


def _stream(rates, width=FIVE_MIN, first=0):
    v = np.asarray(rates, dtype=float) * width
    return MonitorStream("ntp", BYTES, width, first, v, np.empty(0, np.int64), np.empty(0))


def test_equilibrium_open_close():
    # every key shifts up by about 1e6 at bin 3 and back at bin 6
    n = 10
    codes, vols = [], []
    for key in range(32):
        for b in range(n):
            v = 100.0 + key
            if 3 <= b < 6:
                v += 1e6 + 1000 * key
            codes.append(key * n + b)
            vols.append(v)
    s = MonitorStream("overall", BYTES, FIVE_MIN, 0, np.zeros(n), np.array(codes), np.array(vols))
    assert equilibrium_detect(s) == [Interval(3 * FIVE_MIN, 6 * FIVE_MIN, "overall", EQUILIBRIUM)]


def test_threshold_examples(caplog):
    base = (int(T0) // FIVE_MIN) * FIVE_MIN
    rules = ThresholdRules(ntp_bps=8e6)  # 1e6 B/s ceiling
    below = flows([base + 10], [0x0A000001], [0x0B000001], [40000], [17],
                  [int(0.5 * 1e6 * FIVE_MIN)], sport=[123])
    assert threshold_detect(below, rules) == []
    above = flows([base + 10], [0x0A000001], [0x0B000001], [40000], [17],
                  [int(2 * 1e6 * FIVE_MIN)], sport=[123])
    assert threshold_detect(above, rules) == [
        Interval(float(base), float(base + FIVE_MIN), NTP, THRESHOLD)]
    out = threshold_detect(below, ThresholdRules(ntp_bps=0))
    assert len(out) == 1 and "every bin will be flagged" in caplog.text


def test_expected_volume_short_event():
    s = _stream([50, 100, 900, 900, 60])
    assert expected_volume(s, 2 * FIVE_MIN, 4 * FIVE_MIN, 2) == 100.0


def test_expected_volume_long_event():
    per_day = DAY // FIVE_MIN
    rates = np.full(7 * per_day, 80.0)
    peak = 3 * per_day + 12 * HOUR // FIVE_MIN
    rates[peak - 12:peak + 12] = 5000.0
    excluded = np.zeros(len(rates), dtype=bool)
    excluded[peak - 12:peak + 12] = True
    s = _stream(rates)
    start, end = float(s.bin_start(peak - 12)), float(s.bin_start(peak + 12))
    assert expected_volume(s, start, end, peak, excluded) == 80.0
    assert expected_volume(_stream([5.0] * 20), 0.0, 2 * HOUR, 5, np.ones(20, bool)) is None


def test_zeta_definition():
    # 10-min spike at 200 after a 100 bin
    s = _stream([100, 100, 200, 150, 100, 100])
    eq = [Interval(2 * FIVE_MIN, 4 * FIVE_MIN, NTP, EQUILIBRIUM)]
    ev = corroborate(eq, [], {NTP: s, OVERALL: _stream([0] * 6)})[0]
    assert (ev.kind, ev.v_peak, ev.v_exp, ev.zeta) == (NTP_AMP, 200.0, 100.0, 2.0)
    assert ev.confirmed


def test_zeta_times_expected_is_peak(rng):
    for _ in range(200):
        r = rng.uniform(1, 1e9, 6)
        s = _stream(r)
        ev = corroborate([Interval(2 * FIVE_MIN, 4 * FIVE_MIN, NTP, EQUILIBRIUM)], [],
                         {NTP: s, OVERALL: _stream([0] * 6)})[0]
        assert ev.zeta * ev.v_exp == pytest.approx(ev.v_peak, rel=2.3e-16, abs=0)


def test_corroboration_rules():
    s = _stream([100, 100, 150, 100, 100, 100])
    streams = {NTP: s, OVERALL: _stream([100, 100, 300, 100, 100, 100])}
    iv_eq = Interval(2 * FIVE_MIN, 3 * FIVE_MIN, NTP, EQUILIBRIUM)
    iv_th = Interval(2 * FIVE_MIN, 3 * FIVE_MIN, NTP, THRESHOLD)
    both = corroborate([iv_eq], [iv_th], streams)
    assert len(both) == 1 and both[0].confirmed and both[0].zeta == 1.5
    only_th = corroborate([], [iv_th], streams)[0]
    assert not only_th.confirmed and only_th.zeta == 1.5
    other = corroborate([Interval(2 * FIVE_MIN, 3 * FIVE_MIN, OVERALL, EQUILIBRIUM)], [], streams)[0]
    assert other.kind == OTHER and other.zeta == 3.0 and other.confirmed


def test_confirmation_is_monotone():
    for zeta in (None, 0.5, 1.5, 2.0, 9.0):
        for dets in ((), (EQUILIBRIUM,), (THRESHOLD,)):
            more = tuple(sorted(set(dets) | {EQUILIBRIUM, THRESHOLD}))
            assert is_confirmed(more, zeta) >= is_confirmed(dets, zeta)


def _event(kind, day, zeta=3.0):
    start = CAL.epoch_of(day) + 12 * HOUR
    return AnomalyEvent(kind, start, start + 600, (EQUILIBRIUM,), 3.0, 1.0, zeta, True)


def test_anomaly_change_table():
    from datetime import date, timedelta
    assert anomaly_change_table([], CAL) == []
    evs = [_event(NTP_AMP, CAL.before[0] + timedelta(i)) for i in range(0, 19, 7)]
    evs += [_event(NTP_AMP, CAL.after[0] + timedelta(i)) for i in range(0, 52, 2)]
    evs += [_event(DNS_AMP, date(2020, 4, 2))]
    rows = {r["kind"]: r for r in anomaly_change_table(evs, CAL)}
    ntp = rows[NTP_AMP]
    assert ntp["before"]["count"] == 3 and ntp["after"]["count"] == 26
    assert ntp["per_day_ratio"] == pytest.approx((26 / 52) / (3 / 19))
    assert rows[DNS_AMP]["per_day_ratio"] is None
