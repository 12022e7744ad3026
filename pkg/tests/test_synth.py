import io
from datetime import date, timedelta

import numpy as np
import pytest

from flowshift import InputError
from flowshift.change import FIVE_MIN_G, Series, quantify
from flowshift.flows import DAY, FIVE_MIN, HOUR, StudyCalendar, work_mask
from flowshift.synth import (
    PRESETS, AnomalySpec, OrgSpec, PrefixAnonymizer, ScenarioSpec, SeriesSpec, _sample,
    anonymize_prefixes, expected_series, generate, load_scenario, write_scenario,
)
from flowshift.table import PREFIX_MASK

from conftest import columns


def cal_weeks(before_days=14, after_days=13):
    b0 = date(2020, 3, 2)
    return StudyCalendar(before=(b0, b0 + timedelta(before_days - 1)),
                         transition=(b0 + timedelta(before_days), b0 + timedelta(before_days)),
                         after=(b0 + timedelta(before_days + 1),
                                b0 + timedelta(before_days + after_days)))


def small_spec(seed=0, **kw):
    orgs = [OrgSpec("E01", "Uni", "education", 2, True), OrgSpec("I01", "ISP", "isp", 4)]
    series = [SeriesSpec("https", "E01", "I01", "inbound", 2e6, 3, {"work": 0.5, "rest": 0.8}),
              SeriesSpec("ssh", "E01", "I01", "outbound", 1e5, 2, 2.0)]
    cal = StudyCalendar(before=(date(2020, 3, 2), date(2020, 3, 3)),
                        transition=(date(2020, 3, 4), date(2020, 3, 4)),
                        after=(date(2020, 3, 5), date(2020, 3, 6)))
    return ScenarioSpec(seed=seed, calendar=cal, orgs=orgs, series=series, **kw)


def _csv(corpus):
    buf = io.StringIO()
    corpus.table.write_csv(buf)
    return buf.getvalue()


def test_same_seed_is_byte_identical(tmp_path):
    a, b = generate(small_spec(4)), generate(small_spec(4))
    assert _csv(a) == _csv(b)
    pa = write_scenario(a, tmp_path / "a")
    pb = write_scenario(b, tmp_path / "b")
    for key in pa:
        assert open(pa[key], "rb").read() == open(pb[key], "rb").read(), key
    assert _csv(generate(small_spec(5))) != _csv(a)


def test_scenario_yaml_round_trip(tmp_path):
    corpus = generate(small_spec(2))
    paths = write_scenario(corpus, tmp_path)
    spec = load_scenario(paths["scenario"])
    assert _csv(generate(spec)) == _csv(corpus)


def test_zero_noise_gives_exact_multipliers():
    spec = small_spec(1, noise=0.0, key_noise=0.0, size_sigma=0.0, sampling_rate=1,
                      anonymize=False)
    spec.series = [SeriesSpec("https", "E01", "I01", "inbound", 1e7, 1,
                              {"work": 0.5, "rest": 0.8})]
    t = generate(spec).table
    cal = spec.calendar
    work = work_mask(t.ts_start, cal)

    def day_bytes(day, w):
        lo = cal.epoch_of(day)
        sel = (t.ts_start >= lo) & (t.ts_start < lo + DAY) & (work == w)
        return float(t.bytes[sel].sum())
    # Monday before vs Thursday after share the same weekday diurnal shape
    for w, mult in ((True, 0.5), (False, 0.8)):
        ratio = day_bytes(date(2020, 3, 5), w) / day_bytes(date(2020, 3, 2), w)
        assert ratio == pytest.approx(mult, rel=1e-4)
    grid = np.arange(cal.epoch_of(date(2020, 3, 2)), cal.epoch_of(date(2020, 3, 7)), FIVE_MIN,
                     dtype=float)
    level = expected_series(spec, spec.series[0], grid)
    monday, thursday = level[:288], level[3 * 288:4 * 288]
    wm = work_mask(grid[:288], cal)
    assert np.allclose(thursday[wm] / monday[wm], 0.5) and np.allclose(thursday[~wm] / monday[~wm], 0.8)


@pytest.mark.slow
def test_planted_total_multiplier_is_measured():
    cal = cal_weeks()
    spec = ScenarioSpec(seed=8, calendar=cal,
                        orgs=[OrgSpec("E01", "Uni", "education", 2, True),
                              OrgSpec("I01", "ISP", "isp", 8)],
                        series=[SeriesSpec("https", "E01", "I01", "inbound", 3e6, 6, 0.70)])
    t = generate(spec).table
    b = (np.floor(t.ts_start / FIVE_MIN) * FIVE_MIN).astype(np.int64)
    grid = np.arange(b.min(), b.max() + 1, FIVE_MIN)
    vol = np.bincount((b - grid[0]) // FIVE_MIN, weights=t.bytes.astype(float), minlength=len(grid))
    res = quantify(Series(("total",), FIVE_MIN_G, grid, vol), cal)
    assert 0.67 <= res.ratio <= 0.73


def test_sampling_is_unbiased_and_tightens(rng):
    errs = []
    for n in (2_000, 200_000):
        packets = rng.integers(1, 5000, n)
        rate = np.full(n, 100)
        est = _sample(rng, packets, rate) * rate
        errs.append(abs(est.sum() / packets.sum() - 1))
    assert errs[1] < 0.01 and errs[1] < errs[0] + 1e-3


def test_anonymizer_bijection(rng):
    anon = PrefixAnonymizer(17)
    ips = rng.integers(0, 2 ** 32, 5000)
    assert np.array_equal(anon.inverse(anon.forward(ips)), ips)
    assert len(np.unique(anon.forward(ips))) == len(np.unique(ips))
    # hosts keep their last octet, /16 siblings stay siblings
    a, b = anon.forward([0x0A010203, 0x0A01FF09])
    assert a >> 16 == b >> 16 and a & 255 == 3 and b & 255 == 9
    other = PrefixAnonymizer(18).forward(ips)
    assert not np.array_equal(other, anon.forward(ips))


def test_anonymize_table_and_map(rng):
    t = columns(500, rng)
    out, amap = anonymize_prefixes(t, 5)
    inv = PrefixAnonymizer(5).inverse(out.src_ip)
    assert np.array_equal(inv, t.src_ip)
    for a, r in amap.items():
        assert PrefixAnonymizer(5).forward([r])[0] == a
    assert set(amap.values()) == set(np.unique(np.concatenate([t.src_ip, t.dst_ip]) & PREFIX_MASK).tolist())


@pytest.mark.parametrize("mutate", [
    lambda s: s.orgs.append(OrgSpec("E01")),
    lambda s: setattr(s.orgs[0], "category", "military"),
    lambda s: s.series.append(SeriesSpec("nonsense", "E01", "I01")),
    lambda s: s.series.append(SeriesSpec("https", "E01", "NOPE")),
    lambda s: s.series.append(SeriesSpec("https", "E01", "I01", multiplier=0)),
    lambda s: s.anomalies.append(AnomalySpec("ntp_amp", "2020-03-02T10:02:00Z", 30, 3.0, "E01")),
    lambda s: s.anomalies.append(AnomalySpec("ntp_amp", "2020-03-02T18:00:00Z", 30, 1.0, "E01")),
    lambda s: s.anomalies.append(AnomalySpec("ntp_amp", "2021-01-01T00:00:00Z", 30, 3.0, "E01")),
])
def test_invalid_specs_rejected(mutate):
    spec = small_spec()
    mutate(spec)
    with pytest.raises(InputError):
        generate(spec)


def test_bad_yaml_entry(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("orgs:\n  - {id: E01, colour: red}\n")
    with pytest.raises(InputError):
        load_scenario(p)


def test_presets_validate():
    for name, make in PRESETS.items():
        make().validate()
