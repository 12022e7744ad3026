"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line (with its runtime) that is printed in the
terminal summary.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import functools
import hashlib
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest

from flowshift import change, mg, synth
from flowshift.anomaly import detect
from flowshift.cli import check_conservation, main
from flowshift.flows import upsample
from flowshift.orgs import load_directory, parse_prefix24
from flowshift.stats import wmw_pvalues
from flowshift.store import aggregate, save_store
from flowshift.table import FlowTable

from conftest import ACCEPTANCE_LINES, rec
from oracles import combination_table, enumerate_wmw

pytestmark = pytest.mark.slow


@contextmanager
def criterion(number, title, budget):
    t0 = time.perf_counter()
    info = {}
    try:
        yield info
        elapsed = time.perf_counter() - t0
        ok = elapsed < budget
        status = "PASS" if ok else "FAIL"
        detail = info.get("detail", "")
        ACCEPTANCE_LINES.append(f"[{status}] {number}. {title}: {detail} ({elapsed:.1f} s, "
                                f"limit {budget:.0f} s)")
        print(ACCEPTANCE_LINES[-1])
        assert ok, f"runtime {elapsed:.1f} s over {budget} s"
    except Exception as exc:
        elapsed = time.perf_counter() - t0
        if not ACCEPTANCE_LINES or not ACCEPTANCE_LINES[-1].startswith(f"[FAIL] {number}."):
            ACCEPTANCE_LINES.append(f"[FAIL] {number}. {title}: {exc} ({elapsed:.1f} s)")
            print(ACCEPTANCE_LINES[-1])
        raise


@functools.lru_cache(maxsize=None)
def corpus(name):
    return synth.generate(synth.PRESETS[name]())


@functools.lru_cache(maxsize=None)
def written(name, root):
    return synth.write_scenario(corpus(name), os.path.join(root, name))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance"))


def directory_of(paths):
    return load_directory(paths["org_db"], paths["local_prefixes"], paths["anon_map"])


def gt_labels(paths, directory):
    gt, _ = mg.expand_ground_truth(paths["gt_prefixes"])
    return {directory.anon_prefix(p): a for p, a in gt.items()
            if directory.anon_prefix(p) is not None}


# 1 ---------------------------------------------------------------------------

def test_criterion_1_upsampling():
    with criterion(1, "up-sampling exactness", 1) as info:
        a = upsample(rec(pkts=13, nbytes=18_000, rate=100))
        b = upsample(rec(pkts=2, nbytes=2_560, rate=4096))
        assert (a.packets, a.bytes) == (1_300, 1_800_000)
        assert (b.packets, b.bytes) == (8_192, 10 * 2 ** 20)
        info["detail"] = f"{a.packets}/{a.bytes} and {b.packets}/{b.bytes}"


# 2 ---------------------------------------------------------------------------

def test_criterion_2_wmw_oracle():
    with criterion(2, "WMW exact vs enumeration, normal vs exact", 120) as info:
        rng = np.random.default_rng(20200314)
        worst, cases = 0.0, 0
        for m in range(1, 9):
            for n in range(1, 9):
                combos = combination_table(m, n)
                for _ in range(200):
                    while True:
                        hi = int(rng.integers(1, 6))
                        before = rng.integers(0, hi + 1, m)
                        after = rng.integers(0, hi + 1, n)
                        if len(np.unique(np.concatenate([before, after]))) > 1:
                            break
                    p_less, p_greater, _, used = wmw_pvalues(before, after, "exact")
                    want_less, want_greater = enumerate_wmw(before, after, combos)
                    assert used == "exact"
                    worst = max(worst, abs(p_less - float(want_less)),
                                abs(p_greater - float(want_greater)))
                    cases += 1
        assert worst <= 1e-12, f"max exact error {worst:.2e}"
        gap = 0.0
        for _ in range(200):
            before = rng.integers(0, 30, 20)
            after = rng.integers(0, 30, 20) + int(rng.integers(0, 8))
            ex = wmw_pvalues(before, after, "exact")
            no = wmw_pvalues(before, after, "normal")
            gap = max(gap, abs(ex[0] - no[0]), abs(ex[1] - no[1]))
        assert gap <= 0.02, f"normal approximation off by {gap:.4f}"
        info["detail"] = f"{cases} exact cases, max error {worst:.1e}; normal gap {gap:.4f}"


# 3 ---------------------------------------------------------------------------

def test_criterion_3_mg_recovery(workdir):
    with criterion(3, "meeting/gaming prefix recovery", 300) as info:
        c = corpus("mg")
        paths = written("mg", workdir)
        d = directory_of(paths)
        gt, _ = mg.expand_ground_truth(paths["gt_prefixes"])
        res = mg.build_known_mg(c.table, d, gt, mg.load_gt_ports(paths["gt_ports"]))
        truth = {parse_prefix24(k): v for k, v in c.truth.mg_prefixes.items()}
        assert len(truth) == 40 and len({v["app"] for v in truth.values()}) == 7
        labels = res.known.label_map()
        right = weight_right = weight = 0
        for p, v in truth.items():
            got = res.gt_votes.get(p, (None,))[0] if v["ground_truth"] else labels.get(p)
            right += got == v["app"]
            weight += v["bytes"]
            weight_right += v["bytes"] if got == v["app"] else 0
        acc, wacc = right / len(truth), weight_right / weight
        false_known = [p for p in labels if p not in truth]
        assert acc >= 0.95, f"prefix accuracy {acc:.3f}"
        assert wacc >= 0.99, f"traffic-weighted accuracy {wacc:.4f}"
        assert not false_known, f"{len(false_known)} non-mg prefixes listed"
        info["detail"] = (f"prefix accuracy {acc:.3f}, weighted {wacc:.4f}, held-out vector "
                          f"accuracy {res.report.accuracy:.3f}")


# 4 ---------------------------------------------------------------------------

PLANTED = {"https": (0.46, "down"), "vpn": (5.54, "up"), "steam": (0.14, "down"),
           "unidata": (1.04, "up"), "ntp": (0.96, "down")}


def test_criterion_4_change_recovery(workdir):
    with criterion(4, "application change table recovery", 300) as info:
        c = corpus("change")
        paths = written("change", workdir)
        d = directory_of(paths)
        store = aggregate(c.table, d, mg=gt_labels(paths, d))
        rows = {r.label: r for r in change.app_change_table(store, c.spec.calendar)}
        cells = []
        for label, (mult, direction) in PLANTED.items():
            cell = rows[label].work
            assert cell is not None, f"{label}: no work-hours result"
            assert cell.direction == direction, f"{label}: {cell.direction} != {direction}"
            assert abs(cell.ratio - mult) <= 0.05, f"{label}: ratio {cell.ratio:.3f} vs {mult}"
            cells.append(f"{label} {cell.percent()}% {cell.direction}")
        info["detail"] = ", ".join(cells)


# 5 ---------------------------------------------------------------------------

def _jaccard(a0, a1, b0, b1):
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / (max(a1, b1) - min(a0, b0))


def test_criterion_5_anomaly_recovery():
    with criterion(5, "anomaly recovery", 300) as info:
        c = corpus("anomaly")
        events = detect(c.table)
        planted = [a for a in c.truth.anomalies if not a["decoy"]]
        decoys = [a for a in c.truth.anomalies if a["decoy"]]
        kinds = [a["kind"] for a in planted]
        assert len(planted) == 12 and all(kinds.count(k) >= 2 for k in set(kinds))
        assert all(3 <= a["zeta"] <= 50 for a in planted)
        worst_overlap, worst_zeta = 1.0, 0.0
        for a in planted:
            hits = [(e, _jaccard(e.start, e.end, a["start"], a["end"])) for e in events
                    if e.confirmed and e.start < a["end"] and a["start"] < e.end]
            assert hits, f"{a['kind']} at {a['start']} not confirmed"
            e, j = max(hits, key=lambda h: h[1])
            assert j >= 0.8, f"{a['kind']} overlap {j:.2f}"
            err = abs(e.zeta / a["zeta"] - 1)
            assert err <= 0.1, f"{a['kind']} zeta {e.zeta:.2f} vs {a['zeta']}"
            worst_overlap, worst_zeta = min(worst_overlap, j), max(worst_zeta, err)
        assert decoys and all(a["zeta"] == 1.5 for a in decoys)
        for a in decoys:
            near = [e for e in events if e.start < a["end"] and a["start"] < e.end]
            assert not any(e.confirmed for e in near), "decoy confirmed"
        clean = detect(corpus("anomaly-clean").table)
        n_clean = sum(e.confirmed for e in clean)
        assert n_clean == 0, f"{n_clean} confirmed events on the clean corpus"
        info["detail"] = (f"12/12 confirmed, min overlap {worst_overlap:.2f}, max zeta error "
                          f"{100 * worst_zeta:.1f}%, decoy unconfirmed, clean corpus 0 confirmed")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_liveness(workdir):
    with criterion(6, "liveness recovery", 120) as info:
        c = corpus("liveness")
        d = directory_of(written("liveness", workdir))
        records, counts = change.liveness_analysis(c.table, d, c.spec.calendar)
        truth = {parse_prefix24(k): v for k, v in c.truth.liveness.items()}
        assert sorted(truth.values()).count("inc") == 20 == sorted(truth.values()).count("dec")
        got = {r.prefix: r.trend for r in records}
        agree = sum(got.get(p) == v for p, v in truth.items()) / len(truth)
        assert agree >= 0.95, f"agreement {agree:.3f}"
        for cat, entry in counts.items():
            total = entry["inc_pct"] + entry["same_pct"] + entry["dec_pct"]
            assert abs(total - 100) < 1e-9, f"{cat} percentages sum to {total}"
        info["detail"] = f"agreement {agree:.3f} over {len(truth)} prefixes"


# 7 ---------------------------------------------------------------------------

def _digest(path):
    out = {}
    for dirpath, _, files in os.walk(path):
        for f in sorted(files):
            full = os.path.join(dirpath, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, path)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_criterion_7_determinism_and_conservation(workdir):
    with criterion(7, "determinism and conservation", 600) as info:
        runs = []
        for name in ("a", "b"):
            root = os.path.join(workdir, f"rerun-{name}")
            assert main(["synth", "--preset", "demo", "--seed", "1", "--out", root]) == 0
            cfg = os.path.join(root, "run.yaml")
            for cmd in ("classify", "change", "liveness", "anomaly"):
                assert main(["--config", cfg, cmd]) == 0, cmd
            runs.append(_digest(root))
        assert runs[0] == runs[1], "reruns differ"
        checked = []
        for name in sorted(synth.PRESETS):
            paths = written(name, workdir)
            d = directory_of(paths)
            table = corpus(name).table
            store = aggregate(table, d, mg=gt_labels(paths, d))
            totals = check_conservation(store, table)  # raises on any mismatch
            assert totals["bytes"] == corpus(name).truth.totals["bytes"]
            checked.append(name)
        info["detail"] = (f"rerun identical over {len(runs[0])} files; conservation exact on "
                          f"{', '.join(checked)}")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_throughput(workdir):
    paths = written("anomaly", workdir)
    with criterion(8, "classify throughput", 60) as info:
        table, report = FlowTable.read_csv(paths["flows"])
        assert not report
        d = directory_of(paths)
        store = aggregate(table, d, mg=gt_labels(paths, d))
        check_conservation(store, table)
        save_store(store, os.path.join(workdir, "throughput-store"))
        assert len(table) >= 1_000_000, f"only {len(table)} flows"
        info["detail"] = f"{len(table):,} flows parsed, classified and stored"


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
