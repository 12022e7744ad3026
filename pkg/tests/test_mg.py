import numpy as np
import pytest

from flowshift import InsufficientData
from flowshift.flows import ip_to_int, upsample
from flowshift.mg import (
    GROUND_TRUTH, VERIFIED, BusinessRelations, DecisionTree, KnownMgPrefixes, MgEntry, PortVector,
    covering_24s, expand_ground_truth, extract_vectors, find_candidates, label_prefix,
    load_gt_ports, prune_by_ownership, split_indices, train,
)
from flowshift.orgs import infer_direction

from conftest import T0, rec, table

ZOOM = ip_to_int("10.0.2.0")
ISP = ip_to_int("10.0.3.0")


def test_covering_24s_examples():
    assert covering_24s("198.51.100.128/25") == [ip_to_int("198.51.100.0")]
    assert covering_24s("198.51.100.0/23") == [ip_to_int("198.51.100.0"), ip_to_int("198.51.101.0")]
    assert covering_24s("198.51.100.0/24") == [ip_to_int("198.51.100.0")]


def test_ground_truth_conflict_keeps_first(caplog):
    gt, conflicts = expand_ground_truth([("zoom", "10.0.0.0/23"), ("webex", "10.0.1.0/24")])
    assert gt == {ip_to_int("10.0.0.0"): "zoom", ip_to_int("10.0.1.0"): "zoom"}
    assert conflicts == [(ip_to_int("10.0.1.0"), "zoom", "webex")]


def test_gt_ports_file():
    ports = load_gt_ports()
    assert (6, 8801) in ports["zoom"] and (17, 8810) in ports["zoom"]
    assert (17, 27050) in ports["steam"]


def _server_flows(small_dir, counts, hour_offset=0.0):
    flows = []
    for port, n in counts.items():
        for i in range(n):
            r = rec(src="10.0.2.7", dst="10.0.0.1", sport=port, dport=50000 + i,
                    ts=T0 + hour_offset + i)
            flows.append(infer_direction(upsample(r), small_dir))
    return flows


def test_vector_example(small_dir):
    vs = extract_vectors(_server_flows(small_dir, {8801: 60, 443: 30}), [ZOOM], width=4)
    assert len(vs) == 1
    assert vs[0].ports == (0, 0, 443, 8801) and vs[0].flow_count == 90


def test_vector_below_threshold_and_empty(small_dir):
    assert extract_vectors(_server_flows(small_dir, {8801: 49}), [ZOOM]) == []
    assert extract_vectors([], [ZOOM]) == []
    assert extract_vectors(_server_flows(small_dir, {8801: 60}), [ISP]) == []


def test_vector_width_keeps_most_frequent(small_dir):
    flows = _server_flows(small_dir, {8801: 40, 443: 20, 3478: 10, 80: 5})
    v = extract_vectors(flows, [ZOOM], width=2)[0]
    assert v.ports == (443, 8801) and v.flow_count == 75


def test_vector_permutation_invariant(small_dir, rng):
    flows = _server_flows(small_dir, {8801: 60, 443: 30, 3478: 12})
    flows += _server_flows(small_dir, {8801: 70}, hour_offset=3600)
    a = extract_vectors(flows, [ZOOM])
    b = extract_vectors([flows[i] for i in rng.permutation(len(flows))], [ZOOM])
    assert a == b and len(a) == 2


def test_vector_count_monotone_in_threshold(small_dir):
    flows = []
    for h, n in enumerate([10, 30, 50, 70, 90]):
        flows += _server_flows(small_dir, {8801: n}, hour_offset=h * 3600)
    sizes = [len(extract_vectors(flows, [ZOOM], min_flows=m)) for m in (1, 20, 50, 80, 100)]
    assert sizes == sorted(sizes, reverse=True) == [5, 4, 3, 1, 0]


def _profile_vectors(rng, n):
    out = []
    for i in range(n):
        if i % 2:
            ports, lab = (0,) * 13 + (80, 443, 8801), "zoom"
        else:
            ports, lab = (0,) * 13 + (443, 5004, 9000), "webex"
        out.append(PortVector(i, i, ports, int(rng.integers(50, 500)), lab))
    return out


def test_train_separable_profiles(rng):
    tree, report = train(_profile_vectors(rng, 200), seed=3)
    assert report.accuracy == 1.0
    assert report.n_train == report.n_test == 100
    assert tree.depth <= 12


def test_train_is_deterministic(rng):
    vs = _profile_vectors(rng, 300)
    a, _ = train(vs, seed=9)
    b, _ = train(vs, seed=9)
    assert a.dumps() == b.dumps()
    assert DecisionTree.from_dict(a.to_dict()).dumps() == a.dumps()


def test_split_sizes():
    tr, te = split_indices(1000, 0.5, 0)
    assert len(tr) == len(te) == 500
    assert not set(tr.tolist()) & set(te.tolist())


def test_degenerate_training():
    vs = [PortVector(i, 0, (443,), 60, "zoom") for i in range(20)]
    with pytest.raises(InsufficientData):
        train(vs)


def _stub_tree():
    # feature 0 <= 0.5 -> zoom leaf, otherwise webex leaf; both fully pure
    return DecisionTree(classes=["webex", "zoom"], feature=[0, -1, -1], threshold=[0.5, 0.0, 0.0],
                        left=[1, -1, -1], right=[2, -1, -1], counts=[[10, 10], [0, 10], [10, 0]])


def _vec(first):
    return PortVector(0, 0, (first, 443), 60)


def test_label_prefix_votes():
    tree = _stub_tree()
    label, frac = label_prefix(tree, [_vec(0)] * 7 + [_vec(1)] * 3)
    assert label == "zoom" and frac == pytest.approx(0.7)
    assert label_prefix(tree, [_vec(0)] * 5 + [_vec(1)] * 5) == ("webex", 0.5)
    assert label_prefix(tree, [_vec(1)]) == ("webex", 1.0)
    with pytest.raises(InsufficientData):
        label_prefix(tree, [])


def test_label_prefix_tie_prefers_confidence():
    tree = DecisionTree(classes=["webex", "zoom"], feature=[0, -1, -1], threshold=[0.5, 0.0, 0.0],
                        left=[1, -1, -1], right=[2, -1, -1], counts=[[10, 10], [0, 10], [9, 1]])
    assert label_prefix(tree, [_vec(0)] * 2 + [_vec(1)] * 2) == ("zoom", 0.5)


def test_find_candidates_examples():
    gt_ports = load_gt_ports()
    server = ip_to_int("10.0.3.0")
    t = table([rec(src="10.0.3.9", dst="10.0.0.1", sport=8801, dport=50000, proto=17)])
    assert find_candidates(t, gt_ports) == {server}
    t = table([rec(src="10.0.3.9", dst="10.0.0.1", sport=8801, dport=443, proto=6)])
    assert server not in find_candidates(t, gt_ports)
    t = table([rec(src="10.0.3.9", dst="10.0.0.1", sport=8801, dport=50000, proto=17)])
    assert find_candidates(t, gt_ports, exclude=[server]) == set()


def test_prune_examples(tmp_path):
    from conftest import write_lines
    from flowshift.orgs import load_directory
    db = write_lines(tmp_path / "db.csv", [
        "10.0.2.0/24,B01,Amazon.com,business",
        "10.0.3.0/24,I01,ExampleISP,isp",
        "10.0.4.0/24,B02,Cisco Systems,business",
    ])
    d = load_directory(db, write_lines(tmp_path / "l.txt", []))
    cisco = ip_to_int("10.0.4.0")
    kept = prune_by_ownership({ZOOM: ("zoom", 0.9), ISP: ("gmeet", 1.0), cisco: ("webex", 0.8)},
                              d, BusinessRelations())
    assert sorted(kept.entries) == [ZOOM, cisco]
    assert kept.entries[ZOOM] == MgEntry("zoom", VERIFIED, 0.9)


def test_known_list_round_trip_and_gt_protection(tmp_path):
    k = KnownMgPrefixes()
    k.add(ZOOM, MgEntry("zoom", GROUND_TRUTH))
    assert not k.add(ZOOM, MgEntry("webex", VERIFIED, 0.9))
    assert k.add(ISP, MgEntry("webex", VERIFIED, 0.75))
    k.save(tmp_path / "known.csv")
    back = KnownMgPrefixes.load(tmp_path / "known.csv")
    assert back == k
    assert back.counts()["zoom"] == {GROUND_TRUTH: 1, VERIFIED: 0}
    assert back.label_map() == {ZOOM: "zoom", ISP: "webex"}


def test_tree_fits_training_data_exactly_when_unconstrained(rng):
    X = rng.integers(0, 4, (120, 3)).astype(float)
    y = ["a" if x[0] + x[1] > 3 else "b" for x in X]
    tree = DecisionTree(max_depth=20, min_leaf=1).fit(X, y)
    assert tree.predict(X) == y
    assert np.isclose(sum(tree.counts[0]), 120)
