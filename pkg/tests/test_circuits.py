from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digitlab.circuits import (CircuitSpec, candidate_sources, greedy_search, iou, kept_only_eval, kept_only_plan,
                               overlap_stats, retained_prefix, scan_relation, sweep_overlap, threshold_sweep,
                               write_edge_list)
from digitlab.evalkit import exact_accuracy
from digitlab.taskgen import PROMPT_STREAMS, make_split, split_examples

CURVE = [1.0, 0.97, 0.95, 0.949, 0.949, 0.949]


def oracle_rule(curve, baseline, first_thr, frac):
    """Plain transcription of the retention rule over a fully materialised curve."""
    drops = [baseline - a for a in curve]
    start = next((k for k, d in enumerate(drops) if d > first_thr), None)
    if start is None:
        return None
    first, best, misses = drops[start], start, 0
    for k in range(start + 1, len(curve)):
        if curve[k - 1] - curve[k] > frac * first:
            best, misses = k, 0
        else:
            misses += 1
            if misses == 2:
                break
    return best


def test_hand_traced_curve():
    assert oracle_rule(CURVE, 1.0, 0.02, 0.2) == 2
    assert retained_prefix(CURVE.__getitem__, 1.0, 5, 0.02, 0.2) == 2


class FakeScorer:
    """Scores from a table {(src, dst): curve}; untouched routes stay at baseline."""

    def __init__(self, curves, n_layers=6, baseline=1.0):
        self.curves = curves
        self.baseline = baseline
        self.state = SimpleNamespace(config=SimpleNamespace(n_layers=n_layers))
        self.calls = []

    def __call__(self, rel, k):
        self.calls.append((rel, k))
        return self.curves.get(rel, [self.baseline] * 99)[k]


def test_scan_relation_masks_one_route():
    sc = FakeScorer({("D_ones", "O[0]"): CURVE})
    assert scan_relation(sc, ("D_ones", "O[0]"), 5, (0.02, 0.2)) == 2
    assert {r for r, _ in sc.calls} == {("D_ones", "O[0]")}
    assert scan_relation(sc, ("N_tag", "O[0]"), 5) is None


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.sampled_from([0.01, 0.02, 0.05]),
       st.sampled_from([0.1, 0.2, 0.3]))
def test_rule_matches_oracle_and_is_prefix(curve, f, g):
    k = retained_prefix(curve.__getitem__, 1.0, len(curve) - 1, f, g)
    assert k == oracle_rule(curve, 1.0, f, g)
    if k is not None:
        assert 0 <= k < len(curve)


def test_candidate_sources():
    assert candidate_sources("O[0]") == list(PROMPT_STREAMS)
    assert candidate_sources("O[1]")[-1] == "O[0]"
    assert candidate_sources("B_tag") == ["N_tag", "N_hundreds", "N_tens", "N_ones"]
    assert candidate_sources("N_tag") == []
    with pytest.raises(ValueError):
        candidate_sources("E")


def test_greedy_search_right_to_left_depths():
    curves = {
        ("D_ones", "O[0]"): [0.9, 0.8, 0.8, 0.8, 0.8, 0.8],            # k* = 1 (0 -> first drop 0.1; 1 extends)
        ("B_ones", "O[1]"): [1.0, 1.0, 1.0, 0.9, 0.9, 0.9],            # k* = 3
        ("O[0]", "O[1]"): [0.5] * 6,                                     # k* = 0
        ("B_tens", "B_ones"): [1.0, 0.97, 0.95, 0.949, 0.949, 0.949],   # k* = 2 within depth 3
        ("N_ones", "D_ones"): [1.0, 0.9, 0.9, 0.9, 0.9, 0.9],           # scanned up to depth 1 only
    }
    sc = FakeScorer(curves)
    spec = greedy_search(sc, (0.02, 0.2), seed=7)
    assert spec.relations == {("D_ones", "O[0]"): 1, ("B_ones", "O[1]"): 3, ("O[0]", "O[1]"): 0,
                              ("B_tens", "B_ones"): 2, ("N_ones", "D_ones"): 1}
    assert spec.destinations == {"O[1]": 5, "O[0]": 5, "D_ones": 1, "B_ones": 3, "B_tens": 2, "N_ones": 1}
    assert spec.provenance[("B_tens", "B_ones")] == "B_ones"
    # D_ones scans never probe beyond its retained depth
    assert max(k for (s, d), k in sc.calls if d == "D_ones") <= 1
    f = spec.fractions()
    assert f["retained_relations"] == 5
    assert f["candidate_relations"] == 10 + 9 + 8 + 6 + 5 + 3
    assert f["retained_layer_edges"] == 2 + 4 + 1 + 3 + 2


def test_spec_json_round_trip(tmp_path):
    sc = FakeScorer({("D_ones", "O[0]"): CURVE})
    spec = greedy_search(sc, seed=0)
    spec.save(tmp_path / "c.json")
    back = CircuitSpec.load(tmp_path / "c.json")
    assert back.relations == spec.relations and back.destinations == spec.destinations
    assert back.thresholds == spec.thresholds and back.fractions() == spec.fractions()
    write_edge_list(spec, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[1] == "D_ones,O[0],0,2,O[0]"


def test_kept_only_plan_extremes():
    full = CircuitSpec(3, (0.02, 0.2), destinations={"O[0]": 2, "O[1]": 2})
    for d in full.destinations:
        for s in candidate_sources(d):
            full.relations[(s, d)] = 2
    assert kept_only_plan(full).logit_masks == ()
    empty = CircuitSpec(3, (0.02, 0.2), destinations={"O[0]": 2, "O[1]": 2})
    edges = {(l, q, k) for l, q, k, _ in kept_only_plan(empty).logit_masks}
    assert len(edges) == 3 * (9 + 10)


def test_kept_only_with_everything_retained_is_clean(tiny_state):
    val = split_examples(make_split(0))["validation"][:150]
    full = CircuitSpec(2, (0.02, 0.2), destinations={"O[0]": 1, "O[1]": 1})
    for d in full.destinations:
        for s in candidate_sources(d):
            full.relations[(s, d)] = 1
    assert kept_only_eval(tiny_state, full, val) == exact_accuracy(tiny_state, val)


def test_iou_and_overlap():
    a = CircuitSpec(5, (0.02, 0.2), relations={("D_ones", "O[0]"): 1, ("B_tens", "O[0]"): 2})
    b = CircuitSpec(5, (0.02, 0.2), relations={("D_ones", "O[0]"): 3})
    assert iou([a.relation_set, a.relation_set, a.relation_set]) == 100.0
    ov = overlap_stats([a, b])
    assert ov["iou"] == 50.0 and ov["n_shared"] == 1
    assert ov["shared"][0]["layers_per_seed"] == [1, 3]
    assert ov["not_shared"] == ["B_tens->O[0]"]
    with pytest.raises(ValueError):
        overlap_stats([a])


def test_threshold_sweep_default_reproduces_default():
    sc = FakeScorer({("D_ones", "O[0]"): CURVE, ("B_ones", "O[0]"): [0.985] * 6})
    specs = threshold_sweep(sc, seed=1)
    assert len(specs) == 9
    default = greedy_search(sc, (0.02, 0.2), seed=1)
    match = [s for s in specs if s.thresholds == (0.02, 0.2)]
    assert match[0].relations == default.relations
    rep = sweep_overlap(specs, default.relation_set)
    assert rep["checks"] == 9
    # the loosest first-drop (0.01) also keeps B_ones->O[0]
    loose = [r for r in rep["rows"] if r["first_drop"] == 0.01]
    assert all(r["extra"] == ["B_ones->O[0]"] for r in loose)
    # at 0.05 the route still qualifies, only later (drop 0.051 at k=3)
    assert rep["contains_all"] == 9
