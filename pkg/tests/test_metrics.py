import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from telad.errors import ContractError
from telad.metrics import (
    EventInterval,
    MetricReport,
    affiliation_prf,
    aggregate,
    comparison_table,
    evaluate_streams,
    expand_events,
    iou,
    jaccard_overlap,
    merge_events,
    pointwise_prf,
    random_baseline,
)

E = EventInterval


def test_merge_examples():
    assert merge_events([0, 1, 1, 0, 1]) == [E(1, 2), E(4, 4)]
    assert merge_events([0, 0, 0]) == []
    assert merge_events([1] * 5) == [E(0, 4)]
    assert merge_events([]) == []


def test_iou_examples():
    assert iou(E(3, 7), E(3, 7)) == 1.0
    assert iou(E(0, 2), E(3, 5)) == 0.0
    assert iou(E(0, 9), E(5, 14)) == pytest.approx(1 / 3)


def test_affiliation_examples():
    assert affiliation_prf([E(0, 9)], [E(5, 14)]) == (1.0, 1.0, 1.0, 1, 0, 0)
    p, r, f, tp, fp, fn = affiliation_prf([E(0, 4)], [E(10, 12)])
    assert (tp, fp, fn, f) == (0, 1, 1, 0.0)


def test_affiliation_tie_and_multi_overlap():
    # one prediction spanning two GT events: one TP, both GT covered
    p, r, f, tp, fp, fn = affiliation_prf([E(0, 1), E(4, 5)], [E(0, 5)])
    assert (tp, fp, fn) == (1, 0, 0) and r == 1.0
    # two predictions on one GT: both TP
    assert affiliation_prf([E(0, 9)], [E(0, 1), E(5, 6)])[3:] == (2, 0, 0)


def test_pointwise_examples():
    assert pointwise_prf([1, 0, 1], [1, 0, 1]) == (1.0, 1.0, 1.0)
    assert pointwise_prf([1, 0, 1], [0, 0, 0]) == (0.0, 0.0, 0.0)
    assert pointwise_prf([1, 0, 1, 0], [1, 1, 0, 0]) == (0.5, 0.5, 0.5)


def test_pointwise_length_mismatch():
    with pytest.raises(ContractError):
        pointwise_prf([1, 0], [1])


def test_aggregate_examples(rng):
    g = rng.integers(0, 2, (20, 1))
    p = rng.integers(0, 2, (20, 1))
    for kind in ("pointwise", "affiliation"):
        vals = {m: aggregate(g, p, m, kind) for m in ("macro", "micro", "union")}
        assert vals["macro"] == pytest.approx(vals["micro"])
        assert vals["union"] == pytest.approx(vals["micro"])
    g2 = np.array([[1, 1], [0, 0]])
    p2 = np.array([[1, 0], [0, 0]])
    assert aggregate(g2, p2, "macro", "pointwise")[2] == 0.5
    with pytest.raises(ContractError):
        aggregate(g2, p2, "weighted")


def test_union_ors_before_merging():
    g = np.array([[1, 0], [0, 1], [0, 0]])
    p = np.array([[0, 1], [0, 0], [0, 0]])
    # union streams: gt [1,1,0] one event, pred [1,0,0] overlaps it
    assert aggregate(g, p, "union", "affiliation") == (1.0, 1.0, 1.0)
    assert aggregate(g, p, "micro", "affiliation")[2] < 1.0


streams = st.integers(1, 30).flatmap(
    lambda n: st.integers(1, 4).flatmap(
        lambda F: st.tuples(
            st.lists(st.lists(st.integers(0, 1), min_size=F, max_size=F), min_size=n, max_size=n),
            st.lists(st.lists(st.integers(0, 1), min_size=F, max_size=F), min_size=n, max_size=n),
        )
    )
)


@settings(max_examples=300, deadline=None)
@given(streams)
def test_matches_brute_force_oracle(pair):
    g_rows, p_rows = pair
    g, p = np.array(g_rows), np.array(p_rows)
    for j in range(g.shape[1]):
        gc, pc = g[:, j].tolist(), p[:, j].tolist()
        P, R, F1, tp, fp, fn = affiliation_prf(merge_events(gc), merge_events(pc))
        otp, ofp, ofn, ng = oracles.counts_affiliation(gc, pc)
        assert (tp, fp, fn) == (otp, ofp, ofn)
        assert (P, R, F1) == oracles.prf_from(otp, ofp, ofn, ng)
        assert pointwise_prf(gc, pc) == oracles.prf_from(*oracles.counts_pointwise(gc, pc))
    for kind in ("pointwise", "affiliation"):
        for mode in ("macro", "micro", "union"):
            assert aggregate(g, p, mode, kind) == pytest.approx(oracles.aggregate(g_rows, p_rows, mode, kind),
                                                                abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_merge_expand_round_trip(s):
    assert expand_events(merge_events(s), len(s)).tolist() == s


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=40).filter(any))
def test_perfect_prediction_scores_one(s):
    ev = merge_events(s)
    assert affiliation_prf(ev, ev)[:3] == (1.0, 1.0, 1.0)
    assert pointwise_prf(s, s) == (1.0, 1.0, 1.0)


def test_multi_ne_lists_pool_counts():
    g1, p1 = np.array([[1], [0]]), np.array([[1], [0]])
    g2, p2 = np.array([[1], [0]]), np.array([[0], [1]])
    assert aggregate([g1, g2], [p1, p2], "micro", "pointwise") == (0.5, 0.5, 0.5)


def test_random_baseline_extremes():
    g = np.zeros((50, 2), int)
    g[:, 1] = 1
    r = random_baseline(g, seed=3)
    assert r[:, 0].sum() == 0 and r[:, 1].all()


def test_random_baseline_precision_is_prevalence():
    rng = np.random.default_rng(2024)
    g = (rng.random((2000, 1)) < 0.05).astype(int)
    prec = [pointwise_prf(g[:, 0], random_baseline(g, seed=s)[:, 0])[0] for s in range(100)]
    pi = g.mean()
    # per-seed precision has variance ~ pi(1-pi)/n_pred; mean over 100 seeds
    sd = np.sqrt(pi * (1 - pi) / (2000 * pi)) / np.sqrt(100)
    assert abs(np.mean(prec) - pi) < 3 * sd + 1e-3


def test_jaccard_examples():
    assert jaccard_overlap({1, 2}, {1, 2}) == 1.0
    assert jaccard_overlap({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
    assert jaccard_overlap({1}, {2}) == 0.0
    assert jaccard_overlap(set(), set()) == 1.0


def test_report_and_tables(rng, tmp_path):
    g = [rng.integers(0, 2, (30, 2))]
    p = [rng.integers(0, 2, (30, 2))]
    rep = evaluate_streams(g, p, ["a", "b"], meta={"method": "x"})
    assert rep.aggregates["affiliation"]["macro"] == aggregate(g, p, "macro", "affiliation")
    assert rep.counts["gt_timestamps"] == int(g[0].sum())
    import json
    d = json.loads(rep.to_json(tmp_path / "r.json"))
    assert d["meta"]["method"] == "x"
    text = rep.table("pointwise")
    assert "Macro" in text and "Union" in text
    both = comparison_table({"ours": rep, "rand": rep})
    assert "ours F1" in both and "rand F1" in both
    assert isinstance(rep, MetricReport)
