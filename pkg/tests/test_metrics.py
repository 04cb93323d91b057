import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from digrec.metrics import MetricReport, auc, collision_rate, recall_ndcg_at_k, render_table, utilization


def test_auc_separated():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_constant():
    assert auc([3.0] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_hand_value():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def _pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    return ((pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()) / (len(pos) * len(neg))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, 12, elements=st.integers(-20, 20)), st.integers(0, 10_000))
def test_auc_matches_pairwise_and_monotone_invariance(grid, seed):
    s = grid / 4.0                      # coarse grid so ties actually occur
    y = np.random.default_rng(seed).integers(0, 2, size=12)
    if y.min() == y.max():
        return
    assert auc(s, y) == pytest.approx(_pairwise_auc(s, y), abs=1e-12)
    assert auc(s, y) == auc(2 * s ** 3 + s - 7, y)
    assert auc(s, y) == auc(np.exp(s), y)


def test_recall_ndcg_examples():
    assert recall_ndcg_at_k([[7, 1, 2]], [7], 10) == (1.0, 1.0)
    assert recall_ndcg_at_k([[1, 2, 3]], [9], 2) == (0.0, 0.0)
    assert recall_ndcg_at_k([[1, 2, 9, 4]], [9], 10)[1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        recall_ndcg_at_k([[1]], [1], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    ranked = [list(rng.permutation(20)[:10]) for _ in range(15)]
    targets = list(rng.integers(0, 20, size=15))
    vals = [recall_ndcg_at_k(ranked, targets, k)[0] for k in range(1, 12)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_collision_and_utilization():
    table = np.array([[0, 1], [0, 1], [1, 2]])
    assert collision_rate(table) == pytest.approx(1 / 3)
    assert utilization(table, 4) == [0.5, 0.5]


def test_metric_report_validation():
    with pytest.raises(ValueError):
        MetricReport({"rank_auc": 1.2})
    with pytest.raises(ValueError):
        MetricReport({"loss": float("nan")})
    rep = MetricReport({"recall@10": 0.5, "loss": 3.0}, checkpoint="ck", seed=2)
    assert rep.to_dict()["metrics"] == {"recall@10": 0.5, "loss": 3.0}


def test_render_table_alignment():
    out = render_table([{"a": 1.0, "bb": "x"}, {"a": 0.25}])
    lines = out.splitlines()
    assert lines[0].split() == ["a", "bb"]
    assert "0.2500" in lines[3]
    assert len({len(l.rstrip()) for l in lines[:2]}) == 1
