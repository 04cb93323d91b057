import logging

import numpy as np
import pytest

from digrec.retrieval import (InvertedIndex, beam_search, build_index, exhaustive_leaf_scores,
                              rank_candidates)
from digrec.trainer import Trainer

from conftest import micro_config


@pytest.fixture(scope="module")
def trained(tiny_world, tiny_split):
    tr = Trainer(tiny_world, micro_config(epochs=2), validate=False)
    tr.fit()
    users = tiny_world.user_batch(tiny_split.test_target[:12], tr.cfg.history_len)
    return tr.model, users


# ------------------------------------------------------------------ index

def test_index_lookup_and_collisions():
    table = np.array([[0, 1], [2, 3], [0, 1], [1, 0]])
    idx = build_index(table, K=4, item_ids=np.array([40, 10, 30, 20]))
    assert idx.lookup((0, 1)) == [30, 40]
    assert idx.lookup((3, 3)) == []
    assert idx.as_dict() == {(0, 1): [30, 40], (1, 0): [20], (2, 3): [10]}
    assert idx.collision_rate == pytest.approx(0.25)
    assert list(idx.is_reachable(1, np.array([0, 1, 2, 3]))) == [True, True, True, False]
    assert list(idx.is_reachable(2, np.array([1, 4, 11, 15]))) == [True, True, True, False]


def test_index_rejects_bad_shape():
    with pytest.raises(ValueError):
        InvertedIndex(np.zeros(5, dtype=int), K=4)


# ------------------------------------------------------------ beam search

def test_beam_argument_errors(trained):
    model, users = trained
    idx = build_index(model.sid_table, model.K)
    with pytest.raises(ValueError):
        beam_search(model, users, build_index(np.zeros((0, 2), dtype=int), model.K))
    with pytest.raises(ValueError):
        beam_search(model, users, idx, B=0)
    with pytest.raises(ValueError):
        beam_search(model, users, idx, u2t_mode="bogus")
    saved, model.stat_u2t = model.stat_u2t, None
    try:
        with pytest.raises(ValueError):
            beam_search(model, users, idx, u2t_mode="stat")
    finally:
        model.stat_u2t = saved


def test_full_width_beam_matches_exhaustive(trained):
    model, users = trained
    idx = build_index(model.sid_table, model.K)
    res = beam_search(model, users, idx, B=model.K ** model.L, top_n=len(idx))
    ex = exhaustive_leaf_scores(model, users, idx)
    leaf_of = {int(p): j for j, p in enumerate(idx.leaf_keys)}
    from digrec.tokenizer import prefix_ids
    leaf_pid = prefix_ids(model.sid_table, model.K)[:, -1]
    for u, r in enumerate(res):
        assert len(r.items) == len(idx) and not r.short_supply
        want = ex[u, [leaf_of[int(leaf_pid[i])] for i in r.items]]
        np.testing.assert_allclose(r.beam_scores, want, rtol=0, atol=1e-10)
        assert np.all(np.diff(r.beam_scores) <= 0)


def test_pruning_never_loses_items(trained):
    model, users = trained
    keep = np.arange(0, 16, 3)
    idx = build_index(model.sid_table[keep], model.K, item_ids=keep)
    pruned = beam_search(model, users, idx, B=2, top_n=50)
    raw = beam_search(model, users, idx, B=2, top_n=50, prune=False)
    for a, b in zip(pruned, raw):
        assert len(a.items) >= len(b.items) and len(a.items) > 0
        assert set(idx.item_ids[a.items]) <= set(keep.tolist())
        assert a.short_supply


def test_beam_is_deterministic_and_traced(trained):
    model, users = trained
    idx = build_index(model.sid_table, model.K)
    a = beam_search(model, users, idx, B=3, top_n=5, trace=True)
    b = beam_search(model, users, idx, B=3, top_n=5, trace=True)
    for x, y in zip(a, b):
        assert np.array_equal(x.items, y.items) and np.array_equal(x.beam_scores, y.beam_scores)
        assert [t["depth"] for t in x.depth_trace] == [1, 2]
        assert all(len(t["beam"]) <= 3 for t in x.depth_trace)


def test_stat_mode_runs(trained):
    model, users = trained
    idx = build_index(model.sid_table, model.K)
    res = beam_search(model, users, idx, B=4, top_n=5, u2t_mode="stat")
    assert all(len(r.items) > 0 for r in res)


# --------------------------------------------------------------- re-ranking

def test_rank_candidates_order_and_unknown(trained, tiny_world, caplog):
    model, users = trained
    lookup = lambda it: np.zeros((len(it), 6))
    with caplog.at_level(logging.WARNING):
        out = rank_candidates(model, users.take([0]), [3, 99, 1, 2, -1], lookup, tiny_world.item_fields)
    assert "unknown" in caplog.text
    assert sorted(i for i, _ in out) == [1, 2, 3]
    scores = [s for _, s in out]
    assert scores == sorted(scores, reverse=True)
    with pytest.raises(ValueError):
        rank_candidates(model, users.take([0]), [], lookup, tiny_world.item_fields)


def test_rank_candidates_ties_by_item_id(trained, tiny_world):
    model, users = trained
    fields = np.repeat(tiny_world.item_fields[:1], 16, axis=0)
    out = rank_candidates(model, users.take([0]), [7, 2, 5], lambda it: np.zeros((len(it), 6)), fields)
    assert [i for i, _ in out] == [2, 5, 7]
