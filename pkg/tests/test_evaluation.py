import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycletrans.data import SampleArrays
from cycletrans.evaluation import (EmbeddingSet, EvalReport, cmc_map, cmc_map_oracle, embed,
                                   evaluate, similarity, single_shot_gallery)
from cycletrans.pipeline import CycleTransNet, ModelConfig


def _ranked_gallery(identities, query_identity=0):
    """Gallery whose cosine ranking against the query [1, 0] follows list order."""
    n = len(identities)
    angles = np.linspace(0.1, 1.4, n)
    mat = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    gallery = EmbeddingSet(mat, np.array(identities), np.array(["visible"] * n),
                           np.array([f"g{i:03d}" for i in range(n)]))
    query = EmbeddingSet(np.array([[1.0, 0.0]]), np.array([query_identity]),
                         np.array(["infrared"]), np.array(["q000"]))
    return query, gallery


def _assert_same(a: EvalReport, b: EvalReport, tol=1e-9):
    for field in ("rank1", "rank10", "rank20", "mAP"):
        assert abs(getattr(a, field) - getattr(b, field)) <= tol, field
    np.testing.assert_allclose(a.cmc, b.cmc, atol=tol)
    assert a.num_queries == b.num_queries and a.excluded == b.excluded


def test_first_rank_single_relevant():
    q, g = _ranked_gallery([0, 1, 2])
    r = cmc_map(q, g)
    assert r.rank1 == 100.0 and r.mAP == 100.0


def test_relevant_at_rank_two():
    q, g = _ranked_gallery([1, 0, 2, 3, 4])
    r = cmc_map(q, g)
    np.testing.assert_array_equal(r.cmc, [0, 100, 100, 100, 100])
    assert abs(r.mAP - 50.0) < 1e-12


def test_two_relevant_ap():
    q, g = _ranked_gallery([0, 1, 0, 2])
    assert abs(cmc_map(q, g).mAP - 100 * 5 / 6) < 1e-9


def test_ranks_beyond_gallery_size_saturate():
    q, g = _ranked_gallery([1, 0])
    r = cmc_map(q, g)
    assert r.rank10 == r.rank20 == 100.0


def test_missing_identity_excluded(caplog):
    q, g = _ranked_gallery([1, 2, 3], query_identity=0)
    q2 = EmbeddingSet(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 2]),
                      np.array(["infrared"] * 2), np.array(["q0", "q1"]))
    with caplog.at_level(logging.WARNING):
        r = cmc_map(q2, g)
    assert r.excluded == 1 and r.num_queries == 1 and "excluded" in caplog.text
    with pytest.raises(ValueError):
        cmc_map(q, g)


def test_same_modality_rejected():
    q, g = _ranked_gallery([0, 1])
    g.modalities = np.array(["infrared"] * len(g))
    with pytest.raises(ValueError):
        cmc_map(q, g)


def test_tie_break_by_sample_id():
    mat = np.array([[1.0, 0.0]] * 3)
    g = EmbeddingSet(mat, np.array([2, 0, 1]), np.array(["visible"] * 3), np.array(["c", "b", "a"]))
    q = EmbeddingSet(np.array([[1.0, 0.0]]), np.array([0]), np.array(["infrared"]), np.array(["q"]))
    r = cmc_map(q, g)
    # order is a (id 1), b (id 0), c (id 2): first match at rank 2
    assert r.rank1 == 0.0 and abs(r.mAP - 50.0) < 1e-12
    _assert_same(r, cmc_map_oracle(q, g))


def _random_instance(rng, nq, ng, dim, n_id, dup=False):
    gal_ids = rng.integers(0, n_id, size=ng)
    gal = rng.normal(size=(ng, dim))
    if dup:
        gal[rng.integers(0, ng, size=ng // 2)] = gal[0]
        gal = np.round(gal, 1)
    q_ids = rng.choice(gal_ids, size=nq)
    g = EmbeddingSet(gal, gal_ids, np.array(["visible"] * ng),
                     np.array([f"g{i:04d}" for i in rng.permutation(ng)]))
    q = EmbeddingSet(rng.normal(size=(nq, dim)), q_ids, np.array(["infrared"] * nq),
                     np.array([f"q{i:04d}" for i in range(nq)]))
    return q, g


@given(st.integers(1, 12), st.integers(1, 30), st.booleans(), st.integers(0, 10_000))
def test_oracle_equivalence(nq, ng, dup, seed):
    rng = np.random.default_rng(seed)
    q, g = _random_instance(rng, nq, ng, 4, 5, dup)
    _assert_same(cmc_map(q, g), cmc_map_oracle(q, g))


@given(st.integers(0, 10_000))
def test_gallery_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    q, g = _random_instance(rng, 5, 20, 3, 4, dup=True)
    perm = rng.permutation(len(g))
    _assert_same(cmc_map(q, g), cmc_map(q, g.subset(perm)), tol=0.0)


@given(st.integers(0, 10_000))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    q, g = _random_instance(rng, 8, 25, 3, 6)
    r = cmc_map(q, g)
    assert 0 <= r.rank1 <= r.rank10 <= r.rank20 <= 100
    assert np.all(np.diff(r.cmc) >= 0)
    assert r.mAP <= r.cmc[-1] + 1e-9


def test_euclidean_metric():
    q, g = _ranked_gallery([1, 0])
    g.matrix[0] *= 100  # far in Euclidean terms, same direction
    assert cmc_map(q, g, metric="cosine").rank1 == 0.0
    assert cmc_map(q, g, metric="euclidean").rank1 == 100.0
    _assert_same(cmc_map(q, g, "euclidean"), cmc_map_oracle(q, g, "euclidean"))
    with pytest.raises(ValueError):
        similarity(q.matrix, g.matrix, "manhattan")


def test_single_shot_gallery_examples(rng):
    ids = np.array([0, 1, 2])
    g = EmbeddingSet(rng.normal(size=(3, 2)), ids, np.array(["visible"] * 3), np.array(["a", "b", "c"]))
    np.testing.assert_array_equal(single_shot_gallery(g, rng), [0, 1, 2])
    g = EmbeddingSet(rng.normal(size=(12, 2)), np.repeat(np.arange(4), 3),
                     np.array(["visible"] * 12), np.array([f"s{i}" for i in range(12)]))
    a = single_shot_gallery(g, np.random.default_rng(7))
    b = single_shot_gallery(g, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert len(a) == 4 and sorted(g.identities[a].tolist()) == [0, 1, 2, 3]


def test_evaluate_protocols(rng):
    q, g = _random_instance(rng, 6, 30, 3, 5)
    multi = evaluate(q, g, "multi-shot")
    assert multi.protocol == "multi-shot"
    single = evaluate(q, g, "single-shot", draws=10, seed=3)
    assert single.protocol == "single-shot" and single.draws == 10
    manual = [cmc_map(q, g.subset(single_shot_gallery(g, r))) for r in [np.random.default_rng(3)]
              for _ in range(10)]
    assert abs(single.rank1 - np.mean([m.rank1 for m in manual])) < 1e-9
    with pytest.raises(ValueError):
        evaluate(q, g, "all-shot")


def test_report_table_and_csv(tmp_path):
    q, g = _ranked_gallery([1, 0, 2])
    r = cmc_map(q, g)
    lines = r.table().splitlines()
    assert lines[0].split() == ["protocol", "draws", "queries", "excluded", "rank1", "rank10",
                                "rank20", "mAP"]
    r.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1].startswith("multi-shot,1,1,0,0.0,")


def test_embedding_csv_roundtrip(tmp_path, rng):
    emb = EmbeddingSet(rng.normal(size=(3, 4)), np.array([1, 2, 3]),
                       np.array(["visible", "infrared", "visible"]), np.array(["a", "b", "c"]))
    emb.write_csv(tmp_path / "e.csv")
    back = EmbeddingSet.read_csv(tmp_path / "e.csv")
    np.testing.assert_array_equal(back.matrix, emb.matrix)
    np.testing.assert_array_equal(back.identities, emb.identities)
    np.testing.assert_array_equal(back.sample_ids, emb.sample_ids)


def test_embed_is_deterministic_and_row_wise(rng):
    net = CycleTransNet(ModelConfig(raw_dim=5, dim=6, num_queries=3, num_prototypes=4,
                                    num_classes=3, init_std=1.0))
    maps = rng.normal(size=(5, 4, 5)).astype(np.float32)
    maps[3] = maps[1]
    arr = SampleArrays(maps, np.arange(5), np.array(["visible", "infrared"] * 2 + ["visible"]),
                       np.array([f"s{i}" for i in range(5)]))
    a = embed(net, arr, batch_size=2)
    b = embed(net, arr)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    np.testing.assert_array_equal(a.matrix[1], a.matrix[3])
    assert a.matrix.shape == (5, 18)
