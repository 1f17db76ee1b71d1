import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_metrics, brute_rank, pr_curve_ap
from sdpl.errors import DimensionMismatch, EmptyGallery, NoRelevantItem, SchemaMismatch
from sdpl.retrieval import (
    PROTOCOLS,
    DescriptorIndex,
    DescriptorRecord,
    MetricsReport,
    average_precision,
    evaluate_protocol,
    rank,
    rank_indices,
    recall_at_k,
)


def rec(i, label, vec):
    return DescriptorRecord(i, label, np.asarray(vec, dtype=np.float64))


def test_self_match_ranks_first():
    g = [rec("a", 0, [1.0, 2.0]), rec("b", 1, [0.0, 0.0])]
    assert rank(rec("q", 0, [1.0, 2.0]), g)[0] == "a"


def test_nearer_item_first():
    g = [rec("far", 0, [2.0]), rec("near", 1, [1.0])]
    assert rank(rec("q", 0, [0.0]), g) == ["near", "far"]


def test_ties_broken_by_id():
    g = [rec("z", 0, [1.0]), rec("a", 0, [-1.0]), rec("m", 0, [1.0])]
    assert rank(rec("q", 0, [0.0]), g) == ["a", "m", "z"]


def test_rank_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        vecs = rng.normal(size=(20, 5))
        ids = [f"g{k:02d}" for k in rng.permutation(20)]
        q = rng.normal(size=5)
        got = rank(rec("q", 0, q), [rec(i, 0, v) for i, v in zip(ids, vecs)])
        assert got == brute_rank(q, vecs, ids)


def test_rank_errors():
    with pytest.raises(EmptyGallery):
        rank(rec("q", 0, [0.0]), [])
    with pytest.raises(DimensionMismatch):
        rank(rec("q", 0, [0.0, 1.0]), [rec("a", 0, [1.0])])
    with pytest.raises(DimensionMismatch):
        DescriptorIndex.from_records([rec("a", 0, [1.0]), rec("b", 0, [1.0, 2.0])])


def test_recall_hand_cases():
    assert recall_at_k([True, False], 1) == 1.0
    assert recall_at_k([False, True, False], 1) == 0.0
    assert recall_at_k([False, True, False], 5) == 1.0


def test_ap_hand_cases():
    assert average_precision([True, False]) == 1.0
    assert average_precision([False, True]) == 0.5
    assert average_precision([True, False, True]) == pytest.approx(5 / 6, abs=1e-15)
    with pytest.raises(NoRelevantItem):
        average_precision([False, False])


def test_recall_random_queries_match_oracle():
    rng = np.random.default_rng(1)
    rel = rng.random((50, 12)) < 0.2
    rel[:, -1] = True
    for k in (1, 5, 10):
        expect = np.mean([1.0 if r[:k].any() else 0.0 for r in rel])
        assert recall_at_k(rel, k) == expect


@given(st.lists(st.booleans(), min_size=1, max_size=20).filter(any))
def test_ap_matches_pr_curve_area(flags):
    assert average_precision(flags) == pytest.approx(pr_curve_ap([int(f) for f in flags]), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    g = DescriptorIndex([f"g{k}" for k in range(10)], rng.integers(0, 3, 10), rng.normal(size=(10, 4)))
    q = DescriptorIndex([f"q{k}" for k in range(5)], g.labels[:5], rng.normal(size=(5, 4)))
    base = evaluate_protocol(q, g, ks=(1, 3, 10))
    r = [base.recall_at[k] for k in (1, 3, 10)]
    assert r == sorted(r) and r[-1] == 1.0 and all(0 <= x <= 1 for x in r)
    shift = rng.normal(size=4)
    moved = evaluate_protocol(
        DescriptorIndex(q.ids, q.labels, q.vectors + shift), DescriptorIndex(g.ids, g.labels, g.vectors + shift), (1, 3, 10)
    )
    scaled = evaluate_protocol(
        DescriptorIndex(q.ids, q.labels, q.vectors * 3.5), DescriptorIndex(g.ids, g.labels, g.vectors * 3.5), (1, 3, 10)
    )
    perm = rng.permutation(10)
    shuffled = evaluate_protocol(
        q, DescriptorIndex([g.ids[k] for k in perm], g.labels[perm], g.vectors[perm]), (1, 3, 10)
    )
    for other in (moved, scaled, shuffled):
        assert other.recall_at == base.recall_at
        assert other.ap == pytest.approx(base.ap, abs=1e-15)
    assert shuffled.ap == base.ap


def test_identity_protocol():
    rng = np.random.default_rng(2)
    g = DescriptorIndex([f"g{k}" for k in range(8)], np.arange(8), rng.normal(size=(8, 3)))
    rep = evaluate_protocol(g, g)
    assert rep.recall_at[1] == 1.0 and rep.ap == 1.0


def test_synthetic_30_class_report_matches_oracle():
    rng = np.random.default_rng(3)
    labels = np.arange(30)
    centers = rng.normal(size=(30, 6))
    g = DescriptorIndex([f"s{k:02d}" for k in labels], labels, centers + 0.3 * rng.normal(size=(30, 6)))
    ql = np.repeat(labels, 2)
    q = DescriptorIndex([f"d{k:03d}" for k in range(60)], ql, centers[ql] + 0.6 * rng.normal(size=(60, 6)))
    rep = evaluate_protocol(q, g, ks=(1, 5, 10))
    recalls, ap = brute_metrics(q.vectors, q.labels, g.vectors, g.labels, g.ids, (1, 5, 10))
    for k in (1, 5, 10):
        assert abs(rep.recall_at[k] - recalls[k]) <= 1e-12
    assert abs(rep.ap - ap) <= 1e-12


def test_protocol_shapes():
    assert (PROTOCOLS["university1652-drone2sat"].num_queries, PROTOCOLS["university1652-drone2sat"].num_gallery) == (37854, 951)
    spec = PROTOCOLS["sues200-drone2sat"]
    idx = DescriptorIndex(["a"], [0], np.zeros((1, 2)))
    with pytest.raises(DimensionMismatch):
        spec.validate(idx, idx)


def test_float32_descriptors_ranked_in_float64():
    g = np.array([[1.0000001], [1.0]], dtype=np.float32)
    order = rank_indices(np.zeros((1, 1), np.float32), g, ["b", "a"])
    assert list(order[0]) == [1, 0]


def test_index_save_load(tmp_path):
    rng = np.random.default_rng(4)
    idx = DescriptorIndex(["x", "y", "z"], [2, 0, 1], rng.normal(size=(3, 4)).astype(np.float32))
    idx.save(tmp_path / "desc")
    back = DescriptorIndex.load(tmp_path / "desc")
    assert back.ids == idx.ids and list(back.labels) == [2, 0, 1]
    assert back.vectors.tobytes() == idx.vectors.tobytes()
    (tmp_path / "desc.json").write_text('[{"id": "x"}]')
    with pytest.raises(SchemaMismatch):
        DescriptorIndex.load(tmp_path / "desc")


def test_report_write(tmp_path):
    rep = MetricsReport({1: 0.5, 5: 1.0}, 0.75, 4, 3)
    rep.write(tmp_path / "m")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "recall@1,recall@5,ap,num_queries,num_gallery"
