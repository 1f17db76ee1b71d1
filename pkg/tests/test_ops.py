import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sdpl import tensor as T
from sdpl.errors import BatchNormUninitialized, CardinalityMismatch, EmptyMask, LabelOutOfRange, ShapeMismatch
from sdpl.gradcheck import check
from sdpl.ops import (
    HARD_FUSION,
    ClassifierHead,
    FusionWeights,
    GemParams,
    PartSet,
    WeightEstimation,
    cross_entropy,
    fuse,
    gem_pool,
    gem_pool_many,
)
from sdpl.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_gem_constant_feature():
    x = Tensor(np.full((1, 2, 4, 4), 0.7))
    mask = np.zeros((4, 4), bool)
    mask[1:3, 0] = True
    for p in (1.0, 3.0, 7.5):
        np.testing.assert_allclose(gem_pool(x, mask, GemParams(p)).data, 0.7, rtol=1e-12)


def test_gem_p3_hand_value():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    out = gem_pool(x, np.ones((2, 2), bool), GemParams(3.0)).item()
    assert out == pytest.approx(25 ** (1 / 3), abs=1e-12)
    assert round(out, 4) == 2.9240


@given(hnp.arrays(np.float64, (1, 2, 3, 3), elements=st.floats(0.01, 10)), hnp.arrays(bool, (3, 3)))
def test_gem_p1_is_masked_mean(x, mask):
    mask[0, 0] = True
    got = gem_pool(Tensor(x), mask, GemParams(1.0)).data
    ref = x[:, :, mask].mean(axis=2)
    np.testing.assert_allclose(got, ref, rtol=1e-6)


@given(
    hnp.arrays(np.float64, (1, 2, 3, 3), elements=st.floats(0.0, 5)),
    st.integers(0, 8),
    st.floats(0.01, 3),
    st.floats(1, 6),
)
def test_gem_monotone(x, cell, bump, p):
    mask = np.ones((3, 3), bool)
    a = gem_pool(Tensor(x), mask, GemParams(p)).data
    y = x.copy()
    y[0, :, cell // 3, cell % 3] += bump
    b = gem_pool(Tensor(y), mask, GemParams(p)).data
    assert np.all(b >= a - 1e-12)


def test_gem_errors():
    x = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(EmptyMask):
        gem_pool(x, np.zeros((2, 2), bool), GemParams())
    with pytest.raises(ShapeMismatch):
        gem_pool(x, np.ones((3, 3), bool), GemParams())
    with pytest.raises(ValueError):
        GemParams(p=0)
    with pytest.raises(ValueError):
        GemParams(eps=0)


def test_gem_many_equals_single(rng):
    x = Tensor(rng.uniform(0.1, 2, size=(2, 3, 4, 4)))
    masks = rng.random((3, 4, 4)) < 0.5
    masks[:, 0, 0] = True
    many = gem_pool_many(x, masks, GemParams()).data
    for k in range(3):
        np.testing.assert_allclose(many[:, :, k], gem_pool(x, masks[k], GemParams()).data, rtol=1e-14)


def test_gem_learnable_p_gradcheck(rng):
    x = leaf(rng.uniform(0.2, 2, size=(1, 2, 3, 3)))
    p = leaf([2.5])
    mask = np.ones((3, 3), bool)
    assert check(lambda: gem_pool(x, mask, GemParams(), p), [x, p]) <= 1e-4


def test_gem_gradcheck_trials():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x = leaf(rng.uniform(0.1, 2.0, size=(1, 2, 3, 3)))
        mask = rng.random((3, 3)) < 0.6
        mask[1, 1] = True
        worst = max(worst, check(lambda: gem_pool(x, mask, GemParams(3.0)), [x]))
    assert worst <= 1e-4


# -- weight estimation -------------------------------------------------------


def test_weight_estimation_uniform_at_init(rng):
    we = WeightEstimation(8, hidden=16)
    beta = we(Tensor(rng.normal(size=(2, 8, 4, 4)))).data
    np.testing.assert_allclose(beta, 1 / 3, rtol=1e-15)


@given(hnp.arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-5, 5)))
def test_weight_estimation_sums_to_one(x):
    we = WeightEstimation(4, hidden=8, seed=3)
    we.out.weight.data = np.random.default_rng(0).normal(size=we.out.weight.shape)
    beta = we(Tensor(x)).data
    assert np.all(np.abs(beta.sum(axis=1) - 1) <= 1e-6)
    assert np.all((beta >= 0) & (beta <= 1))


def test_weight_estimation_shape_trace():
    we = WeightEstimation(2048, hidden=512, dtype=np.float32)
    trace = []
    we(Tensor(np.zeros((1, 2048, 32, 32), np.float32)), trace)
    assert [t.shape for t in trace[:5]] == [(1, 1024, 32, 32), (1, 1024), (1, 512), (1, 512), (1, 3)]


def test_weight_estimation_gradcheck():
    rng = np.random.default_rng(5)
    we = WeightEstimation(4, hidden=6, seed=1, dtype=np.float64)
    for p in we.parameters():
        p.data = rng.normal(scale=0.3, size=p.shape)
    x = leaf(rng.normal(size=(2, 4, 3, 3)))
    assert check(lambda: we(x), [x, *we.parameters()]) <= 1e-4


# -- fusion --------------------------------------------------------------------


def _sets(rng, n=2, c=3, k=4):
    return [PartSet(Tensor(rng.normal(size=(n, c, k)))) for _ in range(3)]


def test_fusion_selector_and_fixed_point(rng):
    sets = _sets(rng)
    out = fuse(sets, FusionWeights((1.0, 0.0, 0.0)))
    assert out.values.data.tobytes() == sets[0].values.data.tobytes()
    same = [sets[0]] * 3
    np.testing.assert_allclose(fuse(same, FusionWeights()).values.data, sets[0].values.data, rtol=1e-15)


def test_hard_fusion_is_a_weight_setting(rng):
    sets = _sets(rng)
    ref = 0.8 * sets[0].values.data + 0.1 * sets[1].values.data + 0.1 * sets[2].values.data
    np.testing.assert_allclose(fuse(sets, HARD_FUSION).values.data, ref, rtol=1e-14)


def test_fusion_validation(rng):
    sets = _sets(rng)
    with pytest.raises(CardinalityMismatch):
        fuse(sets[:2] + [PartSet(Tensor(np.zeros((2, 3, 5))))], HARD_FUSION)
    with pytest.raises(CardinalityMismatch):
        fuse(sets, Tensor(np.full((2, 2), 0.5)))
    with pytest.raises(CardinalityMismatch):
        FusionWeights((0.5, 0.5))
    with pytest.raises(ValueError):
        FusionWeights((0.5, 0.6, -0.1))


@given(st.floats(-3, 3), st.permutations([0, 1, 2]))
def test_fusion_linear_and_permutation_invariant(a, perm):
    rng = np.random.default_rng(1)
    sets = _sets(rng)
    w = Tensor(rng.dirichlet([1, 1, 1], size=2))
    base = fuse(sets, w).values.data
    scaled = fuse([PartSet(T.mul(s.values, a)) for s in sets], w).values.data
    np.testing.assert_allclose(scaled, a * base, rtol=1e-12, atol=1e-12)
    pw = Tensor(w.data[:, perm])
    np.testing.assert_allclose(fuse([sets[j] for j in perm], pw).values.data, base, rtol=1e-12, atol=1e-14)


def test_fusion_gradcheck():
    rng = np.random.default_rng(2)
    for _ in range(100):
        vals = [leaf(rng.normal(size=(2, 2, 3))) for _ in range(3)]
        w = leaf(rng.dirichlet([1, 1, 1], size=2))
        assert check(lambda: fuse([PartSet(v) for v in vals], w).values, [*vals, w]) <= 1e-4


# -- classifier + loss ---------------------------------------------------------


def test_head_eval_requires_training_step(rng):
    head = ClassifierHead(4, 5, bottleneck=6)
    with pytest.raises(BatchNormUninitialized):
        head(Tensor(rng.normal(size=(2, 4))), training=False)


def test_head_eval_deterministic_and_row_identical(rng):
    head = ClassifierHead(4, 701, bottleneck=8)
    head(Tensor(rng.normal(size=(3, 4))), training=True, rng=rng)
    x = Tensor(np.tile(rng.normal(size=(1, 4)), (3, 1)))
    a, _ = head(x, training=False)
    b, _ = head(x, training=False)
    assert a.shape == (3, 701)
    assert a.data.tobytes() == b.data.tobytes()
    assert np.array_equal(a.data[0], a.data[2])


def test_head_running_stats(rng):
    head = ClassifierHead(3, 2, bottleneck=3, momentum=0.1)
    x = rng.normal(size=(4, 3))
    head(Tensor(x), training=True, rng=rng)
    feat = head.compress(Tensor(x)).data
    np.testing.assert_allclose(head.running_mean, 0.1 * feat.mean(0), rtol=1e-12)
    np.testing.assert_allclose(head.running_var, 0.9 + 0.1 * feat.var(0, ddof=1), rtol=1e-12)


def test_cross_entropy_values():
    assert cross_entropy(Tensor(np.zeros((1, 10))), [3]).item() == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 50
    assert cross_entropy(Tensor(logits), [1, 3]).item() < 1e-20
    with pytest.raises(LabelOutOfRange):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(3)
    for _ in range(100):
        logits = leaf(rng.normal(size=(2, 5)))
        labels = rng.integers(0, 5, size=2)
        assert check(lambda: cross_entropy(logits, labels), [logits]) <= 1e-5


def test_loss_sum_permutation_invariant_over_parts(rng):
    logits = [Tensor(rng.normal(size=(3, 4))) for _ in range(4)]
    labels = [0, 2, 3]
    a = sum(cross_entropy(l, labels).item() for l in logits)
    b = sum(cross_entropy(l, labels).item() for l in logits[::-1])
    assert a == pytest.approx(b, abs=1e-12)
