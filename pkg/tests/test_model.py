import math
from dataclasses import replace

import numpy as np
import pytest

from sdpl import tensor as T
from sdpl.errors import ConfigMismatch, InvalidScale
from sdpl.model import SdplConfig, SdplModel
from sdpl.ops import FusionWeights
from sdpl.tensor import Tensor, backward
from sdpl.trainer import OptimConfig, sgd_step

TINY = SdplConfig(
    n_sps=4,
    delta_h1=1,
    delta_h2=-1,
    n_classes=7,
    backbone={"kind": "conv", "channels": [8, 8], "strides": [2, 2]},
    image_size=32,
    bottleneck=16,
    we_hidden=16,
    dtype="float64",
    seed=3,
)


def images(n, seed=0, size=32):
    return Tensor(np.random.default_rng(seed).random((n, 3, size, size)))


def warm(model, n=4):
    """One training-mode pass so batch-norm running stats exist."""
    model.forward_train(images(n, 9), images(n, 10), list(range(n)), np.random.default_rng(0))


def test_config_json_roundtrip_and_unknown_keys():
    cfg = replace(TINY, fusion="hard")
    assert SdplConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigMismatch):
        SdplConfig.from_dict({"n_sps": 4, "bogus": 1})
    with pytest.raises(ConfigMismatch):
        SdplConfig(fusion="soft")


def test_config_rejects_offsets_beyond_threshold():
    with pytest.raises(ConfigMismatch):
        SdplModel(replace(TINY, delta_h1=2))
    with pytest.raises(ConfigMismatch):
        SdplModel(replace(TINY, image_size=30))


def test_descriptor_length_and_determinism():
    m = SdplModel(TINY)
    x = images(2)
    d = m.forward_embed(x)
    assert d.shape == (2, 10 * 16)
    assert m.forward_embed(x).tobytes() == d.tobytes()
    full = SdplModel(replace(TINY, bottleneck=512, we_hidden=8))
    assert full.forward_embed(images(1)).shape == (1, 5120)


def test_initial_loss_near_uniform():
    m = SdplModel(replace(TINY, n_classes=30))
    loss, logits = m.forward_train(images(4), images(4, 1), [0, 5, 9, 29], np.random.default_rng(0))
    expected = 2 * 10 * math.log(30)
    assert abs(loss.item() - expected) <= 0.2 * expected
    assert len(logits["drone"]) == len(logits["satellite"]) == 10


def test_global_baseline_degenerates_to_one_part():
    m = SdplModel(replace(TINY, fusion="none", n_sps=1))
    assert len(m.heads) == 1 and m.masks[0].shape[0] == 1 and m.masks[0].all()
    assert m.forward_embed(images(2)).shape == (2, 16)


def test_forced_selector_matches_centered_model():
    sdpl = SdplModel(TINY)
    sdpl.fusion_weights = lambda f: FusionWeights((1.0, 0.0, 0.0))
    dps = SdplModel(replace(TINY, fusion="none"))
    hard = SdplModel(replace(TINY, fusion="hard", hard_beta=(1.0, 0.0, 0.0)))
    xd, xs, y = images(3), images(3, 1), [1, 2, 3]
    losses = [m.forward_train(xd, xs, y, np.random.default_rng(5))[0].item() for m in (sdpl, dps, hard)]
    assert losses[0] == losses[1] == losses[2]
    assert sdpl.forward_embed(xd).tobytes() == dps.forward_embed(xd).tobytes()


def test_hard_fusion_is_configuration():
    m = SdplModel(replace(TINY, fusion="hard"))
    assert m.weight_estimation is None
    assert m.fusion_weights(None).beta == (0.8, 0.1, 0.1)


def test_views_share_weights():
    m = SdplModel(TINY)
    x = images(2)
    warm(m)
    _, logits = m.forward_train(x, x, [0, 1], training=False)
    for a, b in zip(logits["drone"], logits["satellite"]):
        assert a.data.tobytes() == b.data.tobytes()


def test_loss_invariant_under_relabeling():
    m = SdplModel(TINY)
    warm(m)
    perm = np.random.default_rng(1).permutation(TINY.n_classes)
    xd, xs, y = images(4), images(4, 1), np.array([0, 3, 6, 2])
    base = m.forward_train(xd, xs, y, training=False)[0].item()
    for head in m.heads:
        w = head.cls.weight.data.copy()
        head.cls.weight.data[perm] = w
    relabeled = m.forward_train(xd, xs, perm[y], training=False)[0].item()
    assert relabeled == pytest.approx(base, rel=1e-12)


def test_rotation_symmetry_with_pooling_stub():
    cfg = replace(TINY, n_sps=1, fusion="none", backbone={"kind": "avgpool", "factor": 4})
    m = SdplModel(cfg)
    x = images(2)
    rot = Tensor(np.ascontiguousarray(x.data[..., ::-1, ::-1]))
    np.testing.assert_allclose(m.forward_embed(rot), m.forward_embed(x), rtol=1e-12)


def test_one_sgd_step_decreases_batch_loss():
    m = SdplModel(TINY)
    cfg = OptimConfig(lr0=1e-3)
    xd, xs, y = images(4), images(4, 1), [0, 1, 2, 3]
    params = m.parameters()
    loss = m.forward_train(xd, xs, y, np.random.default_rng(7))[0]
    before = loss.item()
    backward(loss)
    sgd_step(params, [p.grad for p in params], [None] * len(params), cfg)
    after = m.forward_train(xd, xs, y, np.random.default_rng(7))[0].item()
    assert after < before


def test_scale_subsets():
    m = SdplModel(TINY)
    x = images(2)
    full = m.forward_embed(x)
    assert m.embed_scale_subset(x, 4).tobytes() == full.tobytes()
    assert [m.embed_scale_subset(x, s).shape[1] for s in (1, 2, 3, 4)] == [16, 48, 96, 160]
    parts = full.reshape(2, 10, 16)
    for s in (1, 2, 3):
        small, big = m.scale_parts(s), m.scale_parts(s + 1)
        assert set(small) <= set(big)
        np.testing.assert_array_equal(m.embed_scale_subset(x, s).reshape(2, -1, 16), parts[:, small])
    with pytest.raises(InvalidScale):
        m.embed_scale_subset(x, 5)


def test_normalized_descriptors_have_unit_parts():
    m = SdplModel(replace(TINY, normalize_descriptor=True))
    e = m.part_embeddings(images(2))
    np.testing.assert_allclose(np.linalg.norm(e, axis=2), 1.0, rtol=1e-12)


def test_state_roundtrip():
    a = SdplModel(TINY)
    warm(a)
    b = SdplModel(replace(TINY, seed=4))
    b.load_state([arr for _, arr in a.state()])
    for (na, xa), (nb, xb) in zip(a.state(), b.state()):
        assert na == nb and xa.tobytes() == xb.tobytes()


def test_learnable_gem_exponent_receives_gradient():
    m = SdplModel(replace(TINY, gem_learnable=True))
    loss = m.forward_train(images(2), images(2, 1), [0, 1], np.random.default_rng(0))[0]
    T.backward(loss)
    assert m.gem_p.grad is not None and np.isfinite(m.gem_p.grad).all()
