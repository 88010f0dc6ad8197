"""Self-supervised training contracts: loss geometry, EMA targets, view
construction per variant, and that one epoch actually helps."""

import numpy as np
import pytest

from sonolearn.dsp import fit_channel_stats
from sonolearn.nn.tensor import Tensor
from sonolearn.ssl import (AugmentationConfig, ByolPretrainer, SpectrogramPool,
                           byol_loss, duplicate_mono, ema_update, make_view_pair,
                           mel_batch, mixup, normalize_batch, random_resize_crop)

SMALL_ARCH = dict(block_widths=(2, 3, 4, 5), repr_dim=4, proj_dim=4,
                  pred_hidden=8)


@pytest.fixture(scope="module")
def rattle_pool(tiny_rattle):
    records = tiny_rattle.train_records
    specs = mel_batch(tiny_rattle, records)
    stats = fit_channel_stats(specs)
    pool = SpectrogramPool(normalize_batch(specs, stats),
                           np.array([r.behavior_id for r in records]),
                           np.array([r.repeat_idx for r in records]))
    return pool


def test_byol_loss_geometry():
    q = np.random.default_rng(0).normal(size=(8, 4)).astype(np.float32)
    aligned = byol_loss(Tensor(q * 3.0), Tensor(q))  # scale must not matter
    assert float(aligned.data) == pytest.approx(0.0, abs=1e-6)
    opposed = byol_loss(Tensor(q), Tensor(-q))
    assert float(opposed.data) == pytest.approx(4.0, abs=1e-6)
    ortho = byol_loss(Tensor(np.array([[1.0, 0.0]], dtype=np.float32)),
                      Tensor(np.array([[0.0, 1.0]], dtype=np.float32)))
    assert float(ortho.data) == pytest.approx(2.0, abs=1e-6)


def test_byol_loss_bounded():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.normal(size=(6, 8)).astype(np.float32)
        b = rng.normal(size=(6, 8)).astype(np.float32)
        v = float(byol_loss(Tensor(a), Tensor(b)).data)
        assert 0.0 <= v <= 4.0


def test_byol_loss_grad_reaches_online_only():
    q = Tensor(np.random.default_rng(2).normal(size=(4, 4)).astype(np.float32),
               requires_grad=True)
    z = Tensor(np.random.default_rng(3).normal(size=(4, 4)).astype(np.float32))
    byol_loss(q, z).backward()
    assert q.grad is not None
    assert z.grad is None


def test_ema_update_math():
    target = {"w": np.array([1.0], dtype=np.float32)}
    online = {"w": Tensor(np.array([2.0], dtype=np.float32))}
    ema_update(target, online, tau=0.99)
    assert target["w"][0] == pytest.approx(0.99 * 1.0 + 0.01 * 2.0)
    ema_update(target, online, tau=1.0)
    assert target["w"][0] == pytest.approx(1.01)  # frozen at tau = 1


def test_ema_update_mutates_tensor_targets_in_place():
    # Buffers sometimes live inside Tensors; the update must not silently
    # rebind a local and leave the stored value untouched.
    target = {"w": Tensor(np.array([1.0], dtype=np.float32))}
    online = {"w": np.array([3.0], dtype=np.float32)}
    ema_update(target, online, tau=0.5)
    assert target["w"].data[0] == pytest.approx(2.0)


def test_crop_identity_at_unit_scales():
    spec = np.random.default_rng(4).normal(size=(1, 16, 274)).astype(np.float32)
    cfg = AugmentationConfig(crop_scale_time=(1.0, 1.0), crop_scale_mel=(1.0, 1.0))
    out = random_resize_crop(spec, np.random.default_rng(0), cfg)
    assert out.shape == spec.shape
    assert np.max(np.abs(out - spec)) < 1e-6


def test_crop_preserves_shape_and_varies():
    spec = np.random.default_rng(5).normal(size=(2, 16, 274)).astype(np.float32)
    rng = np.random.default_rng(1)
    a = random_resize_crop(spec, rng)
    b = random_resize_crop(spec, rng)
    assert a.shape == spec.shape == b.shape
    assert not np.array_equal(a, b)


def test_mixup_is_convex_combination():
    a = np.zeros((1, 16, 274), dtype=np.float32)
    b = np.ones((1, 16, 274), dtype=np.float32)
    out = mixup(a, b, np.random.default_rng(2))
    # out = alpha*a + (1-alpha)*b with a = 0, b = 1, so alpha = 1 - out
    alpha = 1.0 - float(out.ravel()[0])
    # alpha drawn from [0.5, 1]: the own-spec side dominates
    assert 0.5 <= alpha <= 1.0
    assert np.allclose(out, out.ravel()[0])


def test_view_pair_byol_crops_same_clip(rattle_pool):
    rng = np.random.default_rng(3)
    a, b = make_view_pair(rattle_pool, 0, "BYOL", rng)
    assert a.shape == rattle_pool.specs[0].shape
    assert not np.array_equal(a, b)


def test_view_pair_act_uses_sibling_repeat(rattle_pool):
    rng = np.random.default_rng(4)
    a, b = make_view_pair(rattle_pool, 0, "BYOL_ACT", rng)
    assert np.array_equal(a, rattle_pool.specs[0])
    sibling_rows = rattle_pool.siblings(0)
    assert any(np.array_equal(b, rattle_pool.specs[i]) for i in sibling_rows)
    own_behavior = rattle_pool.behavior_ids[0]
    assert all(rattle_pool.behavior_ids[i] == own_behavior for i in sibling_rows)
    assert 0 not in sibling_rows


def test_view_pair_aa_crops_sibling(rattle_pool):
    rng = np.random.default_rng(5)
    a, b = make_view_pair(rattle_pool, 0, "BYOL_AA", rng)
    assert a.shape == rattle_pool.specs[0].shape
    assert not np.array_equal(a, rattle_pool.specs[0])  # cropped


def test_view_pair_act_needs_siblings():
    pool = SpectrogramPool(np.zeros((2, 1, 16, 274), dtype=np.float32),
                           np.array([0, 1]), np.array([0, 0]))
    with pytest.raises(ValueError, match="repeat"):
        make_view_pair(pool, 0, "BYOL_ACT", np.random.default_rng(0))


def test_view_pair_rejects_unknown_variant(rattle_pool):
    with pytest.raises(ValueError, match="variant"):
        make_view_pair(rattle_pool, 0, "SIMCLR", np.random.default_rng(0))


def test_duplicate_mono():
    specs = np.random.default_rng(6).normal(size=(3, 1, 16, 274)).astype(np.float32)
    out = duplicate_mono(specs)
    assert out.shape == (3, 2, 16, 274)
    assert np.array_equal(out[:, 0], out[:, 1])


def test_pool_merge_offsets_behaviors(rattle_pool):
    merged = rattle_pool.merge(rattle_pool,
                               behavior_offset=int(rattle_pool.behavior_ids.max()) + 1)
    assert len(merged) == 2 * len(rattle_pool)
    assert len(np.unique(merged.behavior_ids)) == 2 * len(
        np.unique(rattle_pool.behavior_ids))


def test_one_epoch_beats_random_encoder(rattle_pool):
    trained = ByolPretrainer(variant="BYOL", epochs=2, batch_size=8, seed=0,
                             **SMALL_ARCH)
    trained.fit(rattle_pool)
    random_init = ByolPretrainer(variant="BYOL", epochs=0, batch_size=8, seed=0,
                                 **SMALL_ARCH)
    random_init.fit(rattle_pool)
    after = trained.evaluate_loss(rattle_pool, seed=9)
    before = trained.evaluate_loss(rattle_pool, state=random_init.state_, seed=9)
    assert after < before


def test_pretrain_deterministic(rattle_pool):
    a = ByolPretrainer(epochs=1, batch_size=8, seed=3, **SMALL_ARCH)
    b = ByolPretrainer(epochs=1, batch_size=8, seed=3, **SMALL_ARCH)
    a.fit(rattle_pool)
    b.fit(rattle_pool)
    assert a.loss_trace_ == b.loss_trace_
    key = next(iter(a.state_.params))
    assert np.array_equal(a.state_.params[key].data, b.state_.params[key].data)


def test_target_lags_online(rattle_pool):
    p = ByolPretrainer(epochs=1, batch_size=8, seed=0, **SMALL_ARCH)
    p.fit(rattle_pool)
    state = p.state_
    assert state.target_params is not None
    diffs = [float(np.max(np.abs(state.params[k].data - state.target_params[k])))
             for k in state.target_params]
    assert max(diffs) > 0  # EMA target trails the online weights
