"""Action scaling, the linear probe against its closed-form optimum, the
random/oracle references, end-to-end supervised training, and model
persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonolearn.models import (
    ActionScaler,
    AudioBehaviorModel,
    LinearProbe,
    SupervisedAudioRegressor,
    fit_normalizer,
    fit_probe_model,
    fit_supervised_model,
    least_squares_loss,
    load_model,
    oracle_baseline,
    random_baseline,
    save_model,
)
from sonolearn.nn.checkpoint import CheckpointError, save_checkpoint
from sonolearn.synth import TASKS

SMALL_ARCH = dict(block_widths=(2, 3, 4, 5), repr_dim=4)


# ---- action scaling ---------------------------------------------------------


def test_scaler_minmax_maps_train_extremes_to_unit_box():
    actions = np.array([
        [0.5, 1.0, 0.7],
        [2.0, 0.5, 1.1],
        [1.0, 2.0, 2.0],
    ])
    scaler = ActionScaler.for_task("swatter").fit(actions)
    z = scaler.transform(actions)
    assert z.min(axis=0) == pytest.approx(np.zeros(3))
    assert z.max(axis=0) == pytest.approx(np.ones(3))


def test_scaler_round_trip_identity_inside_bounds():
    rng = np.random.default_rng(0)
    actions = rng.uniform(0.5, 2.0, size=(12, 3))
    scaler = fit_normalizer(actions, "swatter")
    back = scaler.inverse_transform(scaler.transform(actions))
    assert np.max(np.abs(back - actions)) < 1e-6


def test_scaler_none_mode_is_identity_with_clipping():
    actions = np.array([[1.0, 1.5, 3.0], [0.6, 0.8, 1.0]])
    scaler = fit_normalizer(actions, "rattle")
    assert scaler.mode == "none"
    z = scaler.transform(actions)
    assert np.array_equal(z, actions)
    z[0, 0] = -99.0  # transform must hand back a copy
    assert actions[0, 0] == 1.0


def test_scaler_inverse_clips_to_task_bounds_exactly():
    actions = np.array([[1.0, 1.5, 3.0], [0.6, 0.8, 1.0]])
    scaler = fit_normalizer(actions, "rattle")
    wild = np.array([[100.0, -100.0, 100.0]])
    out = scaler.inverse_transform(wild)
    assert out[0].tolist() == [2.0, 0.5, 5.0]


def test_scaler_degenerate_dimension_named_in_error():
    actions = np.array([[1.0, 0.7, 0.9], [1.0, 1.2, 1.8]])  # dim 0 constant
    with pytest.raises(ValueError, match="base_velocity"):
        fit_normalizer(actions, "swatter")


def test_scaler_rejects_unknown_mode():
    with pytest.raises(ValueError, match="mode"):
        ActionScaler(mode="zscore").fit(np.ones((3, 2)) * [[1], [2], [3]])


def test_scaler_get_params_sklearn_contract():
    scaler = ActionScaler.for_task("strike_v")
    params = scaler.get_params()
    assert params["mode"] == "minmax"
    assert len(params["clip_lo"]) == len(TASKS["strike_v"].bounds)


@settings(max_examples=30, deadline=None)
@given(st.lists(
    st.tuples(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(0.5, 2.0)),
    min_size=2, max_size=8,
))
def test_scaler_round_trip_property(rows):
    actions = np.asarray(rows, dtype=np.float64)
    if np.any(actions.max(axis=0) - actions.min(axis=0) < 1e-9):
        return  # degenerate splits are rejected by design
    scaler = fit_normalizer(actions, "swatter")
    back = scaler.inverse_transform(scaler.transform(actions))
    assert np.max(np.abs(back - actions)) < 1e-6


# ---- linear probe -----------------------------------------------------------


def test_probe_recovers_exact_linear_map():
    rng = np.random.default_rng(1)
    Z = rng.normal(size=(40, 6)).astype(np.float32)
    W = rng.normal(size=(6, 2))
    Y = Z.astype(np.float64) @ W + np.array([0.3, -0.7])
    probe = LinearProbe().fit(Z, Y)
    assert probe.train_loss_ < 1e-5
    assert least_squares_loss(Z, Y) < 1e-12


def test_probe_averages_conflicting_duplicates():
    rng = np.random.default_rng(2)
    base = rng.normal(size=(4, 5)).astype(np.float32)
    Z = np.repeat(base, 2, axis=0)
    Y = rng.normal(size=(8, 2))
    probe = LinearProbe().fit(Z, Y)
    pred = probe.predict(base)
    pair_means = Y.reshape(4, 2, 2).mean(axis=1)
    assert np.max(np.abs(pred - pair_means)) < 1e-3


def test_probe_constant_representations_predict_mean_target():
    Z = np.zeros((10, 5), dtype=np.float32)
    Y = np.random.default_rng(3).normal(size=(10, 3))
    probe = LinearProbe().fit(Z, Y)
    pred = probe.predict(Z[:1])
    assert pred[0] == pytest.approx(Y.mean(axis=0), abs=1e-5)


def test_probe_matches_least_squares_within_one_percent():
    rng = np.random.default_rng(4)
    Z = rng.normal(size=(64, 8)).astype(np.float32)
    Y = Z @ rng.normal(size=(8, 2)) + 0.3 * rng.normal(size=(64, 2))
    probe = LinearProbe().fit(Z, Y)
    optimum = least_squares_loss(Z, Y)
    assert probe.train_loss_ <= optimum * 1.01


def test_probe_predict_requires_fit():
    with pytest.raises(Exception, match="fitted"):
        LinearProbe().predict(np.zeros((2, 3), dtype=np.float32))


def test_least_squares_loss_handles_rank_deficiency():
    rng = np.random.default_rng(5)
    half = rng.normal(size=(20, 3))
    Z = np.concatenate([half, half], axis=1)  # duplicated columns
    Y = half @ rng.normal(size=(3, 2))
    assert least_squares_loss(Z, Y) < 1e-10


# ---- random and oracle references -------------------------------------------


def test_single_train_action_pins_both_baselines():
    train = np.array([[1.2, 0.9, 3.0]])
    rand = random_baseline(train, "rattle", seed=0)
    orac = oracle_baseline(train, np.array([0]), "rattle")
    assert np.allclose(rand.predict_random(5), np.tile(train, (5, 1)))
    test = np.array([[0.5, 2.0, 1.0]])
    assert np.allclose(orac.predict_oracle(test), train)


def test_oracle_returns_nearest_train_action():
    train = np.array([[0.5, 0.5, 1.0], [2.0, 2.0, 5.0]])
    orac = oracle_baseline(train, np.array([0, 1]), "rattle")
    pred = orac.predict_oracle(np.array([[0.6, 0.5, 1.0]]))
    assert np.allclose(pred[0], train[0])
    # a train action queried back comes out exactly
    hit = orac.predict_oracle(train[1:2])
    assert np.array_equal(hit[0], train[1])


def test_oracle_ties_resolve_to_lowest_behavior_id():
    train = np.array([[2.0, 2.0, 5.0], [0.5, 0.5, 1.0]])
    ids = np.array([7, 3])
    orac = oracle_baseline(train, ids, "rattle")
    assert list(orac.train_behavior_ids) == [3, 7]
    midpoint = np.array([[1.25, 1.25, 3.0]])
    pred = orac.predict_oracle(midpoint)
    assert np.allclose(pred[0], [0.5, 0.5, 1.0])  # behavior 3 wins the tie


def test_oracle_never_worse_than_random_any_seed():
    rng = np.random.default_rng(6)
    train = rng.uniform(0.5, 2.0, size=(10, 3))
    test = rng.uniform(0.5, 2.0, size=(12, 3))
    orac = oracle_baseline(train, np.arange(10), "swatter")
    oracle_mse = float(np.mean(np.sum(
        (orac.predict_oracle(test) - test) ** 2, axis=1)))
    for seed in range(25):
        rand = random_baseline(train, "swatter", seed=seed)
        idx = np.random.Generator(np.random.PCG64(seed)).integers(
            0, len(train), size=len(test))
        random_mse = float(np.mean(np.sum(
            (train[idx] - test) ** 2, axis=1)))
        assert oracle_mse <= random_mse + 1e-12
        # the model's own draws must match the seeded generator
        assert np.allclose(rand.predict_random(len(test)), train[idx])


def test_random_predictions_are_pure_in_seed():
    train = np.random.default_rng(7).uniform(0.5, 2.0, size=(6, 3))
    rand = random_baseline(train, "swatter", seed=11)
    a = rand.predict_random(8)
    b = rand.predict_random(8)
    assert np.array_equal(a, b)
    other = random_baseline(train, "swatter", seed=12)
    assert not np.array_equal(a, other.predict_random(8))


def test_prediction_methods_check_model_kind():
    train = np.array([[1.0, 1.0, 2.0], [1.5, 0.8, 4.0]])
    rand = random_baseline(train, "rattle", seed=0)
    orac = oracle_baseline(train, np.array([0, 1]), "rattle")
    with pytest.raises(ValueError, match="kind"):
        rand.predict_oracle(train)
    with pytest.raises(ValueError, match="kind"):
        orac.predict_random(3)
    with pytest.raises(ValueError, match="audio"):
        rand.predict(np.zeros((1, 1, 16, 274), dtype=np.float32))


def test_model_rejects_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        AudioBehaviorModel(kind="psychic", task_id="rattle",
                           scaler=ActionScaler())


# ---- probe and supervised models on a tiny dataset --------------------------


@pytest.fixture(scope="module")
def rattle_model_inputs(rattle_train):
    specs, actions, stats = rattle_train
    specs_norm = ((specs - stats.mean[None, :, None, None])
                  / stats.std[None, :, None, None]).astype(np.float32)
    return specs_norm, actions, stats


def test_probe_model_predictions_respect_bounds(small_state, rattle_model_inputs):
    specs_norm, actions, _ = rattle_model_inputs
    model, probe = fit_probe_model(small_state, specs_norm, actions, "rattle",
                                   max_epochs=50)
    assert model.kind == "probe"
    assert probe.n_epochs_ <= 50
    pred = model.predict(specs_norm)
    lo = np.array([b[0] for b in TASKS["rattle"].bounds])
    hi = np.array([b[1] for b in TASKS["rattle"].bounds])
    assert np.all(pred >= lo - 1e-9) and np.all(pred <= hi + 1e-9)
    # prediction is a pure function of the inputs
    assert np.array_equal(pred, model.predict(specs_norm))


def test_probe_model_round_trip(tmp_path, small_state, rattle_model_inputs):
    specs_norm, actions, _ = rattle_model_inputs
    model, _ = fit_probe_model(small_state, specs_norm, actions, "rattle",
                               max_epochs=20)
    path = tmp_path / "probe.arlc"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.kind == "probe" and loaded.task_id == "rattle"
    assert np.array_equal(loaded.predict(specs_norm), model.predict(specs_norm))


def test_load_model_checks_channel_count(tmp_path, small_state, rattle_model_inputs):
    specs_norm, actions, _ = rattle_model_inputs
    model, _ = fit_probe_model(small_state, specs_norm, actions, "rattle",
                               max_epochs=5)
    path = tmp_path / "probe.arlc"
    save_model(model, path)
    with pytest.raises(CheckpointError, match="in_channels"):
        load_model(path, expected_in_channels=2)


def test_load_model_rejects_unknown_kind(tmp_path):
    path = tmp_path / "weird.arlc"
    save_checkpoint({"x": np.zeros(1, dtype=np.float32)}, path,
                    model_kind="psychic", meta={})
    with pytest.raises(CheckpointError, match="model_kind"):
        load_model(path)


def test_baseline_round_trips(tmp_path):
    train = np.array([[1.0, 0.8, 2.0], [1.5, 1.2, 4.0], [0.7, 1.9, 1.0]])
    rand = random_baseline(train, "rattle", seed=5)
    orac = oracle_baseline(train, np.array([2, 0, 1]), "rattle")
    save_model(rand, tmp_path / "rand.arlc")
    save_model(orac, tmp_path / "orac.arlc")
    rand2 = load_model(tmp_path / "rand.arlc")
    orac2 = load_model(tmp_path / "orac.arlc")
    assert rand2.seed == 5
    # checkpoints store float32, so round trips quantize the stored actions
    assert np.allclose(rand2.predict_random(7), rand.predict_random(7),
                       atol=1e-6)
    probe_pt = np.array([[1.4, 1.1, 3.0]])
    assert np.allclose(orac2.predict_oracle(probe_pt),
                       orac.predict_oracle(probe_pt), atol=1e-6)
    assert np.array_equal(orac2.train_behavior_ids, orac.train_behavior_ids)


def test_supervised_loss_decreases(rattle_model_inputs):
    specs_norm, actions, _ = rattle_model_inputs
    scaler = fit_normalizer(actions, "rattle")
    reg = SupervisedAudioRegressor(epochs=25, batch_size=16, seed=0,
                                   **SMALL_ARCH)
    reg.fit(specs_norm, scaler.transform(actions))
    trace = [v for _, v in reg.loss_trace_]
    assert len(trace) == 25
    assert trace[-1] < trace[0]


def test_supervised_model_deterministic_and_round_trips(tmp_path,
                                                        rattle_model_inputs):
    specs_norm, actions, stats = rattle_model_inputs
    kwargs = dict(epochs=2, batch_size=16, seed=3, **SMALL_ARCH)
    m1 = fit_supervised_model(specs_norm, actions, "rattle", stats, **kwargs)
    m2 = fit_supervised_model(specs_norm, actions, "rattle", stats, **kwargs)
    p1 = m1.predict(specs_norm)
    assert np.array_equal(p1, m2.predict(specs_norm))
    path = tmp_path / "sup.arlc"
    save_model(m1, path)
    loaded = load_model(path)
    assert loaded.kind == "supervised"
    assert np.array_equal(loaded.predict(specs_norm), p1)


def test_supervised_fit_validates_inputs(rattle_model_inputs):
    specs_norm, actions, _ = rattle_model_inputs
    reg = SupervisedAudioRegressor(epochs=1, **SMALL_ARCH)
    with pytest.raises(ValueError, match="targets"):
        reg.fit(specs_norm, actions[:-1])
    # a single sample cannot form a batch-norm batch, so nothing trains
    reg.fit(specs_norm[:1], actions[:1])
    assert reg.loss_trace_ == []


def test_supervised_predict_requires_fit():
    with pytest.raises(Exception, match="fitted"):
        SupervisedAudioRegressor(**SMALL_ARCH).predict(
            np.zeros((1, 1, 16, 274), dtype=np.float32))
