import dataclasses

import numpy as np
import pytest
from helpers import SMALL, toy_scene

from maneuver_pooling.config import ModelConfig
from maneuver_pooling.errors import ConfigError, DataError, ShapeError
from maneuver_pooling.geometry import LANE_DIRECTION
from maneuver_pooling.model import (
    GaussianSeq, ManeuverModel, ManeuverPosterior, decode, encode, make_batch, predict,
    recognize_maneuvers,
)
from maneuver_pooling.nn import Tensor, grad_check
from maneuver_pooling.train_eval import model_loss

STRATEGIES = ["slstm", "csp", "sgan", "polar", "polar_vr"]


@pytest.fixture(scope="module")
def scene():
    return toy_scene()


def small_model(pooling, maneuvers=True, seed=0, dtype=np.float64, **kw):
    return ManeuverModel(ModelConfig(pooling=pooling, maneuvers=maneuvers, **{**SMALL, **kw}), seed, dtype)


# encode

def test_encode_zero_history_zero_params(scene):
    model = small_model("sgan")
    for t in model.parameters():
        t.data[...] = 0
    zero = dataclasses.replace(scene, ego_xy=np.zeros_like(scene.ego_xy),
                               neighbor_xy=np.zeros_like(scene.neighbor_xy))
    ego, nbs = encode(zero, model)
    assert not ego.any() and not nbs.any()


@pytest.mark.parametrize("pooling", ["sgan", "polar_vr"])
def test_identical_vehicles_identical_hidden(scene, pooling):
    twin = dataclasses.replace(
        scene,
        neighbor_ids=np.array([7]), neighbor_lanes=np.array([scene.ego_lane]),
        neighbor_xy=scene.ego_xy[None].copy(), neighbor_polar=scene.ego_polar[None].copy(),
    )
    ego, nbs = encode(twin, ManeuverModel(ModelConfig(pooling=pooling)))
    assert np.array_equal(ego, nbs[0])


def test_encoder_gradient(scene):
    model = small_model("polar_vr")
    batch = make_batch([scene], model.cfg)
    enc = [t for name, t in model.params.items() if name.startswith("enc.")]
    w = np.random.default_rng(0).normal(size=(3, model.cfg.enc_hidden))
    assert grad_check(lambda: (model.encode(batch) * w).sum(), enc) < 1e-4


def test_encode_rejects_wrong_history_length(scene):
    short = dataclasses.replace(scene, ego_xy=scene.ego_xy[:10])
    with pytest.raises(ShapeError):
        encode(short, small_model("sgan"))


def test_polar_model_needs_polar_features(scene):
    flat = dataclasses.replace(scene, ego_polar=None, neighbor_polar=None, future_polar=None)
    with pytest.raises(DataError):
        encode(flat, small_model("polar"))
    encode(flat, small_model("sgan"))


# recognize_maneuvers

def test_maneuver_heads_uniform_at_zero():
    model = small_model("sgan")
    for name in ("head.loc.weight", "head.loc.bias", "head.acc.weight", "head.acc.bias"):
        model.params[name].data[...] = 0
    post = recognize_maneuvers(np.zeros(model.context_width), model)
    np.testing.assert_allclose(post.p_loc, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(post.p_acc, 1 / 3, atol=1e-15)


def test_maneuver_heads_normalised():
    model = small_model("sgan")
    rng = np.random.default_rng(1)
    for _ in range(50):
        post = recognize_maneuvers(rng.normal(scale=5, size=model.context_width), model)
        assert abs(post.p_loc.sum() - 1) < 1e-9 and abs(post.p_acc.sum() - 1) < 1e-9
        assert np.all(post.p_loc > 0) and np.all(post.p_acc > 0)


def test_argmax_invariant_to_logit_shift():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        shifted = ManeuverPosterior.from_logits(a + rng.normal() * 10, b)
        assert shifted.map_pair() == ManeuverPosterior.from_logits(a, b).map_pair()


def test_maneuver_heads_shape_error():
    with pytest.raises(ShapeError):
        recognize_maneuvers(np.zeros(3), small_model("sgan"))


# decode

@pytest.mark.parametrize("pooling", ["sgan", "polar_vr"])
def test_squash_keeps_parameters_valid(pooling):
    model = small_model(pooling)
    k = 5 if pooling == "sgan" else 6
    for value in (1000.0, -1000.0):
        raw = Tensor(np.full((25, 2, k), value))
        for g in model.gaussians(raw):
            assert np.all(g.sigma > 0) and np.all(np.isfinite(g.sigma))
            if g.rho is not None:
                assert np.all(np.abs(g.rho) < 1)


def test_horizon_layout_zero_output():
    zero = Tensor(np.zeros((25, 1, 5)))
    mu, _, _ = ManeuverModel(ModelConfig(pooling="sgan")).squash(zero)
    assert not mu.data.any()
    mu, _, _ = ManeuverModel(ModelConfig(pooling="polar_vr")).squash(Tensor(np.zeros((25, 1, 6))))
    np.testing.assert_allclose(mu.data[:, 0], [[0.0, LANE_DIRECTION, 0.0]] * 25, atol=1e-7)


def test_horizon_layout_unit_output():
    cfg = ModelConfig(pooling="sgan")
    mu, log_sigma, _ = ManeuverModel(cfg, dtype=np.float64).squash(Tensor(np.ones((25, 1, 5))))
    steps = np.arange(1, 26)
    np.testing.assert_allclose(mu.data[:, 0, 1], cfg.step_length * steps)
    np.testing.assert_allclose(mu.data[:, 0, 0], cfg.lateral_scale)
    np.testing.assert_allclose(np.exp(log_sigma.data[:, 0, 1]), np.e * cfg.step_length * steps)


def test_horizon_layout_angle_unit_spans_lateral_scale():
    cfg = ModelConfig(pooling="polar_vr")
    scale = ManeuverModel(cfg).output_scale()
    np.testing.assert_allclose(scale[:, 0] * scale[:, 1], cfg.lateral_scale)


def test_increment_layout_accumulates():
    cfg = ModelConfig(pooling="sgan", output_layout="increments")
    mu, _, _ = ManeuverModel(cfg, dtype=np.float64).squash(Tensor(np.ones((25, 1, 5))))
    np.testing.assert_allclose(mu.data[:, 0, 1], cfg.position_scale * np.arange(1, 26))


def test_absolute_layout_is_constant_scale():
    cfg = ModelConfig(pooling="sgan", output_layout="absolute")
    mu, _, _ = ManeuverModel(cfg, dtype=np.float64).squash(Tensor(np.ones((25, 1, 5))))
    np.testing.assert_allclose(mu.data[:, 0], cfg.position_scale)


def test_unknown_output_layout():
    with pytest.raises(ConfigError):
        ModelConfig(output_layout="spiral")


def test_decode_horizon_and_kinds():
    model = ManeuverModel(ModelConfig(pooling="sgan"))
    g = decode(np.zeros(model.context_width), model, loc=0, acc=0)
    assert isinstance(g, GaussianSeq) and len(g) == 25 and g.kind == "bivariate"
    tri = ManeuverModel(ModelConfig(pooling="polar_vr"))
    g = decode(np.zeros(tri.context_width), tri, loc=1, acc=2)
    assert g.kind == "trivariate" and g.mu.shape == (25, 3) and g.rho is None


def test_decode_shape_error():
    with pytest.raises(ShapeError):
        decode(np.zeros(3), small_model("sgan"), loc=0, acc=0)


def test_trivariate_means_convert_to_cartesian():
    mu = np.array([[5.0, np.pi / 2, 0.0], [10.0, 0.0, 1.0]])
    g = GaussianSeq("trivariate", mu, np.ones_like(mu))
    np.testing.assert_allclose(g.mean_xy(), [[0.0, 5.0], [10.0, 0.0]], atol=1e-12)


# predict

@pytest.mark.parametrize("pooling", STRATEGIES)
def test_predict_full_mode(scene, pooling):
    out = predict(scene, small_model(pooling), "full")
    assert len(out.modes) == 9
    assert {m[0] for m in out.modes} == {(p, q) for p in range(3) for q in range(3)}
    assert abs(sum(m[1] for m in out.modes) - 1) < 1e-6
    for pair, weight, _ in out.modes:
        assert weight == pytest.approx(out.posterior.p_loc[pair[0]] * out.posterior.p_acc[pair[1]])


def test_predict_map_mode_is_argmax(scene):
    rng = np.random.default_rng(3)
    for seed in range(10):
        model = small_model("polar_vr", seed=seed)
        for name in ("head.loc.bias", "head.acc.bias"):
            model.params[name].data[...] = rng.normal(scale=3, size=3)
        out = predict(scene, model, "map")
        assert len(out.modes) == 1 and out.modes[0][1] == 1.0
        assert out.modes[0][0] == (int(np.argmax(out.posterior.p_loc)), int(np.argmax(out.posterior.p_acc)))
        full = predict(scene, model, "full")
        best = max(full.modes, key=lambda m: m[1])
        assert best[0] == out.modes[0][0]
        np.testing.assert_allclose(best[2].mu, out.modes[0][2].mu, rtol=1e-12, atol=1e-12)


def test_predict_without_maneuvers(scene):
    model = small_model("sgan", maneuvers=False)
    for mode in ("full", "map"):
        out = predict(scene, model, mode)
        assert len(out.modes) == 1 and out.modes[0][1] == 1.0 and out.posterior is None
    assert not any(name.startswith("head.") for name in model.params)


def test_predict_deterministic(scene):
    model = small_model("csp")
    a, b = predict(scene, model, "full"), predict(scene, model, "full")
    for ma, mb in zip(a.modes, b.modes):
        assert ma[0] == mb[0] and ma[1] == mb[1] and np.array_equal(ma[2].mu, mb[2].mu)


@pytest.mark.parametrize("pooling", ["sgan", "polar", "polar_vr"])
def test_predict_invariant_to_neighbor_order(scene, pooling):
    model = ManeuverModel(ModelConfig(pooling=pooling))
    perm = np.array([1, 0])
    swapped = dataclasses.replace(
        scene, neighbor_ids=scene.neighbor_ids[perm], neighbor_lanes=scene.neighbor_lanes[perm],
        neighbor_xy=scene.neighbor_xy[perm], neighbor_polar=scene.neighbor_polar[perm])
    a, b = predict(scene, model, "full"), predict(swapped, model, "full")
    for ma, mb in zip(a.modes, b.modes):
        assert ma[1] == mb[1] and np.array_equal(ma[2].mu, mb[2].mu) and np.array_equal(ma[2].sigma, mb[2].sigma)


def test_batch_matches_single_predictions(scene):
    model = small_model("slstm")
    other = dataclasses.replace(scene, sample_id="x", ego_xy=scene.ego_xy * 1.01)
    batch = make_batch([scene, other], model.cfg)
    means = model.predict_means(batch)
    single = predict(other, model, "map").modes[0][2].mean_xy()
    np.testing.assert_allclose(means[1], single, rtol=1e-10, atol=1e-10)


# end-to-end differentiability

@pytest.mark.parametrize("pooling", STRATEGIES)
@pytest.mark.parametrize("maneuvers", [True, False])
def test_loss_gradient_end_to_end(scene, pooling, maneuvers):
    model = small_model(pooling, maneuvers=maneuvers, seed=1)
    batch = make_batch([scene], model.cfg)
    loss, parts = model_loss(model, batch)
    assert np.isfinite(parts["loss"])
    # step 1e-4 keeps central differences of tiny decoder gradients above roundoff
    assert grad_check(lambda: model_loss(model, batch)[0], model.parameters(), eps=1e-4) < 1e-4
