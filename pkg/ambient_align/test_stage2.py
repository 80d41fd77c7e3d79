"""
Tests for adaptive negative weighting, the weighted contrastive loss and stage 2 training.
"""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from ambient_align.config import Stage2Config, config_from_dict
from ambient_align.conftest import desk_stage2, tiny_config_dict
from ambient_align.encoders import build_encoders
from ambient_align.evaluation import train_linear_probe
from ambient_align.nnprims import ParamSet, ema_update, finite_difference_gradient_check
from ambient_align.stage2 import (
    EASY, HARD, FALSE, EXCLUDED,
    spatial_similarity, spatial_weight, temporal_similarity, temporal_weight, combined_weights,
    weighted_infonce, weighted_infonce_with_grad, negative_categories, quantile_rows,
    stage2_loss_and_grads, contrastive_batches, run_stage2, analyze_weights,
)
from ambient_align.synthdata import IDLE
from ambient_align.test_encoders import SMALL, FRAME


def _pair(cosine):
    """Two unit 2-D vectors with the given cosine."""
    return np.array([[1.0, 0.0], [cosine, math.sqrt(1.0 - cosine ** 2)]])


# similarities and weights

def test_spatial_similarity_examples():
    s = spatial_similarity(_pair(-0.3), _pair(0.5))
    assert s[0, 1] == pytest.approx(0.5, abs=1e-6)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)

    s = spatial_similarity(_pair(-0.3), _pair(-0.8))
    assert s[0, 1] == 0.0


def test_spatial_similarity_range(rng):
    s = spatial_similarity(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    assert np.all(s >= 0) and np.all(s <= 1)


def test_spatial_weight_endpoints():
    np.testing.assert_allclose(spatial_weight(np.array([0.0, 1.0, 0.5]), 3.0), [1.0, 3.0, 2.0])
    with pytest.raises(ValueError):
        spatial_weight(np.zeros(2), 1.0)


def test_temporal_similarity_examples():
    assert temporal_similarity(_pair(1.0), _pair(1.0))[0, 1] == pytest.approx(1.0, abs=1e-6)
    assert temporal_similarity(_pair(1.0), _pair(-1.0))[0, 1] == pytest.approx(0.0, abs=1e-6)
    assert temporal_similarity(_pair(0.4), _pair(0.6))[0, 1] == pytest.approx(0.5, abs=1e-6)


def test_temporal_weight_examples():
    assert temporal_weight(np.array(1.0), np.array(1.0)) == 0.0
    np.testing.assert_array_equal(temporal_weight(np.array([0.3, 1.0]), np.array([-0.5, 0.0])), [1.0, 1.0])
    assert temporal_weight(np.array(0.0), np.array(0.9)) == 1.0


def test_combined_weight_endpoints():
    s_spatial = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
    s_temporal = np.array([[1.0, 0.7, -0.2], [0.7, 1.0, 1.0], [-0.2, 1.0, 1.0]])
    weights = combined_weights(spatial_weight(s_spatial, 3.0), temporal_weight(s_spatial, s_temporal))
    assert np.all(np.diag(weights) == 0)
    assert weights[0, 1] == 1.0  # easy
    assert weights[0, 2] == 3.0  # hard
    assert weights[1, 2] == 0.0  # false


# weighted InfoNCE

def _plain_infonce(z_video, z_sensor, tau):
    logits = z_video @ z_sensor.T / tau
    v2s = np.mean(logsumexp(logits, axis=1) - np.diag(logits))
    s2v = np.mean(logsumexp(logits, axis=0) - np.diag(logits))
    return 0.5 * (v2s + s2v)


def _loop_oracle(z_video, z_sensor, weights, tau):
    n = z_video.shape[0]
    s = [[sum(z_video[i, k] * z_sensor[j, k] for k in range(z_video.shape[1])) / tau for j in range(n)]
         for i in range(n)]
    v2s = s2v = 0.0
    for i in range(n):
        den_v = math.exp(s[i][i]) + sum(weights[i, j] * math.exp(s[i][j]) for j in range(n) if j != i)
        den_s = math.exp(s[i][i]) + sum(weights[j, i] * math.exp(s[j][i]) for j in range(n) if j != i)
        v2s -= math.log(math.exp(s[i][i]) / den_v)
        s2v -= math.log(math.exp(s[i][i]) / den_s)
    return 0.5 * (v2s + s2v) / n


def test_unit_weights_equal_plain_infonce(rng):
    z_video, z_sensor = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
    weights = combined_weights(np.ones((8, 8)), np.ones((8, 8)))
    assert abs(weighted_infonce(z_video, z_sensor, weights, 0.1) - _plain_infonce(z_video, z_sensor, 0.1)) < 1e-12


def test_zero_weights_give_zero_loss(rng):
    z_video, z_sensor = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert weighted_infonce(z_video, z_sensor, np.zeros((5, 5)), 0.1) == 0.0


def test_small_batch_matches_loop_oracle(rng):
    z_video, z_sensor = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    weights = combined_weights(rng.uniform(0, 3, size=(3, 3)), np.ones((3, 3)))
    expected = _loop_oracle(z_video, z_sensor, weights, 0.5)
    assert weighted_infonce(z_video, z_sensor, weights, 0.5) == pytest.approx(expected, abs=1e-10)


def test_loss_is_monotone_in_each_weight(rng):
    z_video, z_sensor = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    weights = combined_weights(rng.uniform(0, 2, size=(4, 4)), np.ones((4, 4)))
    base = weighted_infonce(z_video, z_sensor, weights, 0.2)
    for i, j in [(0, 1), (2, 3), (3, 0)]:
        bumped = weights.copy()
        bumped[i, j] += 0.5
        assert weighted_infonce(z_video, z_sensor, bumped, 0.2) >= base


def test_large_logits_stay_finite():
    z = np.array([[30.0, 0.0], [0.0, 30.0]])
    loss = weighted_infonce(z, z, combined_weights(np.ones((2, 2)), np.ones((2, 2))), 0.1)
    assert np.isfinite(loss)


def test_weighted_infonce_gradient_check(rng):
    weights = combined_weights(rng.uniform(0, 3, size=(4, 4)), np.ones((4, 4)))
    params = ParamSet({"zv": rng.normal(size=(4, 6)), "zs": rng.normal(size=(4, 6))})

    def loss_fn(p):
        loss, d_video, d_sensor = weighted_infonce_with_grad(p["zv"], p["zs"], weights, 0.5)
        return loss, {"zv": d_video, "zs": d_sensor}

    report = finite_difference_gradient_check(loss_fn, params, tolerance=1e-6)
    assert report.passed, report.summary()


def test_full_stage2_loss_gradient_check(rng):
    encoders = build_encoders(SMALL, 2, FRAME, seed=11, dtype=np.float64)
    sensor_temporal, video_temporal = encoders.sensor_temporal, encoders.video_temporal
    momentum_sensor, momentum_video = sensor_temporal.clone("momentum"), video_temporal.clone("momentum")
    sensor_windows = rng.normal(size=(4, 2, 12))
    clips = rng.uniform(size=(4, 4) + FRAME)
    v_spatial = rng.normal(size=(4, SMALL.embed_dim))
    s_spatial = rng.normal(size=(4, SMALL.embed_dim))
    cfg = Stage2Config(tau_contrast=0.5)

    joint = ParamSet()
    for prefix, encoder in (("sensor", sensor_temporal), ("video", video_temporal)):
        for name in encoder.params:
            joint.add(f"{prefix}/{name}", encoder.params[name])

    def loss_fn(_):
        loss = stage2_loss_and_grads(sensor_windows, clips, v_spatial, s_spatial, sensor_temporal,
                                     video_temporal, momentum_sensor, momentum_video, cfg)
        grads = {}
        for prefix, encoder in (("sensor", sensor_temporal), ("video", video_temporal)):
            grads.update({f"{prefix}/{name}": g.copy() for name, g in encoder.params.grads.items()})
        return loss, grads

    report = finite_difference_gradient_check(loss_fn, joint, tolerance=1e-4, max_coordinates=32)
    assert report.passed, report.summary()


def test_momentum_step_is_bounded(rng):
    encoders = build_encoders(SMALL, 2, FRAME, seed=2, dtype=np.float64)
    online = encoders.sensor_temporal
    momentum = online.clone("momentum")
    for name in online.params:
        online.params[name][...] += rng.normal(size=online.params[name].shape)

    before = {name: momentum.params[name].copy() for name in momentum.params}
    ema_update(momentum.params, online.params, 0.9)
    for name in momentum.params:
        gap = np.max(np.abs(online.params[name] - before[name]), initial=0.0)
        step = np.max(np.abs(momentum.params[name] - before[name]), initial=0.0)
        assert step <= 0.1 * gap + 1e-12


# ground-truth instrumentation

def test_negative_categories():
    categories = negative_categories(np.array([0, 0, 1, IDLE, 0]), np.array([0, 1, 0, IDLE, 0]))
    assert categories[0, 1] == HARD
    assert categories[0, 2] == EASY
    assert categories[0, 4] == FALSE
    assert categories[0, 3] == EXCLUDED
    assert np.all(np.diag(categories) == EXCLUDED)


def test_quantile_rows():
    rows = quantile_rows(3, {"easy": [np.array([1.0, 1.0])], "hard": [np.array([1.0, 2.0, 3.0, 4.0])], "false": []})
    assert [row["category"] for row in rows] == ["easy", "hard"]
    hard = rows[1]
    assert hard["epoch"] == 3 and hard["count"] == 4
    assert hard["q0"] == 1.0 and hard["q100"] == 4.0 and hard["q75"] == pytest.approx(3.25)


# training

def test_contrastive_batches_never_leave_a_single_window():
    sizes = [batch.size for batch in contrastive_batches(np.arange(33), 16)]
    assert sizes == [16, 17]
    assert [batch.size for batch in contrastive_batches(np.arange(32), 16)] == [16, 16]
    assert [batch.size for batch in contrastive_batches(np.arange(5), 16)] == [5]

    order = np.random.default_rng(0).permutation(49)
    merged = np.concatenate(contrastive_batches(order, 16))
    np.testing.assert_array_equal(merged, order)


@pytest.fixture(scope="module")
def tiny_stage2(tiny_dataset):
    config = config_from_dict(tiny_config_dict())
    spatial = build_encoders(config.encoder, tiny_dataset.scenario.num_channels,
                             tiny_dataset.video.shape[2:], seed=99)
    frozen = spatial.sensor_spatial.params.fingerprint() + spatial.video_spatial.params.fingerprint()
    result = run_stage2(tiny_dataset, spatial.sensor_spatial, spatial.video_spatial, config)
    return config, spatial, frozen, result


def test_stage2_keeps_spatial_encoders_frozen(tiny_stage2):
    _, spatial, frozen, _ = tiny_stage2
    assert spatial.sensor_spatial.params.fingerprint() + spatial.video_spatial.params.fingerprint() == frozen


def test_stage2_log_and_weight_quantiles(tiny_stage2):
    """Sanity: stage 2 logs a measurement epoch plus every training epoch."""
    config, _, _, result = tiny_stage2
    log = result.log
    assert log["epoch"].tolist() == list(range(config.stage2.epochs + 1))
    assert np.all(np.isfinite(log["loss"]))
    for column in ("mean_W_easy", "mean_W_hard", "mean_W_false", "median_W_easy", "count_easy"):
        assert column in log.columns
    assert {"epoch", "category", "count", "q0", "q50", "q100"} <= set(result.weights_cdf.columns)
    assert np.all(result.weights_cdf["q0"] <= result.weights_cdf["q100"])


def test_stage2_trains_online_and_tracks_momentum(tiny_stage2, tiny_dataset):
    config, _, _, result = tiny_stage2
    fresh = build_encoders(config.encoder, tiny_dataset.scenario.num_channels, tiny_dataset.video.shape[2:],
                           config.seed)
    assert result.sensor_temporal.params.fingerprint() != fresh.sensor_temporal.params.fingerprint()
    assert result.momentum_sensor.role == "momentum"
    assert result.momentum_sensor.params.fingerprint() != result.sensor_temporal.params.fingerprint()


def test_analyze_weights(tiny_stage2, tiny_dataset):
    config, spatial, _, result = tiny_stage2
    analysis = analyze_weights(tiny_dataset, spatial.sensor_spatial, spatial.video_spatial,
                               result.momentum_sensor, result.momentum_video, config.stage2, top_k=2)
    assert {"mean_W_easy", "mean_W_hard", "mean_W_false", "hard_minus_false"} <= set(analysis.summary)
    assert list(analysis.classwise.columns) == ["class_label", "source_id", "action_id",
                                                "mean_W_hard", "mean_W_false", "separation"]
    assert len(analysis.top_classes) <= 2
    assert analysis.phase_space is None

    pretrain = tiny_dataset.indices("pretrain")
    query = int(tiny_dataset.labels["window_index"].iloc[pretrain[0]])
    analysis = analyze_weights(tiny_dataset, spatial.sensor_spatial, spatial.video_spatial,
                               result.momentum_sensor, result.momentum_video, config.stage2, query=query)
    assert len(analysis.phase_space) == pretrain.size - 1
    assert np.all(analysis.phase_space["weight"] >= 0)

    missing = int(tiny_dataset.labels["window_index"].iloc[tiny_dataset.indices("probe_test")[0]])
    with pytest.raises(KeyError):
        analyze_weights(tiny_dataset, spatial.sensor_spatial, spatial.video_spatial,
                        result.momentum_sensor, result.momentum_video, config.stage2, query=missing)


def _weights_separate(log) -> bool:
    easy_stable = bool(np.all((log["mean_W_easy"] >= 0.9) & (log["mean_W_easy"] <= 1.1)))
    initial = log.iloc[0]
    overlapping_at_start = abs(initial["mean_W_hard"] - initial["mean_W_false"]) < 0.1
    separated_at_end = log.iloc[-1]["hard_minus_false"] > 0.3
    return easy_stable and overlapping_at_start and separated_at_end


@pytest.mark.slow
def test_trained_weights_separate_hard_from_false_negatives():
    outcomes = []
    for seed in (0, 1, 2):
        config, _, _, result = desk_stage2(seed)
        assert config.stage2.epochs == 50
        assert result.log["epoch"].iloc[0] == 0
        outcomes.append(_weights_separate(result.log))
    assert sum(outcomes) >= 2, outcomes


@pytest.mark.slow
def test_weighted_loss_scores_at_least_as_well_as_uniform():
    scores = {"full": [], "uniform": []}
    for seed in (0, 1, 2):
        for mode in scores:
            config, dataset, stage1, result = desk_stage2(seed, mode)
            probed = train_linear_probe(dataset, stage1.sensor_encoder, result.sensor_temporal,
                                        config.probe, config.seed)
            scores[mode].append(probed.weighted_f1)
    assert np.median(scores["full"]) >= np.median(scores["uniform"]), scores
