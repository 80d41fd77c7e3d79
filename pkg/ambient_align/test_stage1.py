"""
Tests for stage 1: clustering-driven spatial encoder training.
"""

import logging

import numpy as np
import pytest

from ambient_align.config import config_from_dict
from ambient_align.conftest import desk_stage1, tiny_config_dict
from ambient_align.nnprims import ParamSet, finite_difference_gradient_check
from ambient_align.stage1 import (
    phase_for_epoch, video_spatial_loss, video_hard_labels, refinement_loss, refinement_loss_with_grad,
    sensor_total_loss, build_video_head, run_stage1,
)
from ambient_align.synthdata import IDLE


def test_phase_schedule():
    phases = [phase_for_epoch(e, 2, 3) for e in range(7)]
    assert phases == ["cluster", "cluster", "joint", "joint", "joint", "refine", "refine"]


def test_video_spatial_loss_examples():
    assert video_spatial_loss(np.zeros((3, 7)), np.array([0, 1, 6])) == pytest.approx(1.9459, abs=1e-4)
    assert video_spatial_loss(np.array([[50.0, 0.0], [0.0, 50.0]]), np.array([0, 1])) < 1e-12

    logits = np.log(np.array([[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]]))
    assert video_spatial_loss(logits, np.array([0, 1])) == pytest.approx(1.0397, abs=1e-4)


def test_video_spatial_loss_without_confident_samples(caplog):
    with caplog.at_level(logging.WARNING):
        assert video_spatial_loss(np.zeros((0, 4)), np.zeros(0, dtype=int)) == 0.0
    assert "No confident samples" in caplog.text


def test_video_hard_labels_ties_go_low():
    assert video_hard_labels(np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])).tolist() == [1, 0]


def test_refinement_loss_examples():
    probs = np.array([[0.2, 0.8], [0.5, 0.5]])
    logits = np.array([[0.0, 1.0], [2.0, 1.0]])
    assert refinement_loss(probs, logits) == pytest.approx(-(np.log(0.8) + np.log(0.5)) / 2)
    assert refinement_loss(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0

    sensor = np.array([[0.6, 0.3, 0.1]])
    assert refinement_loss(sensor, np.array([[0.0, 1.0, 2.0]])) == pytest.approx(np.log(10))
    assert refinement_loss(sensor, np.array([[1.0, 1.0, 0.0]])) == pytest.approx(-np.log(0.6))
    assert refinement_loss(np.array([[0.0, 1.0]]), np.array([[0.0, 5.0]])) == 0.0


def test_refinement_loss_gradient_check(rng):
    video_logits = rng.normal(size=(4, 3))
    params = ParamSet({"f": rng.normal(size=(4, 5)), "c": rng.normal(size=(3, 5))})

    def loss_fn(p):
        loss, df, dc = refinement_loss_with_grad(p["f"], p["c"], 0.5, video_logits)
        return loss, {"f": df, "c": dc}

    assert finite_difference_gradient_check(loss_fn, params, tolerance=1e-6).passed


def test_sensor_total_loss():
    assert sensor_total_loss(2.0, 1.0, 1.0, 1.5) == 3.5
    assert sensor_total_loss(1.0, 2.0, 1.0, 0.0) == 1.0
    assert sensor_total_loss(1.0, 2.0, 0.0, 0.0) == 0.0


def test_video_head_shape():
    head = build_video_head(8, 4, seed=0)
    assert head["head.weight"].shape == (4, 8)
    assert np.all(head["head.bias"] == 0)


def test_tiny_stage1_run(tiny_dataset, tiny_config):
    """Sanity: stage 1 runs every phase and keeps the cluster bookkeeping consistent."""
    epochs = []
    result = run_stage1(tiny_dataset, tiny_config, on_epoch_end=lambda epoch, snap: epochs.append(epoch))

    log = result.log
    assert epochs == log["epoch"].tolist()
    assert log["phase"].tolist()[:2] == ["cluster", "joint"]
    assert result.stopped_reason in ("converged", "max_epochs")
    for column in ("L_cluster", "L_video_spatial", "L_refine", "change_rate", "confident_fraction", "purity"):
        assert np.all(np.isfinite(log[column])), column

    state = result.state
    state.check()
    assert state.num_samples == tiny_dataset.indices("pretrain").size
    assert state.num_clusters == tiny_config.num_clusters == tiny_config.scenario.num_sources
    assert np.all(state.cluster_sizes >= 1)
    idle = tiny_dataset.source_ids[tiny_dataset.indices("pretrain")] == IDLE
    assert np.all(log["idle_fraction"] == pytest.approx(idle.mean()))
    assert 0.0 <= result.final_purity <= 1.0


def test_stage1_is_deterministic(tiny_dataset, tiny_config):
    a = run_stage1(tiny_dataset, tiny_config)
    b = run_stage1(tiny_dataset, tiny_config)
    assert a.sensor_encoder.params.fingerprint() == b.sensor_encoder.params.fingerprint()
    assert a.video_encoder.params.fingerprint() == b.video_encoder.params.fingerprint()
    np.testing.assert_array_equal(a.state.labels, b.state.labels)


def test_refinement_and_confidence_ablations(tiny_dataset):
    data = tiny_config_dict()
    data["stage1"].update({"refine": False, "confidence_percentile": 100.0})
    result = run_stage1(tiny_dataset, config_from_dict(data))
    assert np.all(result.log["L_refine"] == 0.0)
    assert np.all(result.log["confident_fraction"] == 1.0)


@pytest.mark.slow
def test_noise_free_stage1_recovers_sources():
    _, dataset, result = desk_stage1(0, 0.0)
    assert len(dataset) >= 1000
    assert result.state.num_clusters == 7
    assert result.final_purity >= 0.99


@pytest.mark.slow
def test_noisy_stage1_recovers_sources():
    purities = [desk_stage1(seed, 0.3)[2].final_purity for seed in (0, 1, 2)]
    assert np.median(purities) >= 0.90, purities


@pytest.mark.slow
def test_confident_subset_does_not_hurt_purity():
    filtered = [desk_stage1(seed, 0.3)[2].final_purity for seed in (0, 1, 2)]
    unfiltered = [desk_stage1(seed, 0.3, 100.0)[2].final_purity for seed in (0, 1, 2)]
    assert np.median(filtered) >= np.median(unfiltered), (filtered, unfiltered)


@pytest.mark.slow
def test_label_changes_settle_before_termination():
    _, _, result = desk_stage1(0, 0.3)
    log = result.log.set_index("epoch")
    final = log["change_rate"].iloc[-1]
    assert log.loc[1, "change_rate"] > 0.0
    assert result.stopped_reason == "converged"
    assert final < 0.05
    assert final < log.loc[1, "change_rate"]
