"""
Tests for downstream metrics, the linear probe and embedding export.
"""

import logging

import numpy as np
import pandas as pd
import pytest

from ambient_align.config import ProbeConfig, config_from_dict
from ambient_align.conftest import tiny_config_dict
from ambient_align.encoders import build_encoders
from ambient_align.evaluation import (
    weighted_f1, average_precision, mean_average_precision, temporal_pool_sequence, sequence_label,
    fit_linear_probe, train_linear_probe, sequence_splits, embedding_table, export_embeddings, PROBE_SPLITS,
)


# weighted F1

def test_weighted_f1_examples():
    assert weighted_f1([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    # supports (3, 1) with per-class F1 (1.0, 0.0)
    assert weighted_f1([0, 0, 0, 2], [0, 0, 0, 1]) == pytest.approx(0.75)


@pytest.mark.parametrize("seed", range(100))
def test_weighted_f1_matches_confusion_matrix_formula(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 80))
    num_classes = int(rng.integers(2, 8))
    labels = rng.integers(0, num_classes, size=n)
    predictions = np.where(rng.uniform(size=n) < 0.6, labels, rng.integers(0, num_classes, size=n))

    expected = 0.0
    for c in np.unique(labels):
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        expected += f1 * np.sum(labels == c) / labels.size
    assert weighted_f1(predictions, labels) == pytest.approx(expected, abs=1e-12)


def test_weighted_f1_relabel_invariance(rng):
    labels = rng.integers(0, 3, size=30)
    predictions = rng.integers(0, 3, size=30)
    mapping = np.array([2, 0, 1])
    assert weighted_f1(mapping[predictions], mapping[labels]) == pytest.approx(weighted_f1(predictions, labels))


def test_weighted_f1_rejects_bad_input():
    with pytest.raises(ValueError):
        weighted_f1([], [])
    with pytest.raises(ValueError):
        weighted_f1([0, 1], [0])


# mean average precision

def _brute_force_ap(scores, positives):
    n = scores.size
    precisions = []
    for i in np.nonzero(positives)[0]:
        ahead = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        precisions.append(sum(positives[j] for j in ahead) / len(ahead))
    return float(np.mean(precisions))


def test_average_precision_example():
    assert average_precision(np.array([0.9, 0.5, 0.1]), np.array([True, False, True])) == pytest.approx(0.8333, abs=1e-4)


def test_mean_average_precision_perfect_ranking():
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.7]])
    assert mean_average_precision(scores, np.array([0, 0, 1])) == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_mean_average_precision_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 40))
    num_classes = int(rng.integers(2, 6))
    # coarse scores so ties exercise the index tie-break
    scores = np.round(rng.normal(size=(n, num_classes)), 1)
    scores[3, 0] = scores[7, 0]
    labels = rng.integers(0, num_classes, size=n)
    expected = np.mean([_brute_force_ap(scores[:, c], labels == c)
                        for c in range(num_classes) if np.any(labels == c)])
    assert abs(mean_average_precision(scores, labels) - expected) < 1e-12


def test_mean_average_precision_monotone_invariance(rng):
    scores = rng.normal(size=(20, 4))
    labels = rng.integers(0, 4, size=20)
    assert mean_average_precision(3 * np.exp(scores) + 1, labels) == mean_average_precision(scores, labels)


def test_mean_average_precision_errors():
    with pytest.raises(ValueError, match="positive"):
        mean_average_precision(np.zeros((2, 2)), np.array([5, 5]))
    with pytest.raises(ValueError, match="finite"):
        mean_average_precision(np.array([[np.nan, 0.0]]), np.array([0]))


# pooling

def test_temporal_pool_sequence_examples():
    np.testing.assert_array_equal(temporal_pool_sequence(np.array([[1.0, 2.0]])), [1.0, 2.0])
    np.testing.assert_array_equal(temporal_pool_sequence(np.array([[3.0, 4.0], [3.0, 4.0]])), [3.0, 4.0])
    np.testing.assert_array_equal(temporal_pool_sequence(np.array([[1.0, 0.0], [0.0, 1.0]])), [0.5, 0.5])
    with pytest.raises(ValueError):
        temporal_pool_sequence(np.zeros((0, 2)))


def test_sequence_label_majority_non_idle():
    assert sequence_label(np.array([6, 6, 6, 2, 2, 1]), idle_label=6) == 2
    assert sequence_label(np.array([6, 6]), idle_label=6) == 6
    assert sequence_label(np.array([3, 1]), idle_label=6) == 1


def test_sequence_splits_never_share_a_sequence(tiny_dataset):
    splits = sequence_splits(tiny_dataset, seed=3)
    assert set(splits) == set(PROBE_SPLITS)
    train, val, test = (set(splits[name].tolist()) for name in PROBE_SPLITS)
    assert not train & val and not train & test and not val & test
    assert all(splits[name].size >= 1 for name in PROBE_SPLITS)

    probe_windows = np.concatenate([tiny_dataset.indices(name) for name in PROBE_SPLITS])
    assert train | val | test == set(np.unique(tiny_dataset.sequence_ids[probe_windows]).tolist())
    for name in PROBE_SPLITS:
        np.testing.assert_array_equal(sequence_splits(tiny_dataset, seed=3)[name], splits[name])


# probe

def _one_hot_splits(rng, per_class=10, num_classes=4):
    features, labels = {}, {}
    for split in PROBE_SPLITS:
        y = rng.permutation(np.repeat(np.arange(num_classes), per_class))
        features[split] = np.eye(num_classes)[y]
        labels[split] = y
    return features, labels


def test_probe_separates_one_hot_features(rng):
    features, labels = _one_hot_splits(rng)
    result = fit_linear_probe(features, labels, 4, ProbeConfig(epochs=60, learning_rate=0.05, batch_size=8), seed=0)
    assert result.weighted_f1 == 1.0
    assert result.mean_ap == 1.0
    assert 1 <= result.best_epoch <= 60
    assert [sum(row) for row in result.confusion] == result.support
    if level == "sequence":
        assert sum(result.support) == sequence_splits(tiny_dataset, config.seed)["probe_test"].size


def test_probe_single_class_split_warns(rng, caplog):
    features = {split: rng.normal(size=(5, 3)) for split in PROBE_SPLITS}
    labels = {split: np.full(5, 2) for split in PROBE_SPLITS}
    with caplog.at_level(logging.WARNING):
        result = fit_linear_probe(features, labels, 4, ProbeConfig(epochs=2), seed=0)
    assert result.weighted_f1 == 1.0
    assert result.warnings and "single class" in result.warnings[0]


def test_probe_rejects_empty_split(rng):
    features, labels = _one_hot_splits(rng)
    features["probe_val"] = features["probe_val"][:0]
    labels["probe_val"] = labels["probe_val"][:0]
    with pytest.raises(ValueError, match="probe_val"):
        fit_linear_probe(features, labels, 4, ProbeConfig(epochs=2), seed=0)


@pytest.fixture(scope="module")
def tiny_encoders(tiny_dataset):
    config = config_from_dict(tiny_config_dict())
    return config, build_encoders(config.encoder, tiny_dataset.scenario.num_channels,
                                  tiny_dataset.video.shape[2:], config.seed)


@pytest.mark.parametrize("level", ["window", "sequence"])
def test_train_linear_probe_keeps_encoders_frozen(tiny_dataset, tiny_encoders, level):
    config, encoders = tiny_encoders
    before = encoders.sensor_spatial.params.fingerprint() + encoders.sensor_temporal.params.fingerprint()
    result = train_linear_probe(tiny_dataset, encoders.sensor_spatial, encoders.sensor_temporal,
                                config.probe, config.seed, level=level)
    assert encoders.sensor_spatial.params.fingerprint() + encoders.sensor_temporal.params.fingerprint() == before

    assert result.level == level
    assert 0.0 <= result.weighted_f1 <= 1.0
    assert len(result.confusion) == tiny_dataset.num_classes
    assert [sum(row) for row in result.confusion] == result.support
    payload = result.to_dict()
    assert {"level", "weighted_f1", "mAP", "per_class", "confusion_matrix", "warnings"} <= set(payload)


def test_train_linear_probe_is_deterministic(tiny_dataset, tiny_encoders):
    config, encoders = tiny_encoders
    runs = [train_linear_probe(tiny_dataset, encoders.sensor_spatial, encoders.sensor_temporal,
                               config.probe, config.seed).to_dict() for _ in range(2)]
    assert runs[0] == runs[1]


# export

def test_embedding_table_layout(tiny_dataset, tiny_encoders):
    config, encoders = tiny_encoders
    table = embedding_table(tiny_dataset, encoders, split="probe_test")
    d = config.encoder.embed_dim
    assert len(table) == 2 * tiny_dataset.indices("probe_test").size
    assert table.shape[1] == 2 * d + 4
    assert list(table.columns[:2]) == ["window_index", "modality"]
    assert list(table.columns[-2:]) == ["source_id", "action_id"]
    assert set(table["modality"]) == {"video", "sensor"}


def test_export_is_reproducible(tmp_path, tiny_dataset, tiny_encoders):
    _, encoders = tiny_encoders
    first = export_embeddings(tiny_dataset, encoders, tmp_path / "a.csv", split="probe_val")
    second = export_embeddings(tiny_dataset, encoders, tmp_path / "b.csv", split="probe_val")
    assert first.read_bytes() == second.read_bytes()
    assert len(pd.read_csv(first)) == 2 * tiny_dataset.indices("probe_val").size
