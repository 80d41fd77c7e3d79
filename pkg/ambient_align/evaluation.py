"""
Downstream Evaluation
Linear probe on frozen sensor joint representations, weighted F1, mAP,
sequence-level temporal pooling and embedding export.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax
from sklearn.metrics import confusion_matrix, f1_score, precision_recall_fscore_support

from .config import ProbeConfig
from .encoders import EncoderSet, SensorSpatialEncoder, SensorTemporalEncoder, encode_batched
from .nnprims.layers import linear, linear_backward
from .nnprims.optim import OptimizerState, adamw_update
from .nnprims.params import ParamSet, init_uniform
from .rng import substream
from .synthdata import Dataset, split_dataset

logger = logging.getLogger(__name__)

PROBE_SPLITS = ("probe_train", "probe_val", "probe_test")


# Metrics

def weighted_f1(predictions, labels) -> float:
    """Support-weighted mean of per-class F1 (0 where P + R = 0)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("weighted_f1 needs at least one sample")
    if predictions.shape != labels.shape:
        raise ValueError(f"Predictions {predictions.shape} and labels {labels.shape} differ in shape")
    return float(f1_score(labels, predictions, average="weighted", zero_division=0))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mean precision at each positive's rank; descending score, ties by index."""
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = positives[order]
    precision_at_rank = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision_at_rank[hits].mean())


def mean_average_precision(scores: np.ndarray, labels) -> float:
    """Unweighted mean of per-class AP over classes with at least one positive.

    Args:
        scores: (N, L) class scores
        labels: (N,) integer class labels in [0, L)
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"Scores must be (N, L) with N = {labels.shape[0]}, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("Scores must be finite")
    per_class = [average_precision(scores[:, c], labels == c)
                 for c in range(scores.shape[1]) if np.any(labels == c)]
    if not per_class:
        raise ValueError("No class has a positive sample; mAP is undefined")
    return float(np.mean(per_class))


def temporal_pool_sequence(embeddings: np.ndarray) -> np.ndarray:
    """Mean of one sequence's window embeddings."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError(f"Expected a non-empty (W, D) window stack, got shape {embeddings.shape}")
    return embeddings.mean(axis=0)


# Probe

@dataclass
class ProbeResult:
    classes: List[int]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    weighted_f1: float
    mean_ap: float
    confusion: List[List[int]]
    level: str = "window"
    best_epoch: int = 0
    val_weighted_f1: float = 0.0
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "level": self.level,
            "weighted_f1": self.weighted_f1,
            "mAP": self.mean_ap,
            "best_epoch": self.best_epoch,
            "val_weighted_f1": self.val_weighted_f1,
            "per_class": [
                {"class_label": c, "precision": p, "recall": r, "f1": f, "support": s}
                for c, p, r, f, s in zip(self.classes, self.precision, self.recall, self.f1, self.support)
            ],
            "confusion_matrix": self.confusion,
            "warnings": self.warnings,
        }


def score_predictions(predictions: np.ndarray, labels: np.ndarray, scores: np.ndarray,
                      num_classes: int) -> ProbeResult:
    classes = list(range(num_classes))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, predictions, labels=classes, zero_division=0)
    try:
        mean_ap = mean_average_precision(scores, labels)
    except ValueError:
        mean_ap = float("nan")
    return ProbeResult(
        classes=classes,
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1=[float(v) for v in f1],
        support=[int(v) for v in support],
        weighted_f1=weighted_f1(predictions, labels),
        mean_ap=mean_ap,
        confusion=confusion_matrix(labels, predictions, labels=classes).astype(int).tolist(),
    )


def sensor_joint_features(sensor_windows: np.ndarray, sensor_spatial: SensorSpatialEncoder,
                          sensor_temporal: SensorTemporalEncoder) -> np.ndarray:
    """[spatial | temporal] sensor representation per window, in float64."""
    return np.concatenate([encode_batched(sensor_spatial, sensor_windows),
                           encode_batched(sensor_temporal, sensor_windows)], axis=1).astype(np.float64)


def _standardizer(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def build_probe_head(feature_dim: int, num_classes: int, seed: int) -> ParamSet:
    rng = substream(seed, "probe", "init")
    head = ParamSet()
    head.add("probe.weight", init_uniform(rng, (num_classes, feature_dim), feature_dim, np.float64))
    head.add("probe.bias", np.zeros(num_classes))
    return head


def _head_logits(head: ParamSet, features: np.ndarray) -> np.ndarray:
    return linear(features, head["probe.weight"], head["probe.bias"])[0]


def fit_linear_probe(features: Dict[str, np.ndarray], labels: Dict[str, np.ndarray], num_classes: int,
                     config: ProbeConfig, seed: int) -> ProbeResult:
    """Train a linear head on fixed features; evaluate the best-validation epoch on test.

    Args:
        features: Per probe split, an (N, D) feature matrix
        labels: Per probe split, (N,) class labels
        num_classes: Number of output classes
        config: Probe hyperparameters
        seed: Master seed

    Returns:
        ProbeResult on the test split
    """
    for split in PROBE_SPLITS:
        if features[split].shape[0] == 0:
            raise ValueError(f"Probe split '{split}' is empty")
    warnings: List[str] = []
    train_labels = labels["probe_train"]

    if np.unique(train_labels).size == 1:
        constant = int(train_labels[0])
        message = f"Probe training split has a single class ({constant}); predicting it everywhere"
        logger.warning(message)
        test_labels = labels["probe_test"]
        scores = np.zeros((test_labels.size, num_classes))
        scores[:, constant] = 1.0
        result = score_predictions(np.full(test_labels.size, constant), test_labels, scores, num_classes)
        result.warnings = [message]
        return result

    mean, std = _standardizer(features["probe_train"])
    standardized = {split: (features[split] - mean) / std for split in PROBE_SPLITS}
    if np.all(features["probe_train"].std(axis=0) == 0):
        message = "Probe features are constant across the training split"
        logger.warning(message)
        warnings.append(message)

    head = build_probe_head(standardized["probe_train"].shape[1], num_classes, seed)
    state = OptimizerState.for_params(head, config.learning_rate, config.weight_decay)
    batch_rng = substream(seed, "batching", "probe")
    x_train = standardized["probe_train"]
    n = x_train.shape[0]

    best_f1, best_epoch, best_head = -1.0, 0, head.copy()
    for epoch in range(1, config.epochs + 1):
        order = batch_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            head.zero_grad()
            logits, cache = linear(x_train[batch], head["probe.weight"], head["probe.bias"])
            log_probs = log_softmax(logits, axis=1)
            d_logits = np.exp(log_probs)
            d_logits[np.arange(batch.size), train_labels[batch]] -= 1.0
            _, d_weight, d_bias = linear_backward(d_logits / batch.size, cache)
            head.accumulate("probe.weight", d_weight)
            head.accumulate("probe.bias", d_bias)
            adamw_update(head, None, state)

        val_predictions = np.argmax(_head_logits(head, standardized["probe_val"]), axis=1)
        val_f1 = weighted_f1(val_predictions, labels["probe_val"])
        if val_f1 > best_f1:
            best_f1, best_epoch, best_head = val_f1, epoch, head.copy()
        logger.debug(f"probe epoch {epoch} val_weighted_f1={val_f1:.4f}")

    test_logits = _head_logits(best_head, standardized["probe_test"])
    result = score_predictions(np.argmax(test_logits, axis=1), labels["probe_test"],
                               softmax(test_logits, axis=1), num_classes)
    result.best_epoch = best_epoch
    result.val_weighted_f1 = float(best_f1)
    result.warnings = warnings
    logger.info(f"probe best epoch {best_epoch}: val F1={best_f1:.4f} test F1={result.weighted_f1:.4f} "
                f"mAP={result.mean_ap:.4f}")
    return result


def sequence_splits(dataset: Dataset, seed: int) -> Dict[str, np.ndarray]:
    """Assign every generating sequence with probe windows to exactly one probe split.

    Sequences are shuffled on their own substream and dealt out in proportion to
    the probe splits' window counts, so no sequence contributes to two splits.
    """
    probe_windows = np.concatenate([dataset.indices(split) for split in PROBE_SPLITS])
    if probe_windows.size == 0:
        raise ValueError("Probe splits are empty")
    sequences = np.unique(dataset.sequence_ids[probe_windows])
    counts = np.array([dataset.indices(split).size for split in PROBE_SPLITS], dtype=np.float64)
    split = split_dataset(np.zeros(sequences.size, dtype=np.int64), counts / counts.sum(), seed,
                          names=PROBE_SPLITS, stream="probe_sequences")
    return {name: sequences[idx] for name, idx in split.indices.items()}


def _sequence_groups(dataset: Dataset, windows: np.ndarray, sequences: np.ndarray) -> List[np.ndarray]:
    owners = dataset.sequence_ids[windows]
    return [windows[owners == s] for s in sequences]


def sequence_label(class_labels: np.ndarray, idle_label: int) -> int:
    """Majority non-idle window class (lowest label on ties); idle if every window is idle."""
    active = class_labels[class_labels != idle_label]
    if active.size == 0:
        return int(idle_label)
    values, counts = np.unique(active, return_counts=True)
    return int(values[np.argmax(counts)])


def train_linear_probe(dataset: Dataset, sensor_spatial: SensorSpatialEncoder,
                       sensor_temporal: SensorTemporalEncoder, config: ProbeConfig, seed: int,
                       level: Optional[str] = None) -> ProbeResult:
    """Linear probe on the frozen sensor joint representation.

    At ``level="sequence"`` each generating sequence goes to one probe split
    (see ``sequence_splits``); its probe windows are mean-pooled and labelled
    by their majority non-idle class.
    """
    level = level or config.level
    if level not in ("window", "sequence"):
        raise ValueError(f"Unknown probe level '{level}'")
    fingerprint = sensor_spatial.params.fingerprint() + sensor_temporal.params.fingerprint()
    idle_label = dataset.num_classes - 1

    features, labels = {}, {}
    if level == "window":
        for split in PROBE_SPLITS:
            indices = dataset.indices(split)
            features[split] = sensor_joint_features(dataset.sensor[indices], sensor_spatial, sensor_temporal)
            labels[split] = dataset.class_labels[indices]
    else:
        windows = np.sort(np.concatenate([dataset.indices(split) for split in PROBE_SPLITS]))
        window_features = sensor_joint_features(dataset.sensor[windows], sensor_spatial, sensor_temporal)
        for split, sequences in sequence_splits(dataset, seed).items():
            groups = _sequence_groups(dataset, windows, sequences)
            features[split] = np.stack([temporal_pool_sequence(window_features[np.searchsorted(windows, g)])
                                        for g in groups]) if groups else np.zeros((0, window_features.shape[1]))
            labels[split] = np.array([sequence_label(dataset.class_labels[g], idle_label) for g in groups],
                                     dtype=np.int64)

    result = fit_linear_probe(features, labels, dataset.num_classes, config, seed)
    result.level = level

    if sensor_spatial.params.fingerprint() + sensor_temporal.params.fingerprint() != fingerprint:
        raise RuntimeError("Sensor encoder parameters changed during probe training")
    return result


# Export

def embedding_table(dataset: Dataset, encoders: EncoderSet, split: str = "all") -> pd.DataFrame:
    """One row per (window, modality) with spatial and temporal embedding columns."""
    indices = dataset.indices(split)
    labels = dataset.labels.iloc[indices]
    d = encoders.sensor_spatial.config.embed_dim

    frames = []
    for modality, data in (("video", dataset.video[indices]), ("sensor", dataset.sensor[indices])):
        spatial = encode_batched(getattr(encoders, f"{modality}_spatial"), data)
        temporal = encode_batched(getattr(encoders, f"{modality}_temporal"), data)
        frame = pd.DataFrame(np.concatenate([spatial, temporal], axis=1),
                             columns=[f"s{i}" for i in range(d)] + [f"t{i}" for i in range(d)])
        frame.insert(0, "modality", modality)
        frame.insert(0, "window_index", labels["window_index"].to_numpy())
        frame["source_id"] = labels["source_id"].to_numpy()
        frame["action_id"] = labels["action_id"].to_numpy()
        frames.append(frame)

    table = pd.concat(frames, ignore_index=True)
    return table.sort_values(["window_index", "modality"], kind="stable").reset_index(drop=True)


def export_embeddings(dataset: Dataset, encoders: EncoderSet, path: Union[str, Path],
                      split: str = "all") -> Path:
    """Write the embedding table of one split to CSV."""
    path = Path(path)
    table = embedding_table(dataset, encoders, split)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format="%.9g")
    except OSError as e:
        raise OSError(f"Could not write embeddings to {path}: {e}") from e
    logger.info(f"Exported {len(table)} embedding rows to {path}")
    return path
