"""
Stage 2: Spatially-Conditioned Temporal Alignment
Adaptive negative weights from frozen spatial and momentum temporal
similarities, a weighted bidirectional InfoNCE over joint [spatial | temporal]
representations, and the training loop for the temporal encoders.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import RunConfig, Stage2Config
from .encoders import (
    SensorSpatialEncoder, VideoSpatialEncoder, SensorTemporalEncoder, VideoTemporalEncoder,
    build_encoders, encode_batched,
)
from .errors import DivergenceError
from .nnprims.optim import OptimizerState, adamw_update, ema_update
from .nnprims.similarity import cosine_similarity_matrix, percentile
from .rng import substream
from .synthdata import Dataset, IDLE

logger = logging.getLogger(__name__)

SIMILARITY_SLACK = 1e-6

# Ground-truth negative categories (instrumentation only)
EXCLUDED, EASY, HARD, FALSE = -1, 0, 1, 2
CATEGORY_NAMES = {EASY: "easy", HARD: "hard", FALSE: "false"}
QUANTILE_GRID = np.arange(0, 101)


@dataclass
class SimilarityBundle:
    s_v_spatial: np.ndarray
    s_s_spatial: np.ndarray
    s_v_temporal: np.ndarray
    s_s_temporal: np.ndarray
    s_spatial: np.ndarray
    s_temporal: np.ndarray


def spatial_similarity(v_spatial: np.ndarray, s_spatial: np.ndarray) -> np.ndarray:
    """max(ReLU(cos_video), ReLU(cos_sensor)) over all pairs; values in [0, 1]."""
    return _spatial_from_cosines(cosine_similarity_matrix(v_spatial, v_spatial),
                                 cosine_similarity_matrix(s_spatial, s_spatial))


def _spatial_from_cosines(cos_video: np.ndarray, cos_sensor: np.ndarray) -> np.ndarray:
    combined = np.maximum(np.maximum(cos_video, 0.0), np.maximum(cos_sensor, 0.0))
    return np.minimum(combined, 1.0)


def spatial_weight(s_spatial: np.ndarray, lambda_hard: float) -> np.ndarray:
    """1 + (lambda_hard - 1) * s_spatial."""
    if lambda_hard <= 1:
        raise ValueError(f"lambda_hard must be > 1, got {lambda_hard}")
    return 1.0 + (lambda_hard - 1.0) * s_spatial


def temporal_similarity(v_temporal: np.ndarray, s_temporal: np.ndarray) -> np.ndarray:
    """Average of video and sensor temporal cosine similarities."""
    return _temporal_from_cosines(cosine_similarity_matrix(v_temporal, v_temporal),
                                  cosine_similarity_matrix(s_temporal, s_temporal))


def _temporal_from_cosines(cos_video: np.ndarray, cos_sensor: np.ndarray) -> np.ndarray:
    return np.clip((cos_video + cos_sensor) / 2.0, -1.0, 1.0)


def temporal_weight(s_spatial: np.ndarray, s_temporal: np.ndarray) -> np.ndarray:
    """1 - s_spatial * ReLU(s_temporal); values in [0, 1]."""
    return 1.0 - s_spatial * np.maximum(s_temporal, 0.0)


def combined_weights(w_spatial: np.ndarray, w_temporal: np.ndarray) -> np.ndarray:
    if w_spatial.shape != w_temporal.shape:
        raise ValueError(f"Weight shapes differ: {w_spatial.shape} vs {w_temporal.shape}")
    weights = w_spatial * w_temporal
    np.fill_diagonal(weights, 0.0)
    return weights


def similarity_bundle(v_spatial, s_spatial, v_temporal, s_temporal) -> SimilarityBundle:
    s_v_spatial = cosine_similarity_matrix(v_spatial, v_spatial)
    s_s_spatial = cosine_similarity_matrix(s_spatial, s_spatial)
    s_v_temporal = cosine_similarity_matrix(v_temporal, v_temporal)
    s_s_temporal = cosine_similarity_matrix(s_temporal, s_temporal)
    return SimilarityBundle(
        s_v_spatial=s_v_spatial, s_s_spatial=s_s_spatial,
        s_v_temporal=s_v_temporal, s_s_temporal=s_s_temporal,
        s_spatial=_spatial_from_cosines(s_v_spatial, s_s_spatial),
        s_temporal=_temporal_from_cosines(s_v_temporal, s_s_temporal),
    )


def weight_matrix(bundle: SimilarityBundle, lambda_hard: float, mode: str = "full") -> np.ndarray:
    """Adaptive negative weights for the configured weighting mode.

    ``no_spatial`` drops the hard-negative boost, ``no_temporal`` drops the
    false-negative suppression and ``uniform`` gives plain InfoNCE weights.
    """
    n = bundle.s_spatial.shape[0]
    ones = np.ones((n, n))
    if mode == "uniform":
        return combined_weights(ones, ones)
    w_spatial = ones if mode == "no_spatial" else spatial_weight(bundle.s_spatial, lambda_hard)
    w_temporal = ones if mode == "no_temporal" else temporal_weight(bundle.s_spatial, bundle.s_temporal)
    if mode not in ("full", "no_spatial", "no_temporal"):
        raise ValueError(f"Unknown weight mode '{mode}'")
    return combined_weights(w_spatial, w_temporal)


def check_weights(weights: np.ndarray, lambda_hard: float):
    assert np.all(np.diag(weights) == 0.0), "weight matrix diagonal must be zero"
    assert np.all(weights >= 0.0), "negative adaptive weight"
    assert np.all(weights <= lambda_hard + 1e-9), "adaptive weight above lambda_hard"


def _directional_loss(logits: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean over rows of -log[e^{s_ii} / (e^{s_ii} + sum_{j!=i} W_ij e^{s_ij})] and its logit gradient."""
    n = logits.shape[0]
    effective = weights.copy()
    np.fill_diagonal(effective, 1.0)
    support = effective > 0
    row_max = np.max(np.where(support, logits, -np.inf), axis=1, keepdims=True)
    scaled = np.where(support, effective * np.exp(np.where(support, logits - row_max, 0.0)), 0.0)
    denominator = scaled.sum(axis=1, keepdims=True)
    log_denominator = row_max[:, 0] + np.log(denominator[:, 0])
    diagonal = np.diag(logits)
    loss = float(np.mean(log_denominator - diagonal))

    d_logits = scaled / denominator
    d_logits[np.arange(n), np.arange(n)] -= 1.0
    return loss, d_logits / n


def weighted_infonce_with_grad(z_video: np.ndarray, z_sensor: np.ndarray, weights: np.ndarray,
                               tau: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Bidirectional weighted InfoNCE; weights are treated as constants.

    Returns:
        Tuple of (loss, d_z_video, d_z_sensor)
    """
    if z_video.shape != z_sensor.shape:
        raise ValueError(f"Joint representations differ in shape: {z_video.shape} vs {z_sensor.shape}")
    n = z_video.shape[0]
    if weights.shape != (n, n):
        raise ValueError(f"Weight matrix must be ({n}, {n}), got {weights.shape}")
    zv = z_video.astype(np.float64)
    zs = z_sensor.astype(np.float64)
    logits = zv @ zs.T / tau
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("Nonfinite contrastive logits")

    loss_v2s, d_v2s = _directional_loss(logits, weights)
    loss_s2v, d_s2v = _directional_loss(logits.T, weights.T)
    d_logits = 0.5 * (d_v2s + d_s2v.T)
    return 0.5 * (loss_v2s + loss_s2v), d_logits @ zs / tau, d_logits.T @ zv / tau


def weighted_infonce(z_video: np.ndarray, z_sensor: np.ndarray, weights: np.ndarray, tau: float) -> float:
    return weighted_infonce_with_grad(z_video, z_sensor, weights, tau)[0]


def negative_categories(source_ids: np.ndarray, action_ids: np.ndarray) -> np.ndarray:
    """Pairwise easy / hard / false codes; diagonal and idle pairs are EXCLUDED."""
    source_ids = np.asarray(source_ids)
    action_ids = np.asarray(action_ids)
    same_source = source_ids[:, None] == source_ids[None, :]
    same_action = action_ids[:, None] == action_ids[None, :]
    categories = np.where(same_source, np.where(same_action, FALSE, HARD), EASY)
    idle = source_ids == IDLE
    categories[idle, :] = EXCLUDED
    categories[:, idle] = EXCLUDED
    np.fill_diagonal(categories, EXCLUDED)
    return categories


def collect_category_weights(weights: np.ndarray, categories: np.ndarray) -> Dict[str, np.ndarray]:
    return {name: weights[categories == code] for code, name in CATEGORY_NAMES.items()}


def summarize_category_weights(samples: Dict[str, List[np.ndarray]]) -> Dict[str, float]:
    row = {}
    for name in CATEGORY_NAMES.values():
        values = np.concatenate(samples[name]) if samples[name] else np.zeros(0)
        row[f"mean_W_{name}"] = float(values.mean()) if values.size else float("nan")
        row[f"median_W_{name}"] = float(np.median(values)) if values.size else float("nan")
        row[f"count_{name}"] = int(values.size)
    row["hard_minus_false"] = row["mean_W_hard"] - row["mean_W_false"]
    return row


def quantile_rows(epoch: int, samples: Dict[str, List[np.ndarray]]) -> List[Dict[str, float]]:
    rows = []
    for name in CATEGORY_NAMES.values():
        values = np.concatenate(samples[name]) if samples[name] else np.zeros(0)
        if values.size == 0:
            continue
        row = {"epoch": epoch, "category": name, "count": int(values.size)}
        row.update({f"q{q}": float(v) for q, v in zip(QUANTILE_GRID, percentile(values, QUANTILE_GRID))})
        rows.append(row)
    return rows


def contrastive_batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    """Consecutive batches of ``order``; a trailing single window joins the batch before it."""
    batches = [order[start:start + batch_size] for start in range(0, order.size, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


@dataclass
class Stage2Result:
    sensor_temporal: SensorTemporalEncoder
    video_temporal: VideoTemporalEncoder
    momentum_sensor: SensorTemporalEncoder
    momentum_video: VideoTemporalEncoder
    log: pd.DataFrame
    weights_cdf: pd.DataFrame
    warnings: List[str] = field(default_factory=list)


def run_stage2(dataset: Dataset, sensor_spatial: SensorSpatialEncoder, video_spatial: VideoSpatialEncoder,
               config: RunConfig, seed: Optional[int] = None) -> Stage2Result:
    """Train the temporal encoders against frozen spatial encoders.

    Epoch 0 is a measurement pass with the initial encoders; epochs 1..E train.

    Args:
        dataset: Dataset; only the pretrain split is used
        sensor_spatial: Frozen sensor spatial encoder from stage 1
        video_spatial: Frozen video spatial encoder from stage 1
        config: Run configuration (stage2 and encoder sections)
        seed: Master seed (defaults to ``config.seed``)

    Returns:
        Stage2Result with online and momentum temporal encoders, log and weight quantiles
    """
    seed = config.seed if seed is None else seed
    cfg: Stage2Config = config.stage2
    indices = dataset.indices("pretrain")
    sensor = dataset.sensor[indices]
    video = dataset.video[indices]
    categories_all = negative_categories(dataset.source_ids[indices], dataset.action_ids[indices])
    n = indices.size
    if n < 2:
        raise ValueError("Stage 2 needs at least 2 pretrain windows")

    frozen_before = sensor_spatial.params.fingerprint() + video_spatial.params.fingerprint()
    v_spatial = encode_batched(video_spatial, video)
    s_spatial = encode_batched(sensor_spatial, sensor)

    encoders = build_encoders(config.encoder, dataset.scenario.num_channels, video.shape[2:], seed)
    sensor_temporal = encoders.sensor_temporal
    video_temporal = encoders.video_temporal
    momentum_sensor = sensor_temporal.clone(role="momentum")
    momentum_video = video_temporal.clone(role="momentum")

    sensor_opt = OptimizerState.for_params(sensor_temporal.params, cfg.learning_rate, cfg.weight_decay)
    video_opt = OptimizerState.for_params(video_temporal.params, cfg.learning_rate, cfg.weight_decay)
    batch_rng = substream(seed, "batching", "stage2")

    rows, cdf_rows = [], []
    for epoch in range(cfg.epochs + 1):
        training = epoch > 0
        samples: Dict[str, List[np.ndarray]] = {name: [] for name in CATEGORY_NAMES.values()}
        loss_sum, count = 0.0, 0

        for batch in contrastive_batches(batch_rng.permutation(n), cfg.batch_size):
            loss, weights = _stage2_step(
                batch, sensor, video, v_spatial, s_spatial, sensor_temporal, video_temporal,
                momentum_sensor, momentum_video, cfg, sensor_opt if training else None,
                video_opt if training else None)
            if not np.isfinite(loss):
                raise DivergenceError(f"Nonfinite stage2 loss at epoch {epoch}: {loss}")
            loss_sum += loss * batch.size
            count += batch.size
            for name, values in collect_category_weights(weights, categories_all[np.ix_(batch, batch)]).items():
                samples[name].append(values)

        row = {"epoch": epoch, "loss": loss_sum / max(count, 1)}
        row.update(summarize_category_weights(samples))
        rows.append(row)
        cdf_rows.extend(quantile_rows(epoch, samples))
        logger.info(f"stage2 epoch {epoch} loss={row['loss']:.4f} W_easy={row['mean_W_easy']:.3f} "
                    f"W_hard={row['mean_W_hard']:.3f} W_false={row['mean_W_false']:.3f}")

    if sensor_spatial.params.fingerprint() + video_spatial.params.fingerprint() != frozen_before:
        raise RuntimeError("Spatial encoder parameters changed during stage 2")

    return Stage2Result(sensor_temporal=sensor_temporal, video_temporal=video_temporal,
                        momentum_sensor=momentum_sensor, momentum_video=momentum_video,
                        log=pd.DataFrame(rows), weights_cdf=pd.DataFrame(cdf_rows))


def _stage2_step(batch, sensor, video, v_spatial, s_spatial, sensor_temporal, video_temporal,
                 momentum_sensor, momentum_video, cfg: Stage2Config,
                 sensor_opt: Optional[OptimizerState], video_opt: Optional[OptimizerState]):
    """One batch: weights from momentum similarities, loss, and (when optimizers are given) an update."""
    d = v_spatial.shape[1]
    v_temporal, v_cache = video_temporal.forward(video[batch])
    s_temporal, s_cache = sensor_temporal.forward(sensor[batch])
    if cfg.use_momentum:
        v_reference = momentum_video(video[batch])
        s_reference = momentum_sensor(sensor[batch])
    else:
        v_reference, s_reference = v_temporal, s_temporal

    bundle = similarity_bundle(v_spatial[batch], s_spatial[batch], v_reference, s_reference)
    weights = weight_matrix(bundle, cfg.lambda_hard, cfg.weight_mode)
    check_weights(weights, cfg.lambda_hard)

    z_video = np.concatenate([v_spatial[batch], v_temporal], axis=1)
    z_sensor = np.concatenate([s_spatial[batch], s_temporal], axis=1)
    loss, d_video, d_sensor = weighted_infonce_with_grad(z_video, z_sensor, weights, cfg.tau_contrast)

    if sensor_opt is not None and np.isfinite(loss):
        video_temporal.params.zero_grad()
        sensor_temporal.params.zero_grad()
        video_temporal.backward(d_video[:, d:].astype(video_temporal.dtype), v_cache)
        sensor_temporal.backward(d_sensor[:, d:].astype(sensor_temporal.dtype), s_cache)
        adamw_update(video_temporal.params, None, video_opt)
        adamw_update(sensor_temporal.params, None, sensor_opt)
        ema_update(momentum_video.params, video_temporal.params, cfg.momentum)
        ema_update(momentum_sensor.params, sensor_temporal.params, cfg.momentum)
    return loss, weights


def stage2_loss_and_grads(sensor_windows: np.ndarray, clips: np.ndarray, v_spatial: np.ndarray,
                          s_spatial: np.ndarray, sensor_temporal: SensorTemporalEncoder,
                          video_temporal: VideoTemporalEncoder, momentum_sensor: SensorTemporalEncoder,
                          momentum_video: VideoTemporalEncoder, cfg: Stage2Config) -> float:
    """Full stage-2 loss on one batch with gradients left in the online encoders' buffers."""
    batch = np.arange(sensor_windows.shape[0])
    d = v_spatial.shape[1]
    video_temporal.params.zero_grad()
    sensor_temporal.params.zero_grad()
    v_temporal, v_cache = video_temporal.forward(clips)
    s_temporal, s_cache = sensor_temporal.forward(sensor_windows)
    if cfg.use_momentum:
        v_reference, s_reference = momentum_video(clips), momentum_sensor(sensor_windows)
    else:
        v_reference, s_reference = v_temporal, s_temporal
    bundle = similarity_bundle(v_spatial[batch], s_spatial[batch], v_reference, s_reference)
    weights = weight_matrix(bundle, cfg.lambda_hard, cfg.weight_mode)
    z_video = np.concatenate([v_spatial, v_temporal], axis=1)
    z_sensor = np.concatenate([s_spatial, s_temporal], axis=1)
    loss, d_video, d_sensor = weighted_infonce_with_grad(z_video, z_sensor, weights, cfg.tau_contrast)
    video_temporal.backward(d_video[:, d:], v_cache)
    sensor_temporal.backward(d_sensor[:, d:], s_cache)
    return loss


# Post-hoc weight analysis

@dataclass
class WeightAnalysis:
    summary: Dict[str, float]
    classwise: pd.DataFrame
    top_classes: List[int]
    bottom_classes: List[int]
    phase_space: Optional[pd.DataFrame] = None


def analyze_weights(dataset: Dataset, sensor_spatial: SensorSpatialEncoder, video_spatial: VideoSpatialEncoder,
                    momentum_sensor: SensorTemporalEncoder, momentum_video: VideoTemporalEncoder,
                    cfg: Stage2Config, split: str = "pretrain", query: Optional[int] = None,
                    top_k: int = 3) -> WeightAnalysis:
    """Weights over every pair of a split, by negative category and by anchor action class.

    Args:
        query: Optional window index; its row of the pairwise matrices is returned as a phase-space table
    """
    indices = dataset.indices(split)
    sensor = dataset.sensor[indices]
    video = dataset.video[indices]
    sources = dataset.source_ids[indices]
    actions = dataset.action_ids[indices]
    classes = dataset.class_labels[indices]

    bundle = similarity_bundle(encode_batched(video_spatial, video), encode_batched(sensor_spatial, sensor),
                               encode_batched(momentum_video, video), encode_batched(momentum_sensor, sensor))
    weights = weight_matrix(bundle, cfg.lambda_hard, cfg.weight_mode)
    categories = negative_categories(sources, actions)
    summary = summarize_category_weights({k: [v] for k, v in collect_category_weights(weights, categories).items()})

    class_rows = []
    for label in np.unique(classes[sources != IDLE]):
        anchors = classes == label
        hard = weights[anchors][categories[anchors] == HARD]
        false = weights[anchors][categories[anchors] == FALSE]
        class_rows.append({
            "class_label": int(label),
            "source_id": int(sources[anchors][0]),
            "action_id": int(actions[anchors][0]),
            "mean_W_hard": float(hard.mean()) if hard.size else float("nan"),
            "mean_W_false": float(false.mean()) if false.size else float("nan"),
        })
    classwise = pd.DataFrame(class_rows, columns=["class_label", "source_id", "action_id",
                                                  "mean_W_hard", "mean_W_false"])
    classwise["separation"] = classwise["mean_W_hard"] - classwise["mean_W_false"]
    ranked = classwise.dropna(subset=["separation"]).sort_values(["separation", "class_label"],
                                                                 ascending=[False, True])
    top = ranked["class_label"].head(top_k).astype(int).tolist()
    bottom = ranked["class_label"].tail(top_k).astype(int).tolist()[::-1]

    phase_space = None
    if query is not None:
        positions = np.nonzero(dataset.labels["window_index"].to_numpy()[indices] == query)[0]
        if positions.size == 0:
            raise KeyError(f"Window {query} is not in split '{split}'")
        q = int(positions[0])
        others = np.arange(indices.size) != q
        category_names = np.array(["excluded", "easy", "hard", "false"])
        phase_space = pd.DataFrame({
            "window_index": dataset.labels["window_index"].to_numpy()[indices][others],
            "s_spatial": bundle.s_spatial[q, others],
            "s_temporal": bundle.s_temporal[q, others],
            "weight": weights[q, others],
            "category": category_names[categories[q, others] + 1],
        })

    return WeightAnalysis(summary=summary, classwise=classwise, top_classes=top, bottom_classes=bottom,
                          phase_space=phase_space)
