"""
Stage 1: Spatial Encoder Training
Online sensor clustering, then joint training of the video spatial encoder on
confident samples, then video-guided refinement of the sensor clustering on
ambiguous samples with the video encoder frozen.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from .clustering import (
    ClusterState, init_cluster_state, cluster_loss_with_grad, cluster_logits, cluster_logits_backward,
    update_memory_and_centroids, handle_empty_clusters, confidence_split, label_change_rate, purity,
)
from .config import RunConfig
from .encoders import SensorSpatialEncoder, VideoSpatialEncoder, build_encoders, encode_batched
from .errors import DivergenceError
from .nnprims.layers import linear, linear_backward, l2_normalize, l2_normalize_backward
from .nnprims.optim import OptimizerState, adamw_update
from .nnprims.params import ParamSet, init_uniform
from .rng import substream
from .synthdata import Dataset, IDLE

logger = logging.getLogger(__name__)

PHASES = ("cluster", "joint", "refine")


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    n = logits.shape[0]
    log_probs = log_softmax(logits.astype(np.float64), axis=1)
    loss = float(-np.mean(log_probs[np.arange(n), labels]))
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def video_spatial_loss_with_grad(video_logits: np.ndarray, pseudo_labels: np.ndarray):
    """Cross-entropy of video logits against cluster pseudo-labels on confident samples.

    Returns:
        Tuple of (loss, d_logits); (0.0, empty) when there are no confident samples
    """
    if video_logits.shape[0] == 0:
        logger.warning("No confident samples for the video spatial loss; skipping update")
        return 0.0, np.zeros_like(video_logits, dtype=np.float64)
    return _cross_entropy(video_logits, np.asarray(pseudo_labels))


def video_spatial_loss(video_logits: np.ndarray, pseudo_labels: np.ndarray) -> float:
    return video_spatial_loss_with_grad(video_logits, pseudo_labels)[0]


def video_hard_labels(video_logits: np.ndarray) -> np.ndarray:
    """argmax of the video prediction; ties go to the lowest cluster index."""
    return np.argmax(video_logits, axis=1)


def refinement_loss(sensor_probs: np.ndarray, video_logits: np.ndarray) -> float:
    """-(1/N_amb) sum_i log p^sensor_{i, argmax video_i}; 0 when there are no ambiguous samples."""
    if sensor_probs.shape[0] == 0:
        return 0.0
    targets = video_hard_labels(video_logits)
    picked = np.asarray(sensor_probs, dtype=np.float64)[np.arange(targets.size), targets]
    return float(-np.mean(np.log(picked)))


def refinement_loss_with_grad(features: np.ndarray, centroids: np.ndarray, tau: float,
                              video_logits: np.ndarray):
    """Refinement loss on sensor cluster probabilities, with gradients for features and centroids."""
    if features.shape[0] == 0:
        return 0.0, np.zeros(features.shape), np.zeros(centroids.shape)
    loss, d_logits = _cross_entropy(cluster_logits(features, centroids, tau), video_hard_labels(video_logits))
    d_features, d_centroids = cluster_logits_backward(d_logits, features, centroids, tau)
    return loss, d_features, d_centroids


def sensor_total_loss(l_cluster: float, l_refine: float, alpha: float, beta: float) -> float:
    return alpha * l_cluster + beta * l_refine


def phase_for_epoch(epoch: int, warmup_epochs: int, joint_epochs: int) -> str:
    if epoch < warmup_epochs:
        return "cluster"
    if epoch < warmup_epochs + joint_epochs:
        return "joint"
    return "refine"


def build_video_head(embed_dim: int, num_clusters: int, seed: int, dtype=np.float32) -> ParamSet:
    rng = substream(seed, "init", "video_head")
    return ParamSet({
        "head.weight": init_uniform(rng, (num_clusters, embed_dim), embed_dim, dtype),
        "head.bias": np.zeros(num_clusters, dtype=dtype),
    })


@dataclass
class Stage1Result:
    sensor_encoder: SensorSpatialEncoder
    video_encoder: VideoSpatialEncoder
    video_head: ParamSet
    state: ClusterState
    log: pd.DataFrame
    stopped_reason: str
    warnings: List[str] = field(default_factory=list)

    @property
    def final_change_rate(self) -> float:
        return float(self.log["change_rate"].iloc[-1]) if len(self.log) else float("nan")

    @property
    def final_purity(self) -> float:
        return float(self.log["purity"].iloc[-1]) if len(self.log) else float("nan")


EpochCallback = Callable[[int, "Stage1Result"], None]


def run_stage1(dataset: Dataset, config: RunConfig, seed: Optional[int] = None,
               on_epoch_end: Optional[EpochCallback] = None) -> Stage1Result:
    """Train the sensor and video spatial encoders and the cluster state.

    Args:
        dataset: Dataset; only the pretrain split is used
        config: Run configuration (stage1 and encoder sections)
        seed: Master seed (defaults to ``config.seed``)
        on_epoch_end: Called after every epoch with a snapshot result, e.g. to checkpoint

    Returns:
        Stage1Result with trained encoders, cluster state and per-epoch log
    """
    seed = config.seed if seed is None else seed
    cfg = config.stage1
    indices = dataset.indices("pretrain")
    if indices.size == 0:
        raise ValueError("Pretraining split is empty")

    sensor = dataset.sensor[indices]
    video = dataset.video[indices]
    sources = dataset.source_ids[indices]
    idle_fraction = float(np.mean(sources == IDLE))
    n = indices.size
    num_clusters = config.num_clusters
    logger.info(f"stage1: {num_clusters} clusters over {n} windows; {idle_fraction:.1%} idle windows excluded from purity")

    encoders = build_encoders(config.encoder, dataset.scenario.num_channels, video.shape[2:], seed)
    sensor_encoder = encoders.sensor_spatial
    video_encoder = encoders.video_spatial
    head = build_video_head(config.encoder.embed_dim, num_clusters, seed)

    initial, _ = l2_normalize(encode_batched(sensor_encoder, sensor))
    state = init_cluster_state(initial, num_clusters, substream(seed, "stage1", "init"))
    centroid_params = ParamSet({"centroids": state.centroids})

    def optimizer(params: ParamSet) -> OptimizerState:
        return OptimizerState.for_params(params, cfg.learning_rate, cfg.weight_decay)

    sensor_opt = optimizer(sensor_encoder.params)
    centroid_opt = optimizer(centroid_params)
    video_opt = optimizer(video_encoder.params)
    head_opt = optimizer(head)

    batch_rng = substream(seed, "batching", "stage1")
    empty_rng = substream(seed, "stage1", "empty_clusters")
    rows = []
    warnings: List[str] = []
    stopped_reason = "max_epochs"
    split = confidence_split(state, cfg.confidence_percentile)
    video_fingerprint = None

    def snapshot() -> Stage1Result:
        return Stage1Result(sensor_encoder=sensor_encoder, video_encoder=video_encoder, video_head=head,
                            state=state, log=pd.DataFrame(rows), stopped_reason=stopped_reason,
                            warnings=list(warnings))

    for epoch in range(cfg.max_epochs):
        phase = phase_for_epoch(epoch, cfg.warmup_epochs, cfg.joint_epochs)
        if phase == "refine" and video_fingerprint is None:
            video_fingerprint = video_encoder.params.fingerprint() + head.fingerprint()
        if phase == "joint" and split.confident.size == 0:
            message = f"Epoch {epoch}: no confident samples, video spatial encoder not updated"
            logger.warning(message)
            warnings.append(message)

        labels_before = state.labels.copy()
        sums = {"L_cluster": 0.0, "L_video_spatial": 0.0, "L_refine": 0.0}
        counts = {"L_cluster": 0, "L_video_spatial": 0, "L_refine": 0}

        order = batch_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            sensor_encoder.params.zero_grad()
            centroid_params.zero_grad()

            embeddings, enc_cache = sensor_encoder.forward(sensor[batch])
            features, norm_cache = l2_normalize(embeddings)
            labels = state.labels[batch]

            l_cluster, _, d_features, d_centroids = cluster_loss_with_grad(
                features, state.centroids, labels, state.cluster_sizes, cfg.tau_cluster)
            d_features = cfg.alpha * d_features
            d_centroids = cfg.alpha * d_centroids
            l_refine = 0.0

            if phase == "refine" and cfg.refine:
                ambiguous = ~state.confident[batch]
                if np.any(ambiguous):
                    video_logits = _video_logits(video_encoder, head, video[batch][ambiguous])
                    l_refine, d_amb, d_cent_amb = refinement_loss_with_grad(
                        features[ambiguous], state.centroids, cfg.tau_cluster, video_logits)
                    d_features[ambiguous] += cfg.beta * d_amb
                    d_centroids += cfg.beta * d_cent_amb
                    sums["L_refine"] += l_refine * ambiguous.sum()
                    counts["L_refine"] += int(ambiguous.sum())

            total = sensor_total_loss(l_cluster, l_refine, cfg.alpha, cfg.beta)
            if not np.isfinite(total):
                raise DivergenceError(f"Nonfinite stage1 loss at epoch {epoch} ({phase}): {total}")

            d_embeddings = l2_normalize_backward(d_features, norm_cache).astype(sensor_encoder.dtype)
            sensor_encoder.backward(d_embeddings, enc_cache)
            centroid_params.accumulate("centroids", d_centroids)
            adamw_update(sensor_encoder.params, None, sensor_opt)
            adamw_update(centroid_params, None, centroid_opt)
            sums["L_cluster"] += l_cluster * batch.size
            counts["L_cluster"] += batch.size

            if phase == "joint":
                confident = state.confident[batch]
                if np.any(confident):
                    l_video = _train_video_step(video_encoder, head, video[batch][confident], labels[confident],
                                                video_opt, head_opt)
                    if not np.isfinite(l_video):
                        raise DivergenceError(f"Nonfinite video spatial loss at epoch {epoch}: {l_video}")
                    sums["L_video_spatial"] += l_video * confident.sum()
                    counts["L_video_spatial"] += int(confident.sum())

            update_memory_and_centroids(state, batch, features, cfg.memory_momentum)

        reseeded = handle_empty_clusters(state, empty_rng)
        change_rate = label_change_rate(labels_before, state.labels)
        split = confidence_split(state, cfg.confidence_percentile)
        state.check()

        row = {"epoch": epoch, "phase": phase}
        for key in sums:
            row[key] = sums[key] / counts[key] if counts[key] else 0.0
        row["L_total"] = sensor_total_loss(row["L_cluster"], row["L_refine"], cfg.alpha, cfg.beta)
        row.update({
            "change_rate": change_rate,
            "confident_fraction": split.confident_fraction,
            "purity": purity(state.labels, sources, idle_label=IDLE),
            "idle_fraction": idle_fraction,
            "reseeded": reseeded,
            "sizes": ";".join(str(int(s)) for s in state.cluster_sizes),
        })
        rows.append(row)
        logger.info(f"stage1 epoch {epoch} phase={phase} L_cluster={row['L_cluster']:.4f} "
                    f"L_video={row['L_video_spatial']:.4f} L_refine={row['L_refine']:.4f} "
                    f"change_rate={change_rate:.4f} confident={split.confident_fraction:.3f} "
                    f"purity={row['purity']:.4f}")

        if phase == "refine" and change_rate < cfg.change_rate_stop:
            stopped_reason = "converged"
        if on_epoch_end is not None:
            on_epoch_end(epoch, snapshot())
        if stopped_reason == "converged":
            break

    if video_fingerprint is not None:
        if video_encoder.params.fingerprint() + head.fingerprint() != video_fingerprint:
            raise RuntimeError("Video spatial encoder changed during the refinement phase")
    if stopped_reason != "converged":
        message = (f"Stage 1 hit max_epochs={cfg.max_epochs} with change rate "
                   f"{rows[-1]['change_rate']:.4f} >= {cfg.change_rate_stop}")
        logger.warning(message)
        warnings.append(message)

    return snapshot()


def _video_logits(encoder: VideoSpatialEncoder, head: ParamSet, clips: np.ndarray) -> np.ndarray:
    embeddings = encoder(clips)
    logits, _ = linear(embeddings, head["head.weight"], head["head.bias"])
    return logits


def _train_video_step(encoder: VideoSpatialEncoder, head: ParamSet, clips: np.ndarray,
                      targets: np.ndarray, encoder_opt: OptimizerState, head_opt: OptimizerState) -> float:
    encoder.params.zero_grad()
    head.zero_grad()
    embeddings, enc_cache = encoder.forward(clips)
    logits, head_cache = linear(embeddings, head["head.weight"], head["head.bias"])
    loss, d_logits = video_spatial_loss_with_grad(logits, targets)
    d_embeddings, d_weight, d_bias = linear_backward(d_logits.astype(encoder.dtype), head_cache)
    head.accumulate("head.weight", d_weight)
    head.accumulate("head.bias", d_bias)
    encoder.backward(d_embeddings, enc_cache)
    adamw_update(encoder.params, None, encoder_opt)
    adamw_update(head, None, head_opt)
    return loss

