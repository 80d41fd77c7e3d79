"""
Modality Encoders
Spatial and temporal encoders for the sensor and video streams, and the joint
[spatial | temporal] representation each modality is aligned with.

Every encoder owns a ParamSet. ``forward`` returns ``(embeddings, cache)`` and
``backward`` adds parameter gradients into ``encoder.params.grads``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import EncoderConfig
from .nnprims.layers import (
    conv_nd, conv_nd_backward, relu, relu_backward, linear, linear_backward,
    global_average_pool, global_average_pool_backward,
    gru_sequence, gru_sequence_backward, attention_pool, attention_pool_backward,
    GRU_PARAM_NAMES,
)
from .nnprims.params import ParamSet, init_uniform
from .nnprims.similarity import percentile
from .rng import substream

logger = logging.getLogger(__name__)

MODALITIES = ("video", "sensor")
INTENSITY_PERCENTILE = 99.0


@dataclass
class SpatialEmbedding:
    vectors: np.ndarray  # (N, d)
    modality: str


@dataclass
class TemporalEmbedding:
    vectors: np.ndarray  # (N, d)
    modality: str
    source: str = "online"


@dataclass
class JointRepresentation:
    vectors: np.ndarray  # (N, 2d), spatial half first
    modality: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] // 2


def concat_joint(spatial: SpatialEmbedding, temporal: TemporalEmbedding) -> JointRepresentation:
    if spatial.modality != temporal.modality:
        raise ValueError(f"Cannot join {spatial.modality} spatial with {temporal.modality} temporal embeddings")
    if spatial.vectors.shape != temporal.vectors.shape:
        raise ValueError(f"Spatial {spatial.vectors.shape} and temporal {temporal.vectors.shape} "
                         "embeddings must have the same shape")
    return JointRepresentation(np.concatenate([spatial.vectors, temporal.vectors], axis=1),
                               spatial.modality)


def split_joint(joint: JointRepresentation) -> Tuple[SpatialEmbedding, TemporalEmbedding]:
    d = joint.dim
    return (SpatialEmbedding(joint.vectors[:, :d].copy(), joint.modality),
            TemporalEmbedding(joint.vectors[:, d:].copy(), joint.modality))


# Shared building blocks

def _add_conv_stack(params: ParamSet, rng: np.random.Generator, prefix: str, in_channels: int,
                    channels, kernel, dtype):
    kernel = tuple(kernel)
    taps = int(np.prod(kernel))
    for i, out_channels in enumerate(channels):
        fan_in = in_channels * taps
        params.add(f"{prefix}{i}.weight",
                   init_uniform(rng, (out_channels, in_channels) + kernel, fan_in, dtype))
        params.add(f"{prefix}{i}.bias", np.zeros(out_channels, dtype=dtype))
        in_channels = out_channels


def _conv_stack(x: np.ndarray, params: ParamSet, prefix: str, count: int, stride, padding):
    caches = []
    for i in range(count):
        y, conv_cache = conv_nd(x, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"],
                                stride, padding)
        x, mask = relu(y)
        caches.append((conv_cache, mask))
    return x, caches


def _conv_stack_backward(dx: np.ndarray, params: ParamSet, prefix: str, caches) -> np.ndarray:
    for i in reversed(range(len(caches))):
        conv_cache, mask = caches[i]
        dx, dweight, dbias = conv_nd_backward(relu_backward(dx, mask), conv_cache)
        params.accumulate(f"{prefix}{i}.weight", dweight)
        params.accumulate(f"{prefix}{i}.bias", dbias)
    return dx


def _add_linear(params: ParamSet, rng: np.random.Generator, name: str, n_in: int, n_out: int, dtype):
    params.add(f"{name}.weight", init_uniform(rng, (n_out, n_in), n_in, dtype))
    params.add(f"{name}.bias", np.zeros(n_out, dtype=dtype))


def _add_gru(params: ParamSet, rng: np.random.Generator, n_in: int, hidden: int, dtype):
    for gate in ("z", "r", "n"):
        params.add(f"gru.w_{gate}", init_uniform(rng, (hidden, n_in), hidden, dtype))
        params.add(f"gru.u_{gate}", init_uniform(rng, (hidden, hidden), hidden, dtype))
        params.add(f"gru.b_{gate}", np.zeros(hidden, dtype=dtype))


def _gru_params(params: ParamSet) -> Dict[str, np.ndarray]:
    return {name: params[f"gru.{name}"] for name in GRU_PARAM_NAMES}


class Encoder:
    """Common parameter handling for all encoders."""

    modality = ""
    kind = ""

    def __init__(self, params: ParamSet, role: str = "online"):
        self.params = params
        self.role = role

    @property
    def name(self) -> str:
        return f"{self.modality}_{self.kind}"

    def clone(self, role: Optional[str] = None) -> "Encoder":
        """Deep copy sharing no arrays with this encoder."""
        twin = object.__new__(type(self))
        twin.__dict__.update(self.__dict__)
        twin.params = self.params.copy()
        twin.role = role or self.role
        return twin

    def astype(self, dtype) -> "Encoder":
        twin = self.clone()
        twin.params = self.params.astype(dtype)
        twin.dtype = np.dtype(dtype)
        return twin

    def _cast(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x).astype(self.dtype, copy=False)

    def __call__(self, x: np.ndarray, *args) -> np.ndarray:
        return self.forward(x, *args)[0]

    def forward(self, x, *args):
        raise NotImplementedError

    def backward(self, d_out: np.ndarray, cache):
        raise NotImplementedError


class _SensorTrunk(Encoder):
    """conv1d stack followed by a GRU over the downsampled time axis."""

    modality = "sensor"

    def __init__(self, num_channels: int, config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.num_channels = num_channels
        self.config = config
        self.dtype = np.dtype(dtype)
        params = ParamSet()
        _add_conv_stack(params, rng, "conv", num_channels, config.sensor_conv_channels,
                        (config.sensor_kernel,), dtype)
        _add_gru(params, rng, config.sensor_conv_channels[-1], config.gru_hidden, dtype)
        super().__init__(params)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = self._cast(x)
        if x.ndim != 3:
            raise ValueError(f"Sensor windows must be (N, C, T), got shape {x.shape}")
        if x.shape[1] != self.num_channels:
            raise ValueError(f"Channel-count mismatch: encoder expects {self.num_channels} channels, "
                             f"got {x.shape[1]}")
        return x

    def _trunk(self, x: np.ndarray):
        features, conv_caches = _conv_stack(x, self.params, "conv", len(self.config.sensor_conv_channels),
                                            self.config.sensor_stride, self.config.sensor_kernel // 2)
        sequence = np.ascontiguousarray(features.transpose(0, 2, 1))
        states, final, gru_cache = gru_sequence(sequence, _gru_params(self.params))
        return states, final, (conv_caches, gru_cache)

    def _trunk_backward(self, dstates, dfinal, cache):
        conv_caches, gru_cache = cache
        dsequence, gru_grads = gru_sequence_backward(dstates, dfinal, gru_cache)
        for name, grad in gru_grads.items():
            self.params.accumulate(f"gru.{name}", grad)
        _conv_stack_backward(dsequence.transpose(0, 2, 1), self.params, "conv", conv_caches)


class SensorSpatialEncoder(_SensorTrunk):
    """GRU final state plus a projection of per-channel 99th-percentile intensity."""

    kind = "spatial"

    def __init__(self, num_channels: int, config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(num_channels, config, rng, dtype)
        _add_linear(self.params, rng, "intensity", num_channels, config.embed_dim, dtype)

    def forward(self, x: np.ndarray):
        x = self._check_input(x)
        _, final, trunk_cache = self._trunk(x)
        intensity = percentile(x, INTENSITY_PERCENTILE, axis=2).astype(self.dtype)
        projected, proj_cache = linear(intensity, self.params["intensity.weight"],
                                       self.params["intensity.bias"])
        return final + projected, (trunk_cache, proj_cache)

    def backward(self, d_out: np.ndarray, cache):
        trunk_cache, proj_cache = cache
        _, dweight, dbias = linear_backward(d_out, proj_cache)
        self.params.accumulate("intensity.weight", dweight)
        self.params.accumulate("intensity.bias", dbias)
        self._trunk_backward(None, d_out, trunk_cache)


class SensorTemporalEncoder(_SensorTrunk):
    """Attention-pooled GRU states projected to the embedding dimension."""

    kind = "temporal"

    def __init__(self, num_channels: int, config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(num_channels, config, rng, dtype)
        self.params.add("attention.w", init_uniform(rng, (config.gru_hidden,), config.gru_hidden, dtype))
        _add_linear(self.params, rng, "proj", config.gru_hidden, config.embed_dim, dtype)

    def forward(self, x: np.ndarray):
        x = self._check_input(x)
        states, _, trunk_cache = self._trunk(x)
        pooled, pool_cache = attention_pool(states, self.params["attention.w"])
        out, proj_cache = linear(pooled, self.params["proj.weight"], self.params["proj.bias"])
        return out, (trunk_cache, pool_cache, proj_cache)

    def backward(self, d_out: np.ndarray, cache):
        trunk_cache, pool_cache, proj_cache = cache
        dpooled, dweight, dbias = linear_backward(d_out, proj_cache)
        self.params.accumulate("proj.weight", dweight)
        self.params.accumulate("proj.bias", dbias)
        dstates, dw = attention_pool_backward(dpooled, pool_cache)
        self.params.accumulate("attention.w", dw)
        self._trunk_backward(dstates, None, trunk_cache)


class VideoSpatialEncoder(Encoder):
    """Temporal mean frame through a conv2d stack, pooled and projected."""

    modality = "video"
    kind = "spatial"

    def __init__(self, frame_shape: Tuple[int, int], config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.frame_shape = tuple(frame_shape)
        self.config = config
        self.dtype = np.dtype(dtype)
        params = ParamSet()
        kernel = (config.video_spatial_kernel,) * 2
        _add_conv_stack(params, rng, "conv", 1, config.video_spatial_channels, kernel, dtype)
        _add_linear(params, rng, "proj", config.video_spatial_channels[-1], config.embed_dim, dtype)
        super().__init__(params)

    def forward(self, clips: np.ndarray):
        clips = self._cast(clips)
        if clips.ndim != 4 or clips.shape[2:] != self.frame_shape:
            raise ValueError(f"Video clips must be (N, F, {self.frame_shape[0]}, {self.frame_shape[1]}), "
                             f"got shape {clips.shape}")
        image = clips.mean(axis=1, dtype=np.float64).astype(self.dtype)[:, None]
        features, conv_caches = _conv_stack(image, self.params, "conv", len(self.config.video_spatial_channels),
                                            self.config.video_spatial_stride, self.config.video_spatial_kernel // 2)
        pooled, pool_shape = global_average_pool(features)
        out, proj_cache = linear(pooled, self.params["proj.weight"], self.params["proj.bias"])
        return out, (conv_caches, pool_shape, proj_cache)

    def backward(self, d_out: np.ndarray, cache):
        conv_caches, pool_shape, proj_cache = cache
        dpooled, dweight, dbias = linear_backward(d_out, proj_cache)
        self.params.accumulate("proj.weight", dweight)
        self.params.accumulate("proj.bias", dbias)
        _conv_stack_backward(global_average_pool_backward(dpooled, pool_shape), self.params, "conv", conv_caches)


class VideoTemporalEncoder(Encoder):
    """Frame-difference stack through a conv3d stack, pooled and projected."""

    modality = "video"
    kind = "temporal"

    def __init__(self, frame_shape: Tuple[int, int], config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.frame_shape = tuple(frame_shape)
        self.config = config
        self.dtype = np.dtype(dtype)
        params = ParamSet()
        kernel = (config.video_temporal_kernel,) * 3
        _add_conv_stack(params, rng, "conv", 1, config.video_temporal_channels, kernel, dtype)
        _add_linear(params, rng, "proj", config.video_temporal_channels[-1], config.embed_dim, dtype)
        super().__init__(params)

    def forward(self, clips: np.ndarray):
        clips = self._cast(clips)
        if clips.ndim != 4 or clips.shape[2:] != self.frame_shape:
            raise ValueError(f"Video clips must be (N, F, {self.frame_shape[0]}, {self.frame_shape[1]}), "
                             f"got shape {clips.shape}")
        if clips.shape[1] < 2:
            raise ValueError(f"Video temporal encoding needs at least 2 frames, got {clips.shape[1]}")

        stack = np.diff(clips, axis=1)[:, None]
        features, conv_caches = _conv_stack(stack, self.params, "conv", len(self.config.video_temporal_channels),
                                            self.config.video_temporal_stride,
                                            self.config.video_temporal_kernel // 2)
        pooled, pool_shape = global_average_pool(features)
        out, proj_cache = linear(pooled, self.params["proj.weight"], self.params["proj.bias"])
        return out, (conv_caches, pool_shape, proj_cache)

    def backward(self, d_out: np.ndarray, cache):
        conv_caches, pool_shape, proj_cache = cache
        dpooled, dweight, dbias = linear_backward(d_out, proj_cache)
        self.params.accumulate("proj.weight", dweight)
        self.params.accumulate("proj.bias", dbias)
        _conv_stack_backward(global_average_pool_backward(dpooled, pool_shape), self.params, "conv", conv_caches)


@dataclass
class EncoderSet:
    sensor_spatial: SensorSpatialEncoder
    video_spatial: VideoSpatialEncoder
    sensor_temporal: SensorTemporalEncoder
    video_temporal: VideoTemporalEncoder

    def items(self) -> List[Tuple[str, Encoder]]:
        return [(name, getattr(self, name)) for name in
                ("sensor_spatial", "video_spatial", "sensor_temporal", "video_temporal")]

    def num_parameters(self) -> int:
        return sum(encoder.params.num_elements() for _, encoder in self.items())


def build_encoders(config: EncoderConfig, num_channels: int, frame_shape: Tuple[int, int],
                   seed: int, dtype=np.float32) -> EncoderSet:
    """Initialize all four encoders from the ``init`` substream of ``seed``."""
    encoders = EncoderSet(
        sensor_spatial=SensorSpatialEncoder(num_channels, config, substream(seed, "init", "sensor_spatial"), dtype),
        video_spatial=VideoSpatialEncoder(frame_shape, config, substream(seed, "init", "video_spatial"), dtype),
        sensor_temporal=SensorTemporalEncoder(num_channels, config, substream(seed, "init", "sensor_temporal"), dtype),
        video_temporal=VideoTemporalEncoder(frame_shape, config, substream(seed, "init", "video_temporal"), dtype),
    )
    logger.debug(f"Built encoders with {encoders.num_parameters():,} parameters")
    return encoders


def encode_batched(encoder: Encoder, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward pass over ``data`` in chunks, concatenated in input order."""
    if data.shape[0] == 0:
        return np.zeros((0, encoder.config.embed_dim), dtype=encoder.dtype)
    chunks = [encoder(data[start:start + batch_size]) for start in range(0, data.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def encode_sensor_spatial(windows: np.ndarray, encoder: SensorSpatialEncoder) -> SpatialEmbedding:
    return SpatialEmbedding(encode_batched(encoder, windows), "sensor")


def encode_video_spatial(clips: np.ndarray, encoder: VideoSpatialEncoder) -> SpatialEmbedding:
    return SpatialEmbedding(encode_batched(encoder, clips), "video")


def encode_sensor_temporal(windows: np.ndarray, encoder: SensorTemporalEncoder) -> TemporalEmbedding:
    return TemporalEmbedding(encode_batched(encoder, windows), "sensor", encoder.role)


def encode_video_temporal(clips: np.ndarray, encoder: VideoTemporalEncoder) -> TemporalEmbedding:
    return TemporalEmbedding(encode_batched(encoder, clips), "video", encoder.role)
