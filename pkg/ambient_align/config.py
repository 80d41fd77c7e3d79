"""
Run Configuration
Nested dataclasses for every tunable of the pipeline, loaded from a JSON file
with optional dotted-key overrides and validated at load time.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

from .errors import ConfigError

logger = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "AMBIENT_ALIGN_OUTPUT"
DEFAULT_OUTPUT_DIR = "runs"

WEIGHT_MODES = ("full", "no_spatial", "no_temporal", "uniform")
PROBE_LEVELS = ("window", "sequence")


@dataclass
class ScenarioConfig:
    num_sources: int = 7
    actions_per_source: int = 2
    sensor_rate: float = 30.0
    video_rate: float = 8.0
    duration: float = 60.0
    noise_std: float = 0.1
    frame_height: int = 32
    frame_width: int = 32
    num_sequences: int = 18
    # per sequence
    num_events: int = 14
    event_min_seconds: float = 2.0
    event_max_seconds: float = 3.0
    min_gap_seconds: float = 1.0


@dataclass
class WindowConfig:
    window_seconds: float = 2.0
    overlap_seconds: float = 1.0


@dataclass
class SplitConfig:
    # pretrain, probe_train, probe_val, probe_test
    fractions: Tuple[float, float, float, float] = (0.8, 0.1, 0.05, 0.05)


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    sensor_conv_channels: Tuple[int, ...] = (32, 32)
    sensor_kernel: int = 5
    sensor_stride: int = 2
    gru_hidden: int = 64
    video_spatial_channels: Tuple[int, ...] = (16, 32, 64)
    video_spatial_kernel: int = 3
    video_spatial_stride: int = 2
    video_temporal_channels: Tuple[int, ...] = (16, 32)
    video_temporal_kernel: int = 3
    video_temporal_stride: Tuple[int, int, int] = (1, 2, 2)


@dataclass
class Stage1Config:
    warmup_epochs: int = 10
    joint_epochs: int = 10
    alpha: float = 1.0
    beta: float = 1.5
    max_epochs: int = 60
    change_rate_stop: float = 0.05
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    tau_cluster: float = 0.5
    memory_momentum: float = 0.5
    confidence_percentile: float = 75.0
    refine: bool = True
    # 0 selects one cluster per sensor source; idle windows join their nearest source cluster
    num_clusters: int = 0


@dataclass
class Stage2Config:
    tau_contrast: float = 0.10
    lambda_hard: float = 3.0
    momentum: float = 0.999
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    weight_mode: str = "full"
    use_momentum: bool = True


@dataclass
class ProbeConfig:
    epochs: int = 100
    learning_rate: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 64
    level: str = "window"


@dataclass
class RunConfig:
    """Complete configuration of one pipeline run."""
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    output_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        """Check every invariant of the nested sections.

        Raises:
            ConfigError: naming the first offending field and its constraint
        """
        sc = self.scenario
        _require(sc.num_sources >= 2, "scenario.num_sources", ">= 2")
        _require(sc.actions_per_source >= 1, "scenario.actions_per_source", ">= 1")
        for name in ("sensor_rate", "video_rate", "duration"):
            _require(getattr(sc, name) > 0, f"scenario.{name}", "> 0")
        _require(sc.noise_std >= 0, "scenario.noise_std", ">= 0")
        _require(sc.frame_height >= 4 and sc.frame_width >= 4,
                 "scenario.frame_height/frame_width", ">= 4 pixels")
        _require(sc.num_sequences >= 1, "scenario.num_sequences", ">= 1")
        _require(sc.num_events >= 0, "scenario.num_events", ">= 0")
        _require(0 < sc.event_min_seconds <= sc.event_max_seconds,
                 "scenario.event_min_seconds", "0 < event_min_seconds <= event_max_seconds")
        _require(sc.min_gap_seconds >= 0, "scenario.min_gap_seconds", ">= 0")

        win = self.window
        _require(win.window_seconds > 0, "window.window_seconds", "> 0")
        _require(0 <= win.overlap_seconds < win.window_seconds, "window.overlap_seconds",
                 "0 <= overlap_seconds < window_seconds")
        stride_seconds = win.window_seconds - win.overlap_seconds
        for rate_name in ("sensor_rate", "video_rate"):
            rate = getattr(sc, rate_name)
            for what, seconds in (("window_seconds", win.window_seconds), ("stride", stride_seconds)):
                _require(_is_integral(seconds * rate), f"window.{what}",
                         f"{what} x scenario.{rate_name} must be a whole number of samples")
        _require(win.window_seconds * sc.video_rate >= 2, "window.window_seconds",
                 "window must span at least 2 video frames")
        _require(win.window_seconds <= sc.duration, "window.window_seconds", "<= scenario.duration")

        fractions = tuple(self.split.fractions)
        _require(len(fractions) == 4, "split.fractions", "exactly 4 entries")
        _require(all(f >= 0 for f in fractions), "split.fractions", "non-negative")
        _require(abs(sum(fractions) - 1.0) <= 1e-9, "split.fractions",
                 f"must sum to 1 within 1e-9 (got {sum(fractions)!r})")
        _require(fractions[0] > 0, "split.fractions", "pretrain fraction > 0")

        enc = self.encoder
        _require(enc.embed_dim >= 1, "encoder.embed_dim", ">= 1")
        _require(enc.gru_hidden == enc.embed_dim, "encoder.gru_hidden",
                 "must equal encoder.embed_dim (GRU state is summed with the intensity projection)")
        for name in ("sensor_conv_channels", "video_spatial_channels", "video_temporal_channels"):
            channels = getattr(enc, name)
            _require(len(channels) >= 1 and all(c >= 1 for c in channels), f"encoder.{name}",
                     "non-empty list of positive channel counts")
        for name in ("sensor_kernel", "sensor_stride", "video_spatial_kernel",
                     "video_spatial_stride", "video_temporal_kernel"):
            _require(getattr(enc, name) >= 1, f"encoder.{name}", ">= 1")
        _require(len(enc.video_temporal_stride) == 3 and min(enc.video_temporal_stride) >= 1,
                 "encoder.video_temporal_stride", "three positive entries (t, h, w)")

        s1 = self.stage1
        _require(s1.alpha >= 0, "stage1.alpha", ">= 0")
        _require(s1.beta >= 0, "stage1.beta", ">= 0")
        _require(0 < s1.change_rate_stop < 1, "stage1.change_rate_stop", "0 < change_rate_stop < 1")
        _require(s1.warmup_epochs >= 0 and s1.joint_epochs >= 0, "stage1.warmup_epochs/joint_epochs", ">= 0")
        _require(s1.max_epochs > s1.warmup_epochs + s1.joint_epochs, "stage1.max_epochs",
                 "> warmup_epochs + joint_epochs")
        _require(s1.batch_size >= 2, "stage1.batch_size", ">= 2")
        _require(s1.learning_rate > 0, "stage1.learning_rate", "> 0")
        _require(s1.weight_decay >= 0, "stage1.weight_decay", ">= 0")
        _require(s1.tau_cluster > 0, "stage1.tau_cluster", "> 0")
        _require(0 <= s1.memory_momentum < 1, "stage1.memory_momentum", "0 <= memory_momentum < 1")
        _require(0 < s1.confidence_percentile <= 100, "stage1.confidence_percentile", "0 < p <= 100")
        _require(s1.num_clusters == 0 or s1.num_clusters >= 2, "stage1.num_clusters",
                 "0 (automatic) or >= 2")

        s2 = self.stage2
        _require(s2.tau_contrast > 0, "stage2.tau_contrast", "> 0")
        _require(s2.lambda_hard > 1, "stage2.lambda_hard", "> 1")
        _require(0 <= s2.momentum < 1, "stage2.momentum", "0 <= m < 1")
        _require(s2.epochs >= 1, "stage2.epochs", ">= 1")
        _require(s2.batch_size >= 2, "stage2.batch_size", ">= 2")
        _require(s2.learning_rate > 0, "stage2.learning_rate", "> 0")
        _require(s2.weight_decay >= 0, "stage2.weight_decay", ">= 0")
        _require(s2.weight_mode in WEIGHT_MODES, "stage2.weight_mode", f"one of {WEIGHT_MODES}")

        pr = self.probe
        _require(pr.epochs >= 1, "probe.epochs", ">= 1")
        _require(pr.learning_rate > 0, "probe.learning_rate", "> 0")
        _require(pr.batch_size >= 1, "probe.batch_size", ">= 1")
        _require(pr.level in PROBE_LEVELS, "probe.level", f"one of {PROBE_LEVELS}")

        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "non-negative integer")
        return self

    @property
    def num_clusters(self) -> int:
        if self.stage1.num_clusters:
            return self.stage1.num_clusters
        return self.scenario.num_sources

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON (output location excluded), 16 hex chars."""
        payload = self.to_dict()
        payload.pop("output_dir", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def resolve_output_dir(self, override: Optional[str] = None) -> Path:
        """--output-dir, else the environment variable, else ./runs."""
        chosen = override or self.output_dir or os.environ.get(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_DIR
        return Path(chosen)


def _require(condition: bool, field_name: str, constraint: str):
    if not condition:
        raise ConfigError(field_name, constraint)


def _is_integral(value: float, tol: float = 1e-9) -> bool:
    return abs(value - round(value)) <= tol


def _build(cls, data: Dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")

    kwargs = {}
    for name, value in data.items():
        declared = known[name]
        default = declared.default_factory() if declared.default_factory is not dataclasses.MISSING else declared.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(prefix + name, "expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(prefix + name, "expected true or false")
            kwargs[name] = value
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
            kwargs[name] = value
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        elif isinstance(default, (int, float)):
            raise ConfigError(prefix + name, f"expected {type(default).__name__}, got {value!r}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data).validate()


def apply_overrides(data: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else string."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like dotted.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"'{part}' is not a section")
        node[parts[-1]] = value
    return data


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load and validate a run configuration.

    Args:
        path: JSON config file (None for all defaults)
        overrides: ``dotted.key=value`` strings applied on top of the file

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(str(path), f"not valid JSON ({e})")
    data = apply_overrides(data, overrides)
    config = config_from_dict(data)
    logger.debug(f"Loaded config {config.config_hash()} from {path or 'defaults'}")
    return config


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return path
