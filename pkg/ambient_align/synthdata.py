"""
Synthetic Exocentric Video and Ambient Sensor Data
Seedable generator of paired video/sensor streams with ground-truth source and
action labels, plus windowing, label-stratified splitting, normalization and
on-disk persistence of the resulting dataset.
"""

import json
import logging
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Dict, Any, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from . import container
from .nnprims.similarity import PERCENTILE_METHOD
from .rng import substream

logger = logging.getLogger(__name__)

IDLE = -1
SPLIT_NAMES = ("pretrain", "probe_train", "probe_val", "probe_test")

BLOB_SIGMA = 1.5
BLOB_AMPLITUDE = 0.5
EVENT_AMPLITUDE = 1.0
VIDEO_NOISE_SCALE = 0.1


class PackingError(ValueError):
    """Requested events do not fit in the scenario duration without overlap."""


@dataclass(frozen=True)
class Scenario:
    """Parameters of one generated sequence."""
    num_sources: int = 7
    actions_per_source: int = 2
    sensor_rate: float = 30.0
    video_rate: float = 8.0
    duration: float = 60.0
    noise_std: float = 0.1
    seed: int = 0
    frame_height: int = 32
    frame_width: int = 32
    num_events: int = 14
    event_min_seconds: float = 2.0
    event_max_seconds: float = 3.0
    min_gap_seconds: float = 1.0

    def __post_init__(self):
        if self.num_sources < 2:
            raise ValueError(f"num_sources must be >= 2, got {self.num_sources}")
        if self.actions_per_source < 1:
            raise ValueError(f"actions_per_source must be >= 1, got {self.actions_per_source}")
        for name in ("sensor_rate", "video_rate", "duration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.num_events < 0:
            raise ValueError(f"num_events must be >= 0, got {self.num_events}")
        if not 0 < self.event_min_seconds <= self.event_max_seconds:
            raise ValueError("event durations must satisfy 0 < min <= max")

    @classmethod
    def from_config(cls, scenario_config, seed: int) -> "Scenario":
        """Build from a ``ScenarioConfig`` (fields it lacks keep defaults)."""
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in asdict(scenario_config).items() if k in known}
        return cls(seed=seed, **values)

    @property
    def num_channels(self) -> int:
        return self.num_sources

    @property
    def num_classes(self) -> int:
        """Source-action classes plus the idle class."""
        return self.num_sources * self.actions_per_source + 1

    @property
    def num_sensor_samples(self) -> int:
        return int(round(self.duration * self.sensor_rate))

    @property
    def num_video_frames(self) -> int:
        return int(round(self.duration * self.video_rate))


@dataclass
class Event:
    source_id: int
    action_id: int
    start: float
    duration: float

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class SensorWindow:
    values: np.ndarray  # (C, T)
    source_id: int
    action_id: int
    window_index: int


@dataclass
class VideoClip:
    frames: np.ndarray  # (F, H, W)
    window_index: int


def class_label(source_id: int, action_id: int, scenario: Scenario) -> int:
    """Flat class index; the idle state takes the last index."""
    if source_id == IDLE:
        return scenario.num_sources * scenario.actions_per_source
    return source_id * scenario.actions_per_source + action_id


# Generation

def source_positions(scenario: Scenario) -> np.ndarray:
    """Fixed (row, col) screen position of every source, on a circle."""
    center = np.array([(scenario.frame_height - 1) / 2.0, (scenario.frame_width - 1) / 2.0])
    radius = 0.3 * min(scenario.frame_height, scenario.frame_width)
    angles = 2 * np.pi * np.arange(scenario.num_sources) / scenario.num_sources
    return center + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)


def action_direction(action_id: int, scenario: Scenario) -> np.ndarray:
    angle = 2 * np.pi * action_id / scenario.actions_per_source
    return np.array([np.sin(angle), np.cos(angle)])


def action_profile(u: np.ndarray, action_id: int) -> np.ndarray:
    """Sensor transient shape over normalized event time u in [0, 1]."""
    if action_id == 0:
        return u
    if action_id == 1:
        return 1.0 - u
    return 0.5 * (1.0 - np.cos(2 * np.pi * (action_id - 1) * u))


def static_background(scenario: Scenario) -> np.ndarray:
    """Smooth static scene in roughly [0.15, 0.45], shared by every sequence of a seed."""
    rng = substream(scenario.seed, "data", "background")
    noise = rng.standard_normal((scenario.frame_height, scenario.frame_width))
    smooth = gaussian_filter(noise, sigma=2.0, mode="wrap")
    span = smooth.max() - smooth.min()
    scaled = (smooth - smooth.min()) / span if span > 0 else np.zeros_like(smooth)
    return 0.15 + 0.3 * scaled


def pack_events(scenario: Scenario, rng: np.random.Generator) -> List[Event]:
    """Draw non-overlapping events covering every (source, action) pair when possible.

    Raises:
        PackingError: if the durations plus minimum gaps exceed the scenario duration
    """
    n = scenario.num_events
    if n == 0:
        return []

    durations = rng.uniform(scenario.event_min_seconds, scenario.event_max_seconds, size=n)
    required = durations.sum() + (n - 1) * scenario.min_gap_seconds
    if required > scenario.duration:
        raise PackingError(f"{n} events need {required:.2f} s including gaps, "
                           f"scenario lasts {scenario.duration:.2f} s")

    pairs = [(s, a) for s in range(scenario.num_sources) for a in range(scenario.actions_per_source)]
    if n >= len(pairs):
        extra = rng.integers(0, len(pairs), size=n - len(pairs))
        chosen = pairs + [pairs[i] for i in extra]
    else:
        chosen = [pairs[i] for i in rng.choice(len(pairs), size=n, replace=False)]
    order = rng.permutation(n)

    slack = scenario.duration - required
    gaps = rng.dirichlet(np.ones(n + 1)) * slack

    events = []
    t = gaps[0]
    for k in range(n):
        source_id, action_id = chosen[order[k]]
        events.append(Event(source_id=int(source_id), action_id=int(action_id),
                            start=float(t), duration=float(durations[k])))
        t += durations[k] + scenario.min_gap_seconds + gaps[k + 1]
    return events


def render_sensor(events: Sequence[Event], scenario: Scenario, rng: np.random.Generator) -> np.ndarray:
    times = np.arange(scenario.num_sensor_samples) / scenario.sensor_rate
    stream = np.zeros((scenario.num_channels, times.size))
    for event in events:
        mask = (times >= event.start) & (times < event.end)
        u = (times[mask] - event.start) / event.duration
        stream[event.source_id, mask] += EVENT_AMPLITUDE * action_profile(u, event.action_id)
    if scenario.noise_std > 0:
        stream += rng.normal(0.0, scenario.noise_std, size=stream.shape)
    return stream


def render_video(events: Sequence[Event], scenario: Scenario, rng: np.random.Generator,
                 background: Optional[np.ndarray] = None) -> np.ndarray:
    background = static_background(scenario) if background is None else background
    times = np.arange(scenario.num_video_frames) / scenario.video_rate
    video = np.repeat(background[None], times.size, axis=0)

    rows, cols = np.mgrid[0:scenario.frame_height, 0:scenario.frame_width]
    positions = source_positions(scenario)
    travel = 0.15 * min(scenario.frame_height, scenario.frame_width)

    for event in events:
        active = np.nonzero((times >= event.start) & (times < event.end))[0]
        direction = action_direction(event.action_id, scenario)
        for f in active:
            u = (times[f] - event.start) / event.duration
            center = positions[event.source_id] + (u - 0.5) * travel * direction
            blob = np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * BLOB_SIGMA ** 2))
            video[f] += BLOB_AMPLITUDE * blob

    if scenario.noise_std > 0:
        video += rng.normal(0.0, VIDEO_NOISE_SCALE * scenario.noise_std, size=video.shape)
    return np.clip(video, 0.0, 1.0)


def generate_scenario(scenario: Scenario, rng: Optional[np.random.Generator] = None
                      ) -> Tuple[List[Event], np.ndarray, np.ndarray]:
    """Generate one sequence.

    Args:
        scenario: Validated scenario parameters
        rng: Generator for this sequence (defaults to the scenario's data stream)

    Returns:
        Tuple of (events, raw sensor stream (C, T_total), raw video (F_total, H, W))
    """
    rng = rng or substream(scenario.seed, "data")
    events = pack_events(scenario, rng)
    sensor = render_sensor(events, scenario, rng)
    video = render_video(events, scenario, rng)
    return events, sensor, video


# Windowing and normalization

@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: List[int] = field(default_factory=list)

    @classmethod
    def fit(cls, windows: np.ndarray) -> "NormalizationStats":
        """Per-channel population statistics over windows (N, C, T)."""
        if windows.shape[0] == 0:
            raise ValueError("Cannot fit normalization on an empty population")
        values = windows.astype(np.float64)
        mean = values.mean(axis=(0, 2))
        std = values.std(axis=(0, 2))
        degenerate = [int(c) for c in np.nonzero(std <= 1e-12)[0]]
        for channel in degenerate:
            logger.warning(f"Sensor channel {channel} has zero variance; passed through as zeros")
        return cls(mean=mean, std=std, degenerate=degenerate)

    def apply(self, windows: np.ndarray) -> np.ndarray:
        values = windows.astype(np.float64)
        safe_std = np.where(self.std > 1e-12, self.std, 1.0)
        out = (values - self.mean[None, :, None]) / safe_std[None, :, None]
        if self.degenerate:
            out[:, self.degenerate, :] = 0.0
        return out.astype(np.float32)

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationStats":
        return cls(mean=np.asarray(data["mean"], dtype=np.float64),
                   std=np.asarray(data["std"], dtype=np.float64),
                   degenerate=[int(c) for c in data.get("degenerate", [])])


@dataclass
class WindowSet:
    """Windows cut from one or more sequences, stored as stacked arrays."""
    sensor: np.ndarray  # (N, C, T)
    video: np.ndarray  # (N, F, H, W)
    labels: pd.DataFrame
    stats: Optional[NormalizationStats] = None

    def __len__(self) -> int:
        return self.sensor.shape[0]

    def normalize(self, population: Optional[np.ndarray] = None) -> "WindowSet":
        """Fit z-score stats on ``population`` (all windows when None) and apply to every window."""
        fit_on = self.sensor if population is None else self.sensor[np.asarray(population, dtype=np.int64)]
        self.stats = NormalizationStats.fit(fit_on)
        self.sensor = self.stats.apply(self.sensor)
        return self

    def pairs(self) -> List[Tuple[SensorWindow, VideoClip]]:
        result = []
        for i, row in enumerate(self.labels.itertuples(index=False)):
            result.append((SensorWindow(self.sensor[i], int(row.source_id), int(row.action_id),
                                        int(row.window_index)),
                           VideoClip(self.video[i], int(row.window_index))))
        return result


def window_counts(scenario: Scenario, window_seconds: float, overlap_seconds: float) -> Dict[str, int]:
    """Samples per window and stride for both modalities."""
    if not 0 <= overlap_seconds < window_seconds:
        raise ValueError(f"overlap_seconds ({overlap_seconds}) must be in [0, window_seconds)")
    stride_seconds = window_seconds - overlap_seconds
    counts = {}
    for key, rate in (("sensor", scenario.sensor_rate), ("video", scenario.video_rate)):
        for what, seconds in (("window", window_seconds), ("stride", stride_seconds)):
            exact = seconds * rate
            if abs(exact - round(exact)) > 1e-9:
                raise ValueError(f"{what} of {seconds} s at {rate} Hz is not a whole number of samples")
            counts[f"{key}_{what}"] = int(round(exact))
    return counts


def cut_windows(events: Sequence[Event], sensor: np.ndarray, video: np.ndarray, scenario: Scenario,
                window_seconds: float, overlap_seconds: float, sequence_id: int = 0,
                first_index: int = 0) -> WindowSet:
    """Slide a window over one sequence and label each window.

    A window takes the labels of the event covering more than half of it,
    otherwise the idle label.
    """
    counts = window_counts(scenario, window_seconds, overlap_seconds)
    n_sensor = (sensor.shape[1] - counts["sensor_window"]) // counts["sensor_stride"] + 1
    n_video = (video.shape[0] - counts["video_window"]) // counts["video_stride"] + 1
    n_windows = min(n_sensor, n_video)
    if sensor.shape[1] < counts["sensor_window"] or n_windows < 1:
        raise ValueError(f"Stream of {sensor.shape[1] / scenario.sensor_rate:.2f} s is shorter "
                         f"than one {window_seconds} s window")

    stride_seconds = window_seconds - overlap_seconds
    sensor_windows, video_clips, rows = [], [], []
    for k in range(n_windows):
        s0 = k * counts["sensor_stride"]
        v0 = k * counts["video_stride"]
        sensor_windows.append(sensor[:, s0:s0 + counts["sensor_window"]])
        video_clips.append(video[v0:v0 + counts["video_window"]])

        t0 = k * stride_seconds
        source_id, action_id = IDLE, IDLE
        for event in events:
            overlap = min(event.end, t0 + window_seconds) - max(event.start, t0)
            if overlap > window_seconds / 2:
                source_id, action_id = event.source_id, event.action_id
                break
        rows.append({
            "window_index": first_index + k,
            "sequence_id": sequence_id,
            "source_id": source_id,
            "action_id": action_id,
            "class_label": class_label(source_id, action_id, scenario),
            "start_seconds": t0,
        })

    return WindowSet(sensor=np.stack(sensor_windows).astype(np.float32),
                     video=np.stack(video_clips).astype(np.float32),
                     labels=pd.DataFrame(rows))


def cut_sequences(streams: Sequence[Tuple[List[Event], np.ndarray, np.ndarray]],
                  scenario: Scenario, window_seconds: float, overlap_seconds: float) -> WindowSet:
    """Window every sequence; window indices run globally across sequences."""
    parts = []
    next_index = 0
    for sequence_id, (events, sensor, video) in enumerate(streams):
        part = cut_windows(events, sensor, video, scenario, window_seconds, overlap_seconds,
                           sequence_id=sequence_id, first_index=next_index)
        next_index += len(part)
        parts.append(part)

    return WindowSet(sensor=np.concatenate([p.sensor for p in parts]),
                     video=np.concatenate([p.video for p in parts]),
                     labels=pd.concat([p.labels for p in parts], ignore_index=True))


def window_and_normalize(streams: Sequence[Tuple[List[Event], np.ndarray, np.ndarray]],
                         scenario: Scenario, window_seconds: float, overlap_seconds: float,
                         population: Optional[np.ndarray] = None) -> WindowSet:
    """Window every sequence and z-score the sensor windows.

    Args:
        streams: (events, sensor, video) per sequence, as from generate_scenario
        scenario: Scenario the streams were generated with
        window_seconds: Window length
        overlap_seconds: Overlap between consecutive windows
        population: Window indices the statistics are fitted on (all when None)

    Returns:
        WindowSet with normalized sensor windows and fitted stats
    """
    windows = cut_sequences(streams, scenario, window_seconds, overlap_seconds)
    return windows.normalize(population)

# Splitting

@dataclass
class SplitResult:
    indices: Dict[str, np.ndarray]
    warnings: List[str] = field(default_factory=list)

    def assignment(self, n: int) -> np.ndarray:
        """Split name per sample."""
        names = np.empty(n, dtype=object)
        for name, idx in self.indices.items():
            names[idx] = name
        return names


def _largest_remainder(total: int, fractions: np.ndarray) -> np.ndarray:
    exact = fractions * total
    counts = np.floor(exact).astype(np.int64)
    remainder = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def split_dataset(labels: Sequence[int], fractions: Sequence[float], seed: int,
                  names: Sequence[str] = SPLIT_NAMES, stream: str = "split") -> SplitResult:
    """Disjoint, exhaustive, label-stratified split into named splits (pretrain / probe by default).

    Classes with fewer samples than non-empty splits go entirely to the first non-empty split.
    Splits with fraction 0 stay empty.
    """
    names = tuple(names)
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.shape != (len(names),):
        raise ValueError(f"Expected {len(names)} split fractions, got {fractions.shape[0]}")
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must be non-negative and sum to 1, got {fractions.tolist()}")

    labels = np.asarray(labels)
    rng = substream(seed, stream)
    warnings = []
    active_splits = int(np.count_nonzero(fractions > 0))
    fallback = names[int(np.argmax(fractions > 0))]

    classes, class_counts = np.unique(labels, return_counts=True)
    small = [c for c, n in zip(classes, class_counts) if n < active_splits]
    for c in small:
        message = f"Class {c} has {int(np.sum(labels == c))} samples (< {active_splits} splits); assigned to {fallback}"
        logger.warning(message)
        warnings.append(message)

    strat_classes = [c for c in classes if c not in small]
    strat_counts = {c: int(np.sum(labels == c)) for c in strat_classes}
    targets = _largest_remainder(sum(strat_counts.values()), fractions)

    # Per-class floors, then hand out each class's leftover samples one per split
    quotas = {c: np.floor(fractions * n).astype(np.int64) for c, n in strat_counts.items()}
    deficit = targets - sum(quotas.values(), np.zeros(len(fractions), dtype=np.int64))
    leftovers = sorted(strat_classes, key=lambda c: (-(strat_counts[c] - quotas[c].sum()), c))
    for c in leftovers:
        remaining = strat_counts[c] - int(quotas[c].sum())
        frac = fractions * strat_counts[c] - quotas[c]
        order = sorted(range(len(fractions)), key=lambda s: (-deficit[s], -frac[s], s))
        picked = [s for s in order if deficit[s] > 0][:remaining]
        if len(picked) < remaining:
            open_splits = [s for s in order if fractions[s] > 0 and s not in picked]
            picked += open_splits[:remaining - len(picked)]
        for s in picked:
            quotas[c][s] += 1
            deficit[s] -= 1

    buckets: Dict[str, List[int]] = {name: [] for name in names}
    for c in classes:
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(members.size)]
        if c in small:
            buckets[fallback].extend(members.tolist())
            continue
        start = 0
        for name, count in zip(names, quotas[c]):
            buckets[name].extend(members[start:start + count].tolist())
            start += count

    indices = {name: np.array(sorted(idx), dtype=np.int64) for name, idx in buckets.items()}
    return SplitResult(indices=indices, warnings=warnings)


# Dataset assembly and persistence

@dataclass
class Dataset:
    scenario: Scenario
    window_seconds: float
    overlap_seconds: float
    sensor: np.ndarray
    video: np.ndarray
    labels: pd.DataFrame
    stats: NormalizationStats
    splits: Dict[str, np.ndarray]
    config_hash: str = ""
    warnings: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.sensor.shape[0]

    @property
    def num_classes(self) -> int:
        return self.scenario.num_classes

    @property
    def source_ids(self) -> np.ndarray:
        return self.labels["source_id"].to_numpy(dtype=np.int64)

    @property
    def action_ids(self) -> np.ndarray:
        return self.labels["action_id"].to_numpy(dtype=np.int64)

    @property
    def class_labels(self) -> np.ndarray:
        return self.labels["class_label"].to_numpy(dtype=np.int64)

    @property
    def sequence_ids(self) -> np.ndarray:
        return self.labels["sequence_id"].to_numpy(dtype=np.int64)

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        if split not in self.splits:
            raise KeyError(f"Unknown split '{split}', expected one of {SPLIT_NAMES} or 'all'")
        return self.splits[split]


def build_dataset(scenario: Scenario, num_sequences: int, window_seconds: float,
                  overlap_seconds: float, fractions: Sequence[float], config_hash: str = "") -> Dataset:
    """Generate, window, split and normalize a full dataset.

    Sequences draw from their own substreams, so the result does not depend on
    generation order. Normalization statistics come from the pretrain split only.
    """
    streams = [generate_scenario(scenario, substream(scenario.seed, "data", "sequence", str(i)))
               for i in range(num_sequences)]

    windows = cut_sequences(streams, scenario, window_seconds, overlap_seconds)
    split = split_dataset(windows.labels["class_label"].to_numpy(), fractions, scenario.seed)
    windows.normalize(split.indices["pretrain"])

    labels = windows.labels.copy()
    labels["split"] = split.assignment(len(labels))
    warnings = list(split.warnings)
    warnings += [f"Sensor channel {c} has zero variance; passed through as zeros"
                 for c in windows.stats.degenerate]

    logger.info(f"Built dataset: {len(labels)} windows from {num_sequences} sequences, "
                + ", ".join(f"{name}={len(idx)}" for name, idx in split.indices.items()))
    return Dataset(scenario=scenario, window_seconds=window_seconds, overlap_seconds=overlap_seconds,
                   sensor=windows.sensor, video=windows.video, labels=labels, stats=windows.stats,
                   splits=split.indices, config_hash=config_hash, warnings=warnings)


MANIFEST_NAME = "manifest.json"
WINDOWS_NAME = "windows.dtch"
LABELS_NAME = "labels.csv"


def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write manifest.json, windows.dtch and labels.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    manifest = {
        "scenario": asdict(dataset.scenario),
        "window_seconds": dataset.window_seconds,
        "overlap_seconds": dataset.overlap_seconds,
        "num_windows": len(dataset),
        "num_classes": dataset.num_classes,
        "splits": {name: idx.tolist() for name, idx in dataset.splits.items()},
        "normalization": dataset.stats.to_dict(),
        "percentile_method": PERCENTILE_METHOD,
        "config_hash": dataset.config_hash,
        "warnings": dataset.warnings,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))

    sections = {}
    for i, window_index in enumerate(dataset.labels["window_index"]):
        sections[f"sensor/{window_index:06d}"] = dataset.sensor[i]
        sections[f"video/{window_index:06d}"] = dataset.video[i]
    container.save(directory / WINDOWS_NAME, sections,
                   {"kind": "windows", "config_hash": dataset.config_hash})

    columns = ["window_index", "sequence_id", "source_id", "action_id", "class_label", "split"]
    dataset.labels[columns].to_csv(directory / LABELS_NAME, index=False)
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())

    scenario = Scenario(**manifest["scenario"])
    labels = pd.read_csv(directory / LABELS_NAME)
    sections, _ = container.load(directory / WINDOWS_NAME)
    sensor = np.stack([sections[f"sensor/{w:06d}"] for w in labels["window_index"]])
    video = np.stack([sections[f"video/{w:06d}"] for w in labels["window_index"]])

    stride = manifest["window_seconds"] - manifest["overlap_seconds"]
    labels["start_seconds"] = (labels["window_index"] - labels.groupby("sequence_id")["window_index"]
                               .transform("min")) * stride

    return Dataset(scenario=scenario, window_seconds=manifest["window_seconds"],
                   overlap_seconds=manifest["overlap_seconds"], sensor=sensor, video=video,
                   labels=labels, stats=NormalizationStats.from_dict(manifest["normalization"]),
                   splits={name: np.asarray(idx, dtype=np.int64) for name, idx in manifest["splits"].items()},
                   config_hash=manifest.get("config_hash", ""), warnings=manifest.get("warnings", []))
