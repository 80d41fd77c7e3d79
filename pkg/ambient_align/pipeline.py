"""
Pipeline Orchestration
Artifact layout, prerequisite checks and one function per pipeline step
(generate, stage1, stage2, probe, analyze, export, ablate). The CLI is a thin
layer over these.
"""

import dataclasses
import json
import logging
import subprocess
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd

from . import __version__
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .clustering import ClusterState
from .config import RunConfig, save_config
from .encoders import EncoderSet, build_encoders
from .errors import MissingArtifactError
from .evaluation import ProbeResult, export_embeddings, train_linear_probe
from .stage1 import Stage1Result, run_stage1
from .stage2 import Stage2Result, analyze_weights, run_stage2
from .synthdata import Dataset, Scenario, build_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

DATASET_DIR = "dataset"
CONFIG_NAME = "config.json"
RUN_RECORD = "run.json"
STAGE1_CHECKPOINT = "stage1.ckpt"
STAGE1_LOG = "stage1_log.csv"
STAGE2_CHECKPOINT = "stage2.ckpt"
STAGE2_LOG = "stage2_log.csv"
WEIGHTS_CDF = "weights_cdf.csv"
PROBE_RESULT = "probe_result.json"
ANALYSIS_RESULT = "analysis.json"
CLASSWISE_TABLE = "classwise.csv"
PHASE_SPACE_TABLE = "phase_space.csv"
EMBEDDINGS_TABLE = "embeddings.csv"
ABLATION_TABLE = "ablation.csv"

FLOAT_FORMAT = "%.9g"

# Stage-2 overrides per ablation variant
ABLATION_VARIANTS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "uniform": {"weight_mode": "uniform"},
    "no_spatial": {"weight_mode": "no_spatial"},
    "no_temporal": {"weight_mode": "no_temporal"},
    "no_momentum": {"use_momentum": False},
}


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        described = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                                   cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if described.returncode == 0 and described.stdout.strip():
            return described.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_run_record(root: Path, command: str, config: RunConfig, started: float,
                     extra: Optional[Dict[str, Any]] = None) -> Path:
    """Merge this command's entry into ``run.json``."""
    path = root / RUN_RECORD
    record = json.loads(path.read_text()) if path.exists() else {}
    entry = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "wall_time_seconds": round(time.time() - started, 3),
        "version": version_string(),
    }
    entry.update(extra or {})
    record.setdefault("commands", {})[command] = entry
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, hint)
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


# Steps

def generate(config: RunConfig, root: Path) -> Dataset:
    root.mkdir(parents=True, exist_ok=True)
    scenario = Scenario.from_config(config.scenario, config.seed)
    dataset = build_dataset(scenario, config.scenario.num_sequences, config.window.window_seconds,
                            config.window.overlap_seconds, config.split.fractions, config.config_hash())
    save_dataset(dataset, root / DATASET_DIR)
    save_config(config, root / CONFIG_NAME)
    return dataset


def open_dataset(root: Path) -> Dataset:
    require(root / DATASET_DIR / "manifest.json", "run 'generate' first")
    return load_dataset(root / DATASET_DIR)


def fresh_encoders(config: RunConfig, dataset: Dataset) -> EncoderSet:
    return build_encoders(config.encoder, dataset.scenario.num_channels, dataset.video.shape[2:], config.seed)


def save_stage1(path: Path, result: Stage1Result, config: RunConfig, epoch: int) -> Path:
    return checkpoint_save(path, {
        "sensor_spatial": result.sensor_encoder.params,
        "video_spatial": result.video_encoder.params,
        "video_head": result.video_head,
        "cluster": result.state.to_sections(),
    }, stage="stage1", config_hash=config.config_hash(), epoch=epoch,
        extra={"stopped_reason": result.stopped_reason, "num_clusters": result.state.num_clusters})


def stage1(config: RunConfig, root: Path) -> Stage1Result:
    dataset = open_dataset(root)
    checkpoint_path = root / STAGE1_CHECKPOINT

    def keep_last_good(epoch: int, snapshot: Stage1Result):
        save_stage1(checkpoint_path, snapshot, config, epoch)

    result = run_stage1(dataset, config, on_epoch_end=keep_last_good)
    save_stage1(checkpoint_path, result, config, int(result.log["epoch"].iloc[-1]))
    _write_csv(result.log, root / STAGE1_LOG)
    return result


def load_stage1(config: RunConfig, root: Path, dataset: Dataset):
    """Spatial encoders and cluster state from ``stage1.ckpt``."""
    path = require(root / STAGE1_CHECKPOINT, "run 'stage1' first")
    checkpoint = checkpoint_load(path, expected_config_hash=config.config_hash(), expected_stage="stage1")
    encoders = fresh_encoders(config, dataset)
    checkpoint.restore("sensor_spatial", encoders.sensor_spatial.params)
    checkpoint.restore("video_spatial", encoders.video_spatial.params)
    return encoders, ClusterState.from_sections(checkpoint.group("cluster"))


def save_stage2(path: Path, encoders: EncoderSet, result: Stage2Result, config: RunConfig,
                variant: str = "full") -> Path:
    return checkpoint_save(path, {
        "sensor_spatial": encoders.sensor_spatial.params,
        "video_spatial": encoders.video_spatial.params,
        "sensor_temporal": result.sensor_temporal.params,
        "video_temporal": result.video_temporal.params,
        "momentum_sensor": result.momentum_sensor.params,
        "momentum_video": result.momentum_video.params,
    }, stage="stage2", config_hash=config.config_hash(), epoch=config.stage2.epochs,
        extra={"variant": variant})


def stage2(config: RunConfig, root: Path) -> Stage2Result:
    dataset = open_dataset(root)
    encoders, _ = load_stage1(config, root, dataset)
    result = run_stage2(dataset, encoders.sensor_spatial, encoders.video_spatial, config)
    save_stage2(root / STAGE2_CHECKPOINT, encoders, result, config)
    _write_csv(result.log, root / STAGE2_LOG)
    _write_csv(result.weights_cdf, root / WEIGHTS_CDF)
    return result


def load_stage2(config: RunConfig, root: Path, dataset: Dataset):
    """Online encoders (spatial + temporal) and momentum temporal encoders from ``stage2.ckpt``."""
    path = require(root / STAGE2_CHECKPOINT, "run 'stage2' first")
    checkpoint: Checkpoint = checkpoint_load(path, expected_config_hash=config.config_hash(),
                                             expected_stage="stage2")
    encoders = fresh_encoders(config, dataset)
    for name, encoder in encoders.items():
        checkpoint.restore(name, encoder.params)
    momentum_sensor = encoders.sensor_temporal.clone(role="momentum")
    momentum_video = encoders.video_temporal.clone(role="momentum")
    checkpoint.restore("momentum_sensor", momentum_sensor.params)
    checkpoint.restore("momentum_video", momentum_video.params)
    return encoders, momentum_sensor, momentum_video


def probe(config: RunConfig, root: Path, level: Optional[str] = None) -> ProbeResult:
    dataset = open_dataset(root)
    encoders, _, _ = load_stage2(config, root, dataset)
    result = train_linear_probe(dataset, encoders.sensor_spatial, encoders.sensor_temporal,
                                config.probe, config.seed, level=level)
    (root / PROBE_RESULT).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return result


def analyze(config: RunConfig, root: Path, split: str = "pretrain", query: Optional[int] = None,
            top_k: int = 3):
    dataset = open_dataset(root)
    encoders, momentum_sensor, momentum_video = load_stage2(config, root, dataset)
    analysis = analyze_weights(dataset, encoders.sensor_spatial, encoders.video_spatial,
                               momentum_sensor, momentum_video, config.stage2,
                               split=split, query=query, top_k=top_k)
    _write_csv(analysis.classwise, root / CLASSWISE_TABLE)
    if analysis.phase_space is not None:
        _write_csv(analysis.phase_space, root / PHASE_SPACE_TABLE)
    (root / ANALYSIS_RESULT).write_text(json.dumps({
        "split": split,
        "summary": analysis.summary,
        "top_classes": analysis.top_classes,
        "bottom_classes": analysis.bottom_classes,
    }, indent=2, sort_keys=True))
    return analysis


def export(config: RunConfig, root: Path, split: str = "all", path: Optional[Path] = None) -> Path:
    dataset = open_dataset(root)
    encoders, _, _ = load_stage2(config, root, dataset)
    return export_embeddings(dataset, encoders, path or root / EMBEDDINGS_TABLE, split)


def ablate(config: RunConfig, root: Path, variants: Iterable[str] = tuple(ABLATION_VARIANTS)) -> pd.DataFrame:
    """Stage 2 plus probe for each variant on the same stage-1 checkpoint."""
    dataset = open_dataset(root)
    encoders, _ = load_stage1(config, root, dataset)
    rows: List[Dict[str, Any]] = []
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ValueError(f"Unknown ablation variant '{variant}', expected one of {tuple(ABLATION_VARIANTS)}")
        variant_config = dataclasses.replace(
            config, stage2=dataclasses.replace(config.stage2, **ABLATION_VARIANTS[variant])).validate()
        logger.info(f"Ablation variant '{variant}'")
        result = run_stage2(dataset, encoders.sensor_spatial, encoders.video_spatial, variant_config)
        probed = train_linear_probe(dataset, encoders.sensor_spatial, result.sensor_temporal,
                                    variant_config.probe, variant_config.seed)
        final = result.log.iloc[-1]
        rows.append({
            "variant": variant,
            "weighted_f1": probed.weighted_f1,
            "mAP": probed.mean_ap,
            "final_loss": float(final["loss"]),
            "hard_minus_false": float(final["hard_minus_false"]),
        })
    table = pd.DataFrame(rows)
    _write_csv(table, root / ABLATION_TABLE)
    return table
