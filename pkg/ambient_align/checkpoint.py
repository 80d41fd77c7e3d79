"""
Checkpoints
Named parameter groups stored in a DTCH container under ``<group>/<name>``
sections, with stage, step, epoch and config-hash metadata.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from . import container
from .nnprims.params import ParamSet

logger = logging.getLogger(__name__)

SEPARATOR = "/"


@dataclass
class Checkpoint:
    groups: Dict[str, Dict[str, np.ndarray]]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.metadata.get("stage", "")

    @property
    def config_hash(self) -> str:
        return self.metadata.get("config_hash", "")

    def group(self, name: str) -> Dict[str, np.ndarray]:
        if name not in self.groups:
            raise KeyError(f"Checkpoint has no group '{name}' (groups: {', '.join(sorted(self.groups))})")
        return self.groups[name]

    def restore(self, name: str, params: ParamSet, strict: bool = True):
        """Copy one group into an existing ParamSet in place."""
        missing = params.load_arrays(self.group(name), strict=strict)
        if missing:
            logger.warning(f"Checkpoint group '{name}' is missing parameters: {', '.join(missing)}")
        return missing


def _flatten(groups: Mapping[str, Union[ParamSet, Mapping[str, np.ndarray]]]) -> Dict[str, np.ndarray]:
    sections = {}
    for group, arrays in groups.items():
        if SEPARATOR in group:
            raise ValueError(f"Group name '{group}' must not contain '{SEPARATOR}'")
        items = arrays.params if isinstance(arrays, ParamSet) else arrays
        for name, value in items.items():
            sections[f"{group}{SEPARATOR}{name}"] = np.asarray(value)
    return sections


def checkpoint_save(path: Union[str, Path], groups: Mapping[str, Union[ParamSet, Mapping[str, np.ndarray]]],
                    stage: str, config_hash: str, step: int = 0, epoch: int = 0,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write parameter groups and metadata to ``path``.

    Args:
        path: Output file
        groups: Group name -> ParamSet or name -> array mapping
        stage: Producing stage, e.g. ``stage1``
        config_hash: Hash of the producing run config
        step: Optimizer step count
        epoch: Last completed epoch
        extra: Additional JSON-serializable metadata

    Returns:
        Path of the written file
    """
    metadata = {"stage": stage, "config_hash": config_hash, "step": int(step), "epoch": int(epoch)}
    metadata.update(extra or {})
    path = container.save(path, _flatten(groups), metadata)
    logger.debug(f"Saved {stage} checkpoint to {path}")
    return path


def checkpoint_load(path: Union[str, Path], expected_config_hash: Optional[str] = None,
                    expected_stage: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; warns when the config hash differs from ``expected_config_hash``."""
    sections, metadata = container.load(path)
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for key, value in sections.items():
        group, _, name = key.partition(SEPARATOR)
        groups.setdefault(group, {})[name] = value

    checkpoint = Checkpoint(groups=groups, metadata=metadata)
    if expected_stage is not None and checkpoint.stage != expected_stage:
        raise ValueError(f"{path} is a '{checkpoint.stage}' checkpoint, expected '{expected_stage}'")
    if expected_config_hash is not None and checkpoint.config_hash != expected_config_hash:
        logger.warning(f"Checkpoint {path} was written with config hash {checkpoint.config_hash}, "
                       f"current config hash is {expected_config_hash}")
    return checkpoint
