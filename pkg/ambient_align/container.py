"""
DTCH Binary Tensor Container
Little-endian float32 tensors in named sections, plus a JSON metadata block.

Layout::

    magic      4 bytes   b"DTCH"
    version    u32
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes
    n_sections u32
    per section:
        name_len u32, name bytes (UTF-8)
        rank     u32
        dims     u32[rank]
        payload  float32[prod(dims)]
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Any, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"DTCH"
VERSION = 1

_U32 = struct.Struct("<I")


class ContainerError(ValueError):
    """Raised when a container is truncated or malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(sections: Dict[str, np.ndarray], metadata: Dict[str, Any] = None) -> bytes:
    """Serialize named tensors and metadata into container bytes.

    Sections are written in sorted name order so identical inputs give
    identical bytes.
    """
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta_bytes)), meta_bytes,
             _U32.pack(len(sections))]

    for name in sorted(sections):
        array = np.asarray(sections[name])
        if array.size and not np.all(np.isfinite(array)):
            raise ValueError(f"Section '{name}' contains nonfinite values")
        name_bytes = name.encode("utf-8")
        parts.append(_U32.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U32.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise ContainerError(f"Truncated container while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Parse container bytes into (sections, metadata).

    A newer container version is loaded best-effort with a warning: any
    section that parses is returned.
    """
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)

    version = reader.u32("version")
    if version > VERSION:
        logger.warning(f"Container version {version} is newer than supported {VERSION}; "
                       "loading matching sections best-effort")
    elif version < 1:
        raise ContainerError(f"Unsupported container version {version}", 4)

    meta_offset = reader.offset
    meta_raw = reader.take(reader.u32("metadata length"), "metadata")
    try:
        metadata = json.loads(meta_raw.decode("utf-8")) if meta_raw else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"Corrupt metadata block: {e}", meta_offset)

    sections: Dict[str, np.ndarray] = {}
    count = reader.u32("section count")
    for _ in range(count):
        start = reader.offset
        try:
            name = reader.take(reader.u32("name length"), "section name").decode("utf-8")
        except UnicodeDecodeError:
            raise ContainerError("Section name is not UTF-8", start)
        rank = reader.u32(f"rank of '{name}'")
        dims = tuple(reader.u32(f"dims of '{name}'") for _ in range(rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(4 * size, f"payload of '{name}'")
        sections[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)

    if reader.offset != len(data) and version == VERSION:
        raise ContainerError("Trailing bytes after last section", reader.offset)

    return sections, metadata


def save(path: Union[str, Path], sections: Dict[str, np.ndarray],
         metadata: Dict[str, Any] = None) -> Path:
    """Write a container file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode(sections, metadata))
    except OSError as e:
        raise OSError(f"Could not write container {path}: {e}") from e
    return path


def load(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a container file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Container not found: {path}")
    return decode(path.read_bytes())
