"""
Checkpoint utilities for training runs.
Single-file sectioned container, little-endian, with a CRC32 trailer.

Layout:
    magic "DAQ8CKPT" | u32 container version | u32 section count
    per section: u16 name length | name (utf-8) | u64 payload length | payload
    u32 crc32 of all preceding bytes
"""

import logging
import os
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np

from daq8.errors import CheckpointError

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"DAQ8CKPT"
CONTAINER_VERSION = 1
CHECKPOINT_NAME = "checkpoint.daq8"

_HEADER = struct.Struct("<II")
_NAME_LEN = struct.Struct("<H")
_PAYLOAD_LEN = struct.Struct("<Q")
_CRC = struct.Struct("<I")

Sink = Union[str, Path, BinaryIO]


def get_checkpoint_file(out_dir: Union[str, Path]) -> Path:
    """Checkpoint path inside a run directory (directory is created)."""
    checkpoint_file = Path(out_dir) / CHECKPOINT_NAME
    checkpoint_file.parent.mkdir(parents=True, exist_ok=True)
    return checkpoint_file


def encode_container(sections: Dict[str, bytes]) -> bytes:
    parts = [CONTAINER_MAGIC, _HEADER.pack(CONTAINER_VERSION, len(sections))]
    for name in sorted(sections):
        encoded = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_PAYLOAD_LEN.pack(len(sections[name])))
        parts.append(sections[name])
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_container(blob: bytes) -> Dict[str, bytes]:
    if len(blob) < len(CONTAINER_MAGIC) + _HEADER.size + _CRC.size:
        raise CheckpointError("checkpoint truncated")
    if blob[:len(CONTAINER_MAGIC)] != CONTAINER_MAGIC:
        raise CheckpointError("not a daq8 checkpoint (bad magic)")
    body, trailer = blob[:-_CRC.size], blob[-_CRC.size:]
    (crc,) = _CRC.unpack(trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch (file is corrupt)")
    version, count = _HEADER.unpack_from(body, len(CONTAINER_MAGIC))
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"unsupported checkpoint container version {version}")
    offset = len(CONTAINER_MAGIC) + _HEADER.size
    sections: Dict[str, bytes] = {}
    try:
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(body, offset)
            offset += _NAME_LEN.size
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (size,) = _PAYLOAD_LEN.unpack_from(body, offset)
            offset += _PAYLOAD_LEN.size
            if offset + size > len(body):
                raise CheckpointError(f"section '{name}' runs past end of checkpoint")
            sections[name] = body[offset:offset + size]
            offset += size
    except struct.error as e:
        raise CheckpointError(f"checkpoint section table is corrupt: {e}") from e
    return sections


def write_container(sink: Sink, sections: Dict[str, bytes]) -> None:
    """
    Write sections to a path (atomically, via a temporary file) or to an open binary stream.

    Args:
        sink: Destination path or writable binary file object
        sections: Mapping of versioned section name (e.g. "model/v1") to payload
    """
    blob = encode_container(sections)
    if hasattr(sink, "write"):
        sink.write(blob)
        return
    path = Path(sink)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
        logger.info(f"Checkpoint saved to {path} ({len(blob)} bytes, sections: {', '.join(sorted(sections))})")
    except OSError as e:
        logger.error(f"Failed to save checkpoint: {e}")
        raise


def read_container(source: Sink) -> Dict[str, bytes]:
    """Read and verify a container from a path or readable binary stream."""
    if hasattr(source, "read"):
        return decode_container(source.read())
    path = Path(source)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_container(path.read_bytes())


def require_section(sections: Dict[str, bytes], name: str) -> bytes:
    """Fetch a section, failing with the versions that are present."""
    if name not in sections:
        family = name.split("/")[0]
        present = [s for s in sections if s.split("/")[0] == family]
        if present:
            raise CheckpointError(f"checkpoint has {', '.join(present)} but {name} is required")
        raise CheckpointError(f"checkpoint is missing section {name}")
    return sections[name]


_ARRAY_COUNT = struct.Struct("<I")
_NDIM = struct.Struct("<B")


def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    """Named float32 arrays: u32 count, then per array name, u8 ndim, u32 extents, float32 payload."""
    parts = [_ARRAY_COUNT.pack(len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_NDIM.pack(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    try:
        (count,) = _ARRAY_COUNT.unpack_from(payload, 0)
        offset = _ARRAY_COUNT.size
        for _ in range(count):
            (name_len,) = _NAME_LEN.unpack_from(payload, offset)
            offset += _NAME_LEN.size
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = _NDIM.unpack_from(payload, offset)
            offset += _NDIM.size
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(payload):
                raise CheckpointError(f"array '{name}' runs past end of section")
            arrays[name] = np.frombuffer(payload, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size
    except struct.error as e:
        raise CheckpointError(f"array section is corrupt: {e}") from e
    if offset != len(payload):
        raise CheckpointError("array section has trailing bytes")
    return arrays
