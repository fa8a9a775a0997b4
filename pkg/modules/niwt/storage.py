"""
Binary container for checkpoints and maps.

Layout (little-endian)::

    b"NIWT" | u32 version | u64 header length | UTF-8 JSON header | f64 payloads

The header holds a ``kind`` tag, free-form ``meta`` and a table of
``{name, shape, offset}`` entries whose offsets are relative to the first
payload byte.
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from .errors import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

MAGIC = b"NIWT"
VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass
class Container:
    kind: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def dumps(container: Container) -> bytes:
    table = []
    payloads = []
    offset = 0
    for name in sorted(container.tensors):
        array = np.ascontiguousarray(container.tensors[name], dtype="<f8")
        raw = array.tobytes()
        table.append({"name": name, "shape": list(array.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": container.kind, "meta": container.meta, "tensors": table},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(header)) + header + b"".join(payloads)


def loads(blob: bytes, source: str = "<bytes>") -> Container:
    if len(blob) < _PREAMBLE.size:
        raise FormatError(f"{source}: truncated container")
    magic, version, header_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported container version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from exc

    base = start + header_len
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = base + int(entry["offset"])
        end = begin + 8 * count
        if end > len(blob):
            raise FormatError(f"{source}: payload for {entry['name']} is truncated")
        tensors[entry["name"]] = np.frombuffer(blob[begin:end], dtype="<f8").astype(np.float64).reshape(shape)
    return Container(kind=header.get("kind", ""), tensors=tensors, meta=header.get("meta", {}))


def save(path: str, container: Container) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(dumps(container))
    logger.info(f"Wrote {container.kind} container to {path}")
    return path


def load(path: str, artifact: str = "", expected_kind: str = "") -> Container:
    if not os.path.exists(path):
        raise MissingArtifactError(artifact or os.path.basename(path), path)
    with open(path, "rb") as f:
        container = loads(f.read(), source=path)
    if expected_kind and container.kind != expected_kind:
        raise FormatError(f"{path}: expected a {expected_kind} container, found {container.kind!r}")
    return container
