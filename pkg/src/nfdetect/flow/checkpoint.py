"""Binary checkpoint container for trained flows.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"MANFECKP"
    8       4     u32 format version (currently 1)
    12      4     u32 header length H in bytes
    16      H     UTF-8 JSON header: {"config", "metadata", "actnorm_ready", "arrays"}
    16+H    8*K   f64 payload, arrays concatenated in C order
    end-4   4     u32 CRC-32 of every preceding byte

``arrays`` is a list of ``{"name", "shape", "offset", "count"}`` entries, with
``offset`` counted in f64 elements from the start of the payload. Floats are
stored as raw IEEE-754 bits so a round trip reproduces log-likelihoods
bit-exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FlowConfig, FlowParams, param_names

MAGIC = b"MANFECKP"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_CRC = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(CheckpointFormatError):
    pass


@dataclass
class Checkpoint:
    params: FlowParams
    metadata: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def config(self) -> FlowConfig:
        return self.params.config


def encode_checkpoint(params: FlowParams, metadata: dict | None = None) -> bytes:
    arrays = params.arrays()
    index, chunks, pos = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": pos, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        pos += arr.size
    header = {
        "config": params.config.to_dict(),
        "metadata": metadata or {},
        "actnorm_ready": [bool(r) for r in params.actnorm_ready],
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size + _CRC.size:
        raise CheckpointFormatError(f"file too short ({len(raw)} bytes)", len(raw))
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})", 8)
    hstart = _PREFIX.size
    pstart = hstart + hlen
    if pstart + _CRC.size > len(raw):
        raise CheckpointFormatError(f"header of {hlen} bytes runs past end of file", len(raw))
    (crc,) = _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(raw[: -_CRC.size]) != crc:
        raise CheckpointFormatError("CRC mismatch, file is corrupt or truncated", len(raw) - _CRC.size)
    try:
        header = json.loads(raw[hstart:pstart].decode("utf-8"))
        cfg = FlowConfig(**header["config"])
        index = header["arrays"]
        ready = list(header["actnorm_ready"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}", hstart) from exc
    payload_len = len(raw) - _CRC.size - pstart
    if payload_len % 8:
        raise CheckpointFormatError("payload is not a whole number of f64 values", pstart)
    payload = np.frombuffer(raw, dtype="<f8", count=payload_len // 8, offset=pstart)
    expected = param_names(cfg)
    arrays = {}
    for entry in index:
        name, shape = entry["name"], tuple(entry["shape"])
        lo, n = int(entry["offset"]), int(entry["count"])
        if lo < 0 or lo + n > payload.size:
            raise CheckpointFormatError(f"array {name!r} runs past the payload", pstart + 8 * lo)
        if expected.get(name) != shape or int(np.prod(shape)) != n:
            raise CheckpointFormatError(f"array {name!r} has shape {shape}, config wants {expected.get(name)}", pstart + 8 * lo)
        arrays[name] = payload[lo : lo + n].astype(np.float64).reshape(shape)
    missing = set(expected) - set(arrays)
    if missing:
        raise CheckpointFormatError(f"missing arrays {sorted(missing)}", pstart)
    if len(ready) != cfg.k_steps:
        raise CheckpointFormatError("actnorm_ready does not match k_steps", hstart)
    return Checkpoint(FlowParams(cfg, arrays, ready), header.get("metadata", {}), version)


def save_checkpoint(params: FlowParams, path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, metadata))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
