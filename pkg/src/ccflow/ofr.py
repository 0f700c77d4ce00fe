"""OFR raster container: magic, u32 header length, JSON header, float32 planes.

Layout::

    b"OFRASTR1" | u32 LE header length | UTF-8 JSON header | planes

Planes are little-endian float32, written in the order of ``header["channels"]``,
each C-contiguous ``height x width``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"OFRASTR1"
_LE_F32 = np.dtype("<f4")


def encode_header(header: Mapping) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(planes: np.ndarray, channels: list[str], meta: Mapping | None = None) -> bytes:
    planes = np.asarray(planes)
    if planes.ndim != 3 or planes.shape[0] != len(channels):
        raise DataError(f"planes {planes.shape} do not match {len(channels)} channel names")
    header = dict(meta or {})
    header.update(channels=list(channels), height=int(planes.shape[1]),
                  width=int(planes.shape[2]), dtype="f32")
    head = encode_header(header)
    body = np.ascontiguousarray(planes, dtype=_LE_F32).tobytes()
    return MAGIC + struct.pack("<I", len(head)) + head + body


def from_bytes(blob: bytes, source: str = "<bytes>") -> tuple[dict, np.ndarray]:
    if blob[:8] != MAGIC:
        raise DataError(f"{source}: bad magic {blob[:8]!r}")
    (n,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable header: {exc}") from exc
    if header.get("dtype") != "f32":
        raise DataError(f"{source}: unsupported dtype {header.get('dtype')!r}")
    c, h, w = len(header["channels"]), header["height"], header["width"]
    body = blob[12 + n:]
    if len(body) != c * h * w * 4:
        raise DataError(f"{source}: expected {c * h * w * 4} payload bytes, found {len(body)}")
    planes = np.frombuffer(body, dtype=_LE_F32).reshape(c, h, w).astype(np.float32)
    return header, planes


def write(path: str | Path, planes: np.ndarray, channels: list[str], meta: Mapping | None = None) -> bytes:
    blob = to_bytes(planes, channels, meta)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return blob


def read(path: str | Path) -> tuple[dict, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return from_bytes(blob, str(path))
