"""Checkpoint container: magic, u32 header length, JSON header, float32 tensors.

The header carries the model config, a tensor manifest (name, shape, byte
offset relative to the payload start), the step counter and whether
optimizer moments follow the weights. Optimizer moments are stored as
``adam.m/<name>`` and ``adam.v/<name>`` entries.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError

MAGIC = b"CCLSTMCK"


def save(path, params: dict[str, torch.Tensor], config: dict, step: int = 0,
         optimizer=None, extra: dict | None = None) -> None:
    tensors = [(name, t) for name, t in params.items()]
    if optimizer is not None:
        tensors += [(f"adam.m/{n}", t) for n, t in optimizer.m.items()]
        tensors += [(f"adam.v/{n}", t) for n, t in optimizer.v.items()]
    manifest, chunks, offset = [], [], 0
    for name, t in tensors:
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": config, "tensors": manifest, "step": int(step),
              "has_optimizer_state": optimizer is not None,
              "optimizer_step": int(optimizer.step) if optimizer is not None else 0,
              "extra": extra or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> tuple[dict, dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Return (header, params, optimizer tensors)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {blob[:8]!r})")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n])
    body = memoryview(blob)[12 + n:]
    params, opt = {}, {}
    for entry in header["tensors"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        target = opt if entry["name"].startswith("adam.") else params
        target[entry["name"]] = torch.from_numpy(arr)
    return header, params, opt
