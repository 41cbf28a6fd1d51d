"""
Checkpoint format: an 8-byte little-endian header length, an orjson header
{"tensors": [{name, shape, offset}], "meta": {...}}, then every tensor as
little-endian float64 in header order. Files are byte-identical for identical
parameters and meta.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import orjson
import torch
from torch import nn

from promptscope.errors import CheckpointIncompatibleError
from promptscope.infra.logging import get_logger

logger = get_logger("store.checkpoint")

_HEADER = struct.Struct("<Q")
_LE_F64 = np.dtype("<f8")


def encode_state(state: Mapping[str, torch.Tensor], meta: Optional[Dict[str, Any]] = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().to(torch.float64).numpy().astype(_LE_F64, copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = np.ascontiguousarray(arr).tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = orjson.dumps({"tensors": entries, "meta": meta or {}}, option=orjson.OPT_SORT_KEYS)
    return _HEADER.pack(len(header)) + header + b"".join(chunks)


def decode_state(blob: bytes) -> tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    if len(blob) < _HEADER.size:
        raise CheckpointIncompatibleError("checkpoint is truncated")
    (length,) = _HEADER.unpack_from(blob)
    try:
        header = orjson.loads(blob[_HEADER.size: _HEADER.size + length])
    except orjson.JSONDecodeError as e:
        raise CheckpointIncompatibleError(f"corrupt checkpoint header: {e}") from e
    payload = memoryview(blob)[_HEADER.size + length:]
    state: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + count * _LE_F64.itemsize
        if end > len(payload):
            raise CheckpointIncompatibleError(f"tensor {entry['name']} runs past the end of the payload")
        arr = np.frombuffer(payload[start:end], dtype=_LE_F64).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float64))
    return state, header.get("meta", {})


def save_checkpoint(model: nn.Module, path: str | Path, meta: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write every parameter and buffer of model.

    Args:
        model: Module to persist
        path: Destination file; parent directories are created
        meta: JSON-serializable run metadata (stage, step, seed, config digest)

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_state(model.state_dict(), meta)
    path.write_bytes(blob)
    logger.info("saved checkpoint path=%s bytes=%d", path, len(blob))
    return path


def load_checkpoint(model: nn.Module, path: str | Path) -> Dict[str, Any]:
    """
    Load a checkpoint into model after checking names and shapes.

    Returns:
        The checkpoint's meta dictionary
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointIncompatibleError(f"missing checkpoint {path}")
    state, meta = decode_state(path.read_bytes())
    live = model.state_dict()
    missing = sorted(set(live) - set(state))
    extra = sorted(set(state) - set(live))
    if missing or extra:
        raise CheckpointIncompatibleError(f"checkpoint {path} does not fit the model: missing={missing[:5]} extra={extra[:5]}")
    for name, tensor in live.items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise CheckpointIncompatibleError(
                f"shape mismatch for {name}: model {tuple(tensor.shape)} vs checkpoint {tuple(state[name].shape)}"
            )
    with torch.no_grad():
        for name, tensor in live.items():
            tensor.copy_(state[name].to(tensor.dtype))
    logger.info("loaded checkpoint path=%s tensors=%d", path, len(state))
    return meta
