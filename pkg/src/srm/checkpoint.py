"""SRM1 checkpoint files.

Layout::

    b"SRM1"
    uint64 little-endian header length
    header: UTF-8 JSON {"schema", "config", "tensors": [{name, shape, offset}], "extra"}
    tensor data: little-endian float32, concatenated in manifest order

Offsets are byte offsets into the data section. Writing is deterministic, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import SrmConfig
from .model import SrmModel

MAGIC = b"SRM1"
SCHEMA_VERSION = 1
OPTIM_PREFIX = "optim/"


class CheckpointError(ValueError):
    pass


def _encode(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_tensors(
    path: str | Path,
    config: SrmConfig,
    tensors: dict[str, torch.Tensor],
    extra: dict[str, Any] | None = None,
) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        data = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = _encode(
        {"schema": SCHEMA_VERSION, "config": config.to_dict(), "tensors": manifest, "extra": extra or {}}
    )
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def read_tensors(path: str | Path) -> tuple[SrmConfig, dict[str, torch.Tensor], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (length,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("schema") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema {header.get('schema')!r}")
    data = raw[12 + length :]
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return SrmConfig.from_dict(header["config"]), tensors, header.get("extra", {})


def save_checkpoint(
    path: str | Path,
    model: SrmModel,
    optimizer_state: dict[str, torch.Tensor] | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    tensors = dict(model.state_dict())
    for name, value in (optimizer_state or {}).items():
        tensors[OPTIM_PREFIX + name] = value
    write_tensors(path, model.config, tensors, extra)


def load_checkpoint(path: str | Path) -> tuple[SrmModel, dict[str, torch.Tensor], dict[str, Any]]:
    """Returns (model, optimizer tensors, extra header fields)."""
    config, tensors, extra = read_tensors(path)
    model = SrmModel(config)
    weights = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    optim = {k[len(OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    model.load_state_dict(weights, strict=True)
    return model, optim, extra
