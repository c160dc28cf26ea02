"""CKPT1 named-tensor container.

Layout::

    b"CKPT1\\n"
    one JSON line: [{"name": ..., "shape": [...], "offset": ...}, ...]
    b"\\n"
    concatenated little-endian float32 blobs

``offset`` is the byte offset of a tensor's blob from the start of the
payload (the byte after the manifest newline).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict

import numpy as np
import torch

MAGIC = b"CKPT1\n"


class CheckpointError(ValueError):
    pass


def save_paramset(path: str | os.PathLike, params: Dict[str, torch.Tensor]) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(manifest, separators=(",", ":")).encode())
        fh.write(b"\n")
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_paramset(path: str | os.PathLike, dtype: torch.dtype = torch.float32,
                  ) -> Dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a CKPT1 file")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed manifest ({exc})") from None
    payload = memoryview(raw)[end + 1:]
    out: Dict[str, torch.Tensor] = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + 4 * count
        if stop > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(shape)
        out[entry["name"]] = torch.from_numpy(arr.astype(np.float32)).to(dtype)
    return out
