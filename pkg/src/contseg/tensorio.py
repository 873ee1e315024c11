"""Manifest + raw payload storage for named tensors (checkpoints, strategy state).

``<path>`` holds a JSON manifest; ``<path>.raw`` the little-endian f32 data of
every tensor, concatenated in manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def write_tensors(path, tensors: dict[str, torch.Tensor], meta: dict, groups: dict[str, str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        entry = {"name": name, "shape": list(arr.shape), "offset": offset}
        if groups is not None:
            entry["group"] = groups[name]
        entries.append(entry)
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {**meta, "tensors": entries}
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    raw_path(path).write_bytes(b"".join(chunks))
    return path


def raw_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".raw")


def read_tensors(path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    flat = np.frombuffer(raw_path(path).read_bytes(), dtype="<f4")
    tensors = {}
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        chunk = flat[e["offset"] : e["offset"] + size]
        if chunk.size != size:
            raise ValueError(f"{path}: payload too short for tensor {e['name']}")
        tensors[e["name"]] = torch.from_numpy(chunk.reshape(e["shape"]).astype(np.float32))
    return manifest, tensors
