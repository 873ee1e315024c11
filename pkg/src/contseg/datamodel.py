"""Volumes, masks, cases and task datasets, plus the raw volume file format.

A volume on disk is a pair ``<name>.json`` (header) + ``<name>.raw``
(little-endian payload, row-major with D as the slowest axis).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    MalformedHeader,
    NonFiniteVoxel,
    PayloadSizeMismatch,
    ShapeMismatch,
    TooFewCases,
)

# Recorded in every experiment record so splits can be reproduced elsewhere.
PRNG_NAME = "numpy.random.PCG64/SeedSequence-v1"

_DTYPES = {"f32-le": np.dtype("<f4"), "u8": np.dtype("u1")}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ShapeMismatch(f"volume must be 3D with dims >= 1, got {vox.shape}")
        if not np.isfinite(vox).all():
            raise NonFiniteVoxel("volume contains NaN or Inf")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        object.__setattr__(self, "voxels", _frozen(vox))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got {lab.shape}")
        if not np.isin(lab, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class Case:
    id: str
    volume: Volume
    mask: SegMask

    def __post_init__(self):
        if self.volume.shape != self.mask.shape:
            raise ShapeMismatch(
                f"case {self.id}: volume {self.volume.shape} vs mask {self.mask.shape}"
            )


@dataclass(frozen=True)
class TaskDataset:
    name: str
    cases: tuple[Case, ...]

    def __post_init__(self):
        cases = tuple(self.cases)
        if not cases:
            raise TooFewCases(f"task {self.name} has no cases")
        ids = [c.id for c in cases]
        if len(set(ids)) != len(ids):
            raise ValueError(f"task {self.name} has duplicate case ids")
        object.__setattr__(self, "cases", cases)

    def __len__(self) -> int:
        return len(self.cases)

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)


@dataclass(frozen=True)
class TaskSequence:
    tasks: tuple[TaskDataset, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("a task sequence needs at least one task")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise ValueError("task names must be unique")
        object.__setattr__(self, "tasks", tasks)

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class SliceBatch:
    images: np.ndarray  # [N, 1, H, W] float32
    masks: np.ndarray  # [N, H, W] uint8
    provenance: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1 or self.images.shape[0] < 1:
            raise ShapeMismatch(f"images must be [N,1,H,W], got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ShapeMismatch(f"masks {self.masks.shape} do not match images {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]


# --------------------------------------------------------------------------- I/O


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".raw") else path


def _read_header(stem: Path) -> dict:
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{stem}.json: {exc}") from exc
    problems = []
    shape = header.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(d, int) and d >= 1 for d in shape)):
        problems.append("shape must be three positive ints")
    spacing = header.get("spacing", [1.0, 1.0, 1.0])
    if not (isinstance(spacing, list) and len(spacing) == 3 and all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        problems.append("spacing must be three positive numbers")
    if header.get("dtype") not in _DTYPES:
        problems.append(f"dtype must be one of {sorted(_DTYPES)}")
    if header.get("kind") not in ("image", "mask"):
        problems.append("kind must be 'image' or 'mask'")
    if problems:
        raise MalformedHeader(f"{stem}.json: " + "; ".join(problems))
    return header


def _read_payload(stem: Path, header: dict) -> np.ndarray:
    dtype = _DTYPES[header["dtype"]]
    raw = stem.with_suffix(".raw").read_bytes()
    expected = math.prod(header["shape"]) * dtype.itemsize
    if len(raw) != expected:
        raise PayloadSizeMismatch(f"{stem}.raw: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dtype).reshape(header["shape"])


def load_mask(path) -> SegMask:
    stem = _stem(path)
    header = _read_header(stem)
    if header["kind"] != "mask":
        raise MalformedHeader(f"{stem}.json is not a mask header")
    return SegMask(_read_payload(stem, header))


def load_volume(path) -> tuple[Volume, SegMask | None]:
    """Read an image volume and, when its header names one, the paired mask.

    The image header may carry ``"mask": "<stem>"`` (relative to the header's
    directory) pointing at a mask file pair.
    """
    stem = _stem(path)
    header = _read_header(stem)
    if header["kind"] != "image":
        raise MalformedHeader(f"{stem}.json is a {header['kind']} header; use load_mask")
    vox = _read_payload(stem, header)
    if vox.dtype != np.float32:
        vox = vox.astype(np.float32)
    if not np.isfinite(vox).all():
        raise NonFiniteVoxel(f"{stem}.raw contains NaN or Inf")
    volume = Volume(vox, tuple(header["spacing"]))
    mask = None
    if header.get("mask"):
        mask = load_mask(stem.parent / header["mask"])
        if mask.shape != volume.shape:
            raise ShapeMismatch(f"{stem}: mask shape {mask.shape} != volume shape {volume.shape}")
    return volume, mask


def _write_pair(stem: Path, array: np.ndarray, header: dict) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1) + "\n")
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(array).tobytes())


def write_volume(path, volume: Volume, mask: SegMask | None = None) -> Path:
    """Write ``volume`` (and ``mask`` as ``<stem>_mask``); returns the header path."""
    stem = _stem(path)
    header = {
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "dtype": "f32-le",
        "kind": "image",
    }
    if mask is not None:
        mask_stem = stem.with_name(stem.name + "_mask")
        _write_pair(
            mask_stem,
            mask.labels.astype("u1"),
            {"shape": list(mask.shape), "spacing": list(volume.spacing), "dtype": "u8", "kind": "mask"},
        )
        header["mask"] = mask_stem.name
    _write_pair(stem, volume.voxels.astype("<f4"), header)
    return stem.with_suffix(".json")


# ------------------------------------------------------------------ operations


def normalize_minmax(voxels: np.ndarray) -> np.ndarray:
    lo, hi = float(voxels.min()), float(voxels.max())
    if hi <= lo:
        return np.zeros_like(voxels, dtype=np.float32)
    return ((voxels - lo) / (hi - lo)).astype(np.float32)


def slice_volume(case: Case) -> SliceBatch:
    """Axial slices (index along D) of a per-volume min-max normalized case."""
    vox = normalize_minmax(case.volume.voxels)
    depth = vox.shape[0]
    return SliceBatch(
        images=vox[:, None, :, :].copy(),
        masks=case.mask.labels.copy(),
        provenance=tuple((case.id, i) for i in range(depth)),
    )


def slice_dataset(ds: TaskDataset, hw: tuple[int, int] | None = None) -> SliceBatch:
    """Slice every case of ``ds``; with ``hw``, zero-pad each slice bottom/right to that size."""
    batches = [slice_volume(c) for c in ds.cases]
    if hw is not None:
        batches = [pad_batch(b, hw) for b in batches]
    return SliceBatch(
        images=np.concatenate([b.images for b in batches]),
        masks=np.concatenate([b.masks for b in batches]),
        provenance=tuple(p for b in batches for p in b.provenance),
    )


def pad_batch(batch: SliceBatch, hw: tuple[int, int]) -> SliceBatch:
    h, w = batch.images.shape[2:]
    th, tw = hw
    if h > th or w > tw:
        raise ShapeMismatch(f"slice {h}x{w} does not fit into model input {th}x{tw}")
    if (h, w) == (th, tw):
        return batch
    images = np.zeros((len(batch), 1, th, tw), np.float32)
    masks = np.zeros((len(batch), th, tw), np.uint8)
    images[:, :, :h, :w] = batch.images
    masks[:, :h, :w] = batch.masks
    return SliceBatch(images, masks, batch.provenance)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(ds: TaskDataset, ratio: float, seed: int) -> tuple[TaskDataset, TaskDataset]:
    """Case-level random split into (train, test).

    ``|train| = round_half_up(ratio * n)``, kept within ``[1, n-1]`` so both
    sides stay non-empty. Each side keeps the original case order.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = len(ds)
    if n < 2:
        raise TooFewCases(f"task {ds.name} has {n} case(s); a split needs at least 2")
    n_train = min(max(round_half_up(ratio * n), 1), n - 1)
    rng = np.random.Generator(np.random.PCG64(seed))
    train_idx = np.sort(rng.permutation(n)[:n_train])
    in_train = np.zeros(n, bool)
    in_train[train_idx] = True
    train = tuple(c for c, t in zip(ds.cases, in_train) if t)
    test = tuple(c for c, t in zip(ds.cases, in_train) if not t)
    return TaskDataset(ds.name, train), TaskDataset(ds.name, test)
