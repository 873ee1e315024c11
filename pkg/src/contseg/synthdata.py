"""Synthetic hippocampus-like phantoms with controllable acquisition shifts.

Each case is one or two ellipsoidal blobs on a smooth background texture.
Everything is a pure function of ``(task seed, case index)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import Case, SegMask, TaskDataset, Volume, load_volume, write_volume
from .errors import ShapeTooSmall

BACKGROUND_LEVEL = 0.35
BACKGROUND_SPREAD = 0.15
FOREGROUND_LEVEL = 0.9


@dataclass(frozen=True)
class DomainShift:
    noise_sigma: float = 0.0
    bias_field_amp: float = 0.0
    contrast_gamma: float = 1.0
    fg_intensity: float = 1.0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.bias_field_amp < 0:
            raise ValueError("noise_sigma and bias_field_amp must be >= 0")
        if self.contrast_gamma <= 0:
            raise ValueError("contrast_gamma must be > 0")
        if not 0 < self.fg_intensity <= 1:
            raise ValueError("fg_intensity must be in (0, 1]")

    @property
    def is_identity(self) -> bool:
        return (self.noise_sigma, self.bias_field_amp, self.contrast_gamma, self.fg_intensity) == (0, 0, 1, 1)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_cases: int
    shape: tuple[int, int, int]
    shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if isinstance(self.shift, dict):
            object.__setattr__(self, "shift", DomainShift(**self.shift))
        if self.n_cases < 2:
            raise ValueError(f"task {self.name}: n_cases must be >= 2")
        if len(self.shape) != 3:
            raise ValueError(f"task {self.name}: shape must have three dims")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["shift"] = DomainShift(**d.get("shift", {}))
        d["shape"] = tuple(d["shape"])
        if "spacing" in d:
            d["spacing"] = tuple(d["spacing"])
        return cls(**d)


def _bias_field(shape, rng: np.random.Generator) -> np.ndarray:
    """Smooth field in [-1, 1]: random low-order polynomial in normalized coordinates."""
    axes = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in shape], indexing="ij")
    coef = rng.uniform(-1.0, 1.0, size=7)
    z, y, x = axes
    field_ = coef[0] * x + coef[1] * y + coef[2] * z + coef[3] * x * y + coef[4] * x**2 + coef[5] * y**2 + coef[6] * z * x
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def apply_domain_shift(v: Volume, shift: DomainShift, seed, mask: SegMask | None = None) -> Volume:
    """``clamp(gamma(clamp(v*fg + bias + noise)))``.

    With a mask only the foreground voxels are scaled by ``fg_intensity``
    (lowering foreground contrast); without one the whole volume is scaled.
    """
    x = v.voxels.astype(np.float64)
    rng = np.random.default_rng(seed)
    if shift.fg_intensity != 1.0:
        if mask is None:
            x = x * shift.fg_intensity
        else:
            x = np.where(mask.labels == 1, x * shift.fg_intensity, x)
    if shift.bias_field_amp > 0:
        x = x + shift.bias_field_amp * _bias_field(x.shape, rng)
    if shift.noise_sigma > 0:
        x = x + rng.normal(0.0, shift.noise_sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    if shift.contrast_gamma != 1.0:
        x = np.clip(x**shift.contrast_gamma, 0.0, 1.0)
    return Volume(x.astype(np.float32), v.spacing)


def _render_case(shape, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    d, h, w = shape
    texture = gaussian_filter(rng.normal(size=shape), sigma=1.5)
    texture /= max(np.abs(texture).max(), 1e-12)
    image = BACKGROUND_LEVEL + BACKGROUND_SPREAD * texture
    mask = np.zeros(shape, bool)
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    n_blobs = int(rng.integers(1, 3))
    for _ in range(n_blobs):
        radii = np.array([rng.uniform(0.15, 0.3) * n for n in shape])
        radii = np.maximum(radii, 1.0)
        center = np.array([rng.uniform(0.3, 0.7) * (n - 1) for n in shape])
        dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
        blob = dist <= 1.0
        blob[tuple(np.round(center).astype(int))] = True
        mask |= blob
    image = np.where(mask, FOREGROUND_LEVEL + 0.05 * texture, image)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def generate_case(spec: TaskSpec, index: int) -> Case:
    rng = np.random.default_rng([spec.seed, index, 0])
    image, labels = _render_case(spec.shape, rng)
    mask = SegMask(labels)
    volume = apply_domain_shift(Volume(image, spec.spacing), spec.shift, [spec.seed, index, 1], mask)
    return Case(f"{spec.name}_{index:03d}", volume, mask)


def generate_task(spec: TaskSpec) -> TaskDataset:
    if min(spec.shape) < 8:
        raise ShapeTooSmall(f"task {spec.name}: every dim must be >= 8, got {spec.shape}")
    return TaskDataset(spec.name, tuple(generate_case(spec, i) for i in range(spec.n_cases)))


# Typical hippocampus-crop resolutions at 1/4 scale, with shift severity increasing along
# the sequence: the last task has low, polarity-reversed foreground contrast.
DEFAULT_SHIFTS = {
    "synthA": DomainShift(),
    "synthB": DomainShift(noise_sigma=0.03, bias_field_amp=0.1, contrast_gamma=1.3, fg_intensity=0.6),
    "synthC": DomainShift(noise_sigma=0.05, bias_field_amp=0.15, contrast_gamma=0.8, fg_intensity=0.2),
}
DEFAULT_SHAPES = {"synthA": (12, 16, 16), "synthB": (12, 16, 16), "synthC": (9, 13, 9)}
DEFAULT_CASES = {"synthA": 20, "synthB": 10, "synthC": 20}


def default_task_specs(seed: int = 0, n_cases: dict | None = None) -> list[TaskSpec]:
    n_cases = {**DEFAULT_CASES, **(n_cases or {})}
    return [
        TaskSpec(name, n_cases[name], DEFAULT_SHAPES[name], DEFAULT_SHIFTS[name], seed=seed * 1000 + i)
        for i, name in enumerate(DEFAULT_SHAPES)
    ]


def write_task(ds: TaskDataset, directory) -> Path:
    """Write every case of ``ds`` plus a ``task.json`` manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in ds.cases:
        header = write_volume(directory / case.id, case.volume, case.mask)
        entries.append({"id": case.id, "image": header.name})
    manifest = directory / "task.json"
    manifest.write_text(json.dumps({"name": ds.name, "cases": entries}, indent=1) + "\n")
    return manifest


def load_task(manifest) -> TaskDataset:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "task.json"
    meta = json.loads(manifest.read_text())
    cases = []
    for entry in meta["cases"]:
        volume, mask = load_volume(manifest.parent / entry["image"])
        if mask is None:
            raise ValueError(f"case {entry['id']} in {manifest} has no mask")
        cases.append(Case(entry["id"], volume, mask))
    return TaskDataset(meta["name"], tuple(cases))
