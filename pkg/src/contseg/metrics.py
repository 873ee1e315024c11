"""Dice, backward/forward transfer, run summaries and attention heat maps.

Task and checkpoint indices in the public functions are 1-based, matching
the usual ``M_[T1..Ti]`` notation: ``values[i-1][j-1]`` is the Dice of the
checkpoint trained on tasks 1..i evaluated on task j.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NoViTComponent, OutOfRange, ShapeMismatch, UndefinedMetric


def dice(pred, gt, empty: float = 1.0) -> float:
    """Sorensen-Dice of two binary masks; two empty masks score ``empty``."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return empty
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass
class DiceMatrix:
    values: np.ndarray  # [n, n]
    std: np.ndarray  # [n, n]
    task_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.std = np.zeros_like(self.values) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatch(f"Dice matrix must be square, got {self.values.shape}")
        if self.std.shape != self.values.shape:
            raise ShapeMismatch("std matrix shape differs from values")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def bwt(matrix: DiceMatrix, i: int) -> float:
    """Final-checkpoint Dice on task i minus the Dice right after training task i."""
    n = matrix.n
    if not 1 <= i <= n - 1:
        raise UndefinedMetric(f"BWT is defined for tasks 1..{n - 1}, got {i}")
    v = matrix.values
    return float(v[n - 1, i - 1] - v[i - 1, i - 1])


def fwt(matrix: DiceMatrix, baselines, i: int) -> float:
    """Dice on task i before training it minus the single-task baseline on i."""
    n = matrix.n
    if not 2 <= i <= n:
        raise UndefinedMetric(f"FWT is defined for tasks 2..{n}, got {i}")
    return float(matrix.values[i - 2, i - 1] - baselines[i - 1])


@dataclass
class MetricSummary:
    dice_mean: float
    dice_first: float
    dice_last: float
    bwt: list[float]
    fwt: list[float]
    mean_bwt: float | None
    mean_fwt: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSummary":
        return cls(**d)


def summarize(matrix: DiceMatrix, baselines=None) -> MetricSummary:
    n = matrix.n
    final = matrix.values[n - 1]
    bwts = [bwt(matrix, i) for i in range(1, n)]
    fwts = [fwt(matrix, baselines, i) for i in range(2, n + 1)] if baselines is not None else []
    return MetricSummary(
        dice_mean=float(np.mean(final)),
        dice_first=float(final[0]),
        dice_last=float(final[-1]),
        bwt=bwts,
        fwt=fwts,
        mean_bwt=float(np.mean(bwts)) if bwts else None,
        mean_fwt=float(np.mean(fwts)) if fwts else None,
    )


def normalize_for_plot(v: float) -> float:
    """Shift a transfer value from [-1, 1] onto [0, 2] for radar plots."""
    if not -1.0 <= v <= 1.0:
        raise OutOfRange(f"{v} is outside [-1, 1]")
    return v + 1.0


# ----------------------------------------------------------------- export


def write_dice_csv(path, matrix: DiceMatrix) -> Path:
    path = Path(path)
    names = matrix.task_names or [f"task_{j + 1}" for j in range(matrix.n)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint"] + [f"{t}_{k}" for t in names for k in ("mean", "std")])
        for i in range(matrix.n):
            row = [f"M_{i + 1}"]
            for j in range(matrix.n):
                row += [repr(float(matrix.values[i, j])), repr(float(matrix.std[i, j]))]
            w.writerow(row)
    return path


def read_dice_csv(path) -> DiceMatrix:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    names = [h[: -len("_mean")] for h in header[1::2]]
    values = np.array([[float(x) for x in r[1::2]] for r in body])
    std = np.array([[float(x) for x in r[2::2]] for r in body])
    return DiceMatrix(values, std, names)


def write_summary(path, summary: MetricSummary) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


# -------------------------------------------------------------- attention


@dataclass
class AttentionMap:
    layer: int
    head: int
    grid: np.ndarray  # [H, W] in [0, 1]


def extract_attention(model, image, layer: int | None = None, head: int | None = None) -> AttentionMap:
    """Attention received per token for one head, as a heat map over the slice.

    ``image`` is a single [H, W] slice (zero-padded to the model input when
    smaller). Defaults to the last layer and its last head. Layer/head indices
    are 0-based.
    """
    if getattr(model, "vit", None) is None:
        raise NoViTComponent("model has no ViT component")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    th, tw = model.input_hw
    padded = np.zeros((th, tw), np.float32)
    padded[:h, :w] = img
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        trace = model.trace(torch.from_numpy(padded)[None, None].to(dtype))
    attn = trace.attention
    layer = len(attn) - 1 if layer is None else layer
    if not 0 <= layer < len(attn):
        raise IndexError(f"layer {layer} out of range 0..{len(attn) - 1}")
    heads = attn[layer].shape[1]
    head = heads - 1 if head is None else head
    if not 0 <= head < heads:
        raise IndexError(f"head {head} out of range 0..{heads - 1}")
    received = attn[layer][0, head].mean(dim=0)  # column mean
    gh, gw = model.vit.grid
    grid = received.reshape(1, 1, gh, gw).to(torch.float64)
    up = F.interpolate(grid, size=(th, tw), mode="bilinear", align_corners=False)[0, 0].numpy()
    up = up[:h, :w]
    lo, hi = up.min(), up.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1.0):
        norm = np.full_like(up, 0.5)
    else:
        norm = (up - lo) / (hi - lo)
    return AttentionMap(layer, head, norm)


def write_pgm(path, grid: np.ndarray) -> Path:
    """Binary 8-bit PGM (P5) of a min-max scaled 2D array."""
    path = Path(path)
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
