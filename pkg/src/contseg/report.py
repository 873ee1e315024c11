"""Hyperparameter grids, best-setting selection, radar data and the ablation table."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .arch import ArchConfig
from .errors import IncompleteGrid, UndefinedMetric
from .metrics import normalize_for_plot
from .strategies import StrategyConfig
from .trainer import ExperimentRecord, FreezeSpec, TrainConfig, derive_seed, run_sequence, split_tasks
from .datamodel import split_dataset


@dataclass(frozen=True)
class GridSpec:
    method: str
    tuned_param: str
    values: tuple[float, ...]
    fixed: dict = field(default_factory=dict)
    tuning_epochs: int = 10

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError("a grid needs at least one value")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["values"] = list(self.values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


# Fixed and tuned settings per method; the desk-scale tuning budget replaces
# the full-scale 125 epochs per task.
TUNING_GRIDS = {
    "ewc": GridSpec("ewc", "lambda", (0.01, 0.20, 0.50)),
    "rwalk": GridSpec("rwalk", "lambda", (0.80, 2.10, 3.30), {"alpha": 0.9, "update_interval": 10}),
    "mib": GridSpec("mib", "lambda", (0.10, 1.00, 2.50), {"alpha": 0.9}),
    "pod": GridSpec("pod", "lambda", (0.01, 0.10, 0.20), {"scales": 3}),
    "plop": GridSpec("plop", "lambda", (0.01, 0.10, 0.20), {"scales": 3}),
}


def grid_strategy(spec: GridSpec, value, base: StrategyConfig | None = None) -> StrategyConfig:
    d = (base or StrategyConfig()).to_dict()
    d.update(spec.fixed)
    d["kind"] = spec.method
    d[spec.tuned_param] = value
    return StrategyConfig.from_dict(d)


def tuning_splits(tasks, ratio: float, seed: int):
    """Inner (train, validation) pairs carved out of each task's training split."""
    outer = split_tasks(list(tasks), ratio, seed)
    return [split_dataset(train, ratio, derive_seed(seed, "inner-split", train.name)) for train, _ in outer]


def _run_cell(args):
    pairs, arch, strategy, train = args
    return run_sequence(pairs, arch, strategy, train, presplit=True, baselines=False)


def run_grid(
    spec: GridSpec,
    tasks,
    arch: ArchConfig,
    train: TrainConfig,
    base_strategy: StrategyConfig | None = None,
    jobs: int = 1,
) -> list[tuple[dict, ExperimentRecord]]:
    """One tuning run per grid value on an inner 80:20 split of every task's training data."""
    pairs = tuning_splits(tasks, train.split_ratio, train.seed)
    cells = []
    for value in spec.values:
        strategy = grid_strategy(spec, value, base_strategy)
        cell_train = replace(train, epochs_per_task=spec.tuning_epochs, seed=derive_seed(train.seed, spec.method, value))
        cells.append((strategy, (pairs, arch, strategy, cell_train)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_cell, [c[1] for c in cells]))
    else:
        records = [_run_cell(c[1]) for c in cells]
    return [(s.to_dict(), r) for (s, _), r in zip(cells, records)]


def selection_score(record: ExperimentRecord) -> tuple[float, float]:
    """(mean Dice over every intermediate checkpoint and task, mean per-cell sigma)."""
    return float(np.mean(record.dice)), float(np.mean(record.dice_std))


def best_index(records) -> int:
    """Highest mean Dice; ties go to the lowest sigma. Records are ``ExperimentRecord`` or (params, record)."""
    if not records:
        raise ValueError("select_best needs at least one record")
    recs = [r[1] if isinstance(r, tuple) else r for r in records]
    keys = []
    for k, r in enumerate(recs):
        mean, sigma = selection_score(r)
        params = json.dumps(records[k][0], sort_keys=True) if isinstance(records[k], tuple) else ""
        keys.append((-mean, sigma, params, k))
    return min(keys)[3]


def select_best(records):
    """Parameters (or record, when given bare records) of the best grid cell."""
    k = best_index(records)
    return records[k][0] if isinstance(records[k], tuple) else records[k]


# ------------------------------------------------------------------ radar


@dataclass
class RadarData:
    dice_mean: float
    dice_first: float
    dice_last: float
    bwt: float
    fwt: float

    def to_dict(self) -> dict:
        return asdict(self)


def emit_radar(record: ExperimentRecord) -> RadarData:
    s = record.summary
    if s.get("mean_bwt") is None or s.get("mean_fwt") is None:
        raise UndefinedMetric("radar data needs defined mean BWT and FWT (at least two tasks and baselines)")
    return RadarData(
        dice_mean=s["dice_mean"],
        dice_first=s["dice_first"],
        dice_last=s["dice_last"],
        bwt=normalize_for_plot(s["mean_bwt"]),
        fwt=normalize_for_plot(s["mean_fwt"]),
    )


def render_radar(radars: dict[str, RadarData]) -> str:
    head = f"{'run':<24}{'dice_mean':>10}{'dice_first':>11}{'dice_last':>10}{'BWT+1':>8}{'FWT+1':>8}"
    lines = [head]
    for name, r in radars.items():
        lines.append(f"{name:<24}{r.dice_mean:>10.3f}{r.dice_first:>11.3f}{r.dice_last:>10.3f}{r.bwt:>8.3f}{r.fwt:>8.3f}")
    return "\n".join(lines)


# --------------------------------------------------------------- ablation

ABLATION_VARIANTS = ("vit-v1", "vit-v2")
ABLATION_MODS = ("none", "spt", "lsa", "spt+lsa")


def ablation_arch(base: ArchConfig, variant: str, mod: str) -> ArchConfig:
    return replace(base, variant=variant, spt="spt" in mod, lsa="lsa" in mod)


def emit_ablation_table(records: dict) -> list[dict]:
    """Final-checkpoint Dice mean/sigma per task for every (variant, modification) cell.

    ``records`` maps ``(variant, mod)`` to an ExperimentRecord. Each row carries
    a ``best`` list flagging the column maxima.
    """
    missing = [(v, m) for v in ABLATION_VARIANTS for m in ABLATION_MODS if (v, m) not in records]
    if missing:
        raise IncompleteGrid(f"ablation grid is missing {missing}")
    rows = []
    for v in ABLATION_VARIANTS:
        for m in ABLATION_MODS:
            r = records[(v, m)]
            rows.append({
                "variant": v,
                "mod": m,
                "tasks": list(r.task_names),
                "mean": list(r.dice[-1]),
                "std": list(r.dice_std[-1]),
            })
    n_tasks = len(rows[0]["mean"])
    for j in range(n_tasks):
        col = [row["mean"][j] for row in rows]
        top = int(np.argmax(col))
        for k, row in enumerate(rows):
            row.setdefault("best", [False] * n_tasks)[j] = k == top
    return rows


def write_ablation_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    tasks = rows[0]["tasks"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "mod"] + [f"{t}_{k}" for t in tasks for k in ("mean", "std", "best")])
        for row in rows:
            cells = []
            for j in range(len(tasks)):
                cells += [repr(row["mean"][j]), repr(row["std"][j]), int(row["best"][j])]
            w.writerow([row["variant"], row["mod"]] + cells)
    return path
