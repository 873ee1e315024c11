"""Experiment configuration: one JSON file per experiment, leaves overridable by dotted path."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .arch import ArchConfig, VARIANTS
from .datamodel import _read_header
from .errors import ConfigInvalid, ContsegError
from .strategies import StrategyConfig
from .synthdata import TaskSpec, default_task_specs, generate_task, load_task
from .trainer import FREEZABLE, FreezeSpec, TrainConfig, model_input_hw

OUTPUT_ROOT_ENV = "CONTSEG_OUTPUT_ROOT"

# Desk-scale profile used by the default config: small enough to train three
# tasks in well under a minute on one CPU core.
DESK_ARCH = dict(variant="vit-v2", levels=4, base_channels=8, vit_depth=2, vit_heads=4, vit_dim=32, patch_size=4)


@dataclass
class ExperimentConfig:
    arch: ArchConfig
    strategy: StrategyConfig
    train: TrainConfig
    freeze: FreezeSpec
    tasks: list = field(default_factory=list)  # TaskSpec or manifest path (str)
    output_dir: str = "runs/default"
    seed: int = 0
    base_dir: str = "."

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "strategy": self.strategy.to_dict(),
            "train": self.train.to_dict(),
            "freeze": self.freeze.to_dict(),
            "tasks": [
                t.to_dict() if isinstance(t, TaskSpec) else {"manifest": str((Path(self.base_dir) / t).resolve())}
                for t in self.tasks
            ],
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def load_tasks(self):
        out = []
        for t in self.tasks:
            if isinstance(t, TaskSpec):
                out.append(generate_task(t))
            else:
                out.append(load_task(Path(self.base_dir) / t))
        return out

    def task_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        for t in self.tasks:
            if isinstance(t, TaskSpec):
                shapes.append(t.shape)
            else:
                manifest = Path(self.base_dir) / t
                if manifest.is_dir():
                    manifest = manifest / "task.json"
                meta = json.loads(manifest.read_text())
                for entry in meta["cases"]:
                    stem = (manifest.parent / entry["image"]).with_suffix("")
                    shapes.append(tuple(_read_header(stem)["shape"]))
        return shapes


def default_config_dict(seed: int = 0) -> dict:
    return {
        "arch": dict(DESK_ARCH),
        "strategy": {"kind": "sequential"},
        "train": {"epochs_per_task": 20, "batch_size": 8, "learning_rate": 1e-3, "optimizer": "adam"},
        "freeze": {"groups": [], "activate_after_task": 1},
        "tasks": "default",
        "seed": seed,
    }


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``path.to.leaf=value`` overrides (values parsed as JSON when possible)."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigInvalid([(item, "override must look like path.to.key=value")])
        path, value = item.split("=", 1)
        keys = path.split(".")
        node = raw
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = parse_value(value)
    return raw


def _check_keys(section: str, data, cls, problems, aliases=()) -> dict:
    if not isinstance(data, dict):
        problems.append((section, "must be an object"))
        return {}
    allowed = {f.name for f in fields(cls)} | set(aliases)
    for k in data:
        if k not in allowed:
            problems.append((f"{section}.{k}", "unknown field"))
    return {k: v for k, v in data.items() if k in allowed}


def _type_problems(section: str, data: dict, cls, problems) -> None:
    for f in fields(cls):
        key = "lambda" if f.name == "lam" and "lambda" in data else f.name
        if key not in data:
            continue
        v = data[key]
        want = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if want == "bool" and not isinstance(v, bool):
            problems.append((f"{section}.{key}", "must be a boolean"))
        elif want == "int" and (isinstance(v, bool) or not isinstance(v, int)):
            problems.append((f"{section}.{key}", "must be an integer"))
        elif want == "float" and (isinstance(v, bool) or not isinstance(v, (int, float))):
            problems.append((f"{section}.{key}", "must be a number"))
        elif want == "str" and not isinstance(v, str):
            problems.append((f"{section}.{key}", "must be a string"))


def build_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Validate ``raw`` and build an ExperimentConfig; every problem is reported at once."""
    problems: list[tuple[str, str]] = []
    for k in raw:
        if k not in ("arch", "strategy", "train", "freeze", "tasks", "output_dir", "seed", "data_seed"):
            problems.append((k, "unknown field"))
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        problems.append(("seed", "must be an integer"))
        seed = 0

    arch_raw = _check_keys("arch", raw.get("arch", {}), ArchConfig, problems)
    _type_problems("arch", arch_raw, ArchConfig, problems)
    arch = None
    if arch_raw.get("variant", "vit-v2") not in VARIANTS:
        problems.append(("arch.variant", f"must be one of {VARIANTS}"))
    else:
        try:
            arch = ArchConfig(**arch_raw)
        except (ValueError, TypeError, ContsegError) as exc:
            problems.append(("arch", str(exc)))

    strat_raw = _check_keys("strategy", raw.get("strategy", {}), StrategyConfig, problems, aliases=("lambda",))
    _type_problems("strategy", strat_raw, StrategyConfig, problems)
    strategy = None
    try:
        strategy = StrategyConfig.from_dict(strat_raw)
    except ConfigInvalid as exc:
        problems.extend((f"strategy.{k}", m) for k, m in exc.problems)
    except TypeError as exc:
        problems.append(("strategy", str(exc)))

    train_raw = _check_keys("train", raw.get("train", {}), TrainConfig, problems)
    _type_problems("train", train_raw, TrainConfig, problems)
    train = None
    try:
        train = TrainConfig(**{**train_raw, "seed": seed})
        problems.extend((f"train.{k}", m) for k, m in train.problems())
    except TypeError as exc:
        problems.append(("train", str(exc)))

    freeze_raw = _check_keys("freeze", raw.get("freeze", {}), FreezeSpec, problems)
    groups = freeze_raw.get("groups", [])
    freeze = None
    if not isinstance(groups, list):
        problems.append(("freeze.groups", "must be a list"))
    else:
        bad = [g for g in groups if g not in FREEZABLE]
        if bad:
            problems.append(("freeze.groups", f"unknown group(s) {bad}; expected a subset of {list(FREEZABLE)}"))
        else:
            freeze = FreezeSpec(tuple(groups), freeze_raw.get("activate_after_task", 1))

    tasks = []
    tasks_raw = raw.get("tasks", "default")
    if tasks_raw == "default":
        tasks = default_task_specs(raw.get("data_seed", 0))
    elif not isinstance(tasks_raw, list) or not tasks_raw:
        problems.append(("tasks", "must be 'default' or a non-empty list"))
    else:
        names = []
        for i, t in enumerate(tasks_raw):
            path = f"tasks[{i}]"
            if isinstance(t, str):
                tasks.append(t)
            elif isinstance(t, dict) and "manifest" in t:
                tasks.append(t["manifest"])
            elif isinstance(t, dict):
                try:
                    spec = TaskSpec.from_dict(t)
                    if min(spec.shape) < 8:
                        problems.append((f"{path}.shape", "every dim must be >= 8"))
                    names.append(spec.name)
                    tasks.append(spec)
                except (TypeError, ValueError, KeyError) as exc:
                    problems.append((path, str(exc)))
            else:
                problems.append((path, "must be a manifest path or a task spec object"))
        if len(set(names)) != len(names):
            problems.append(("tasks", "task names must be unique"))

    output_dir = raw.get("output_dir")
    if output_dir is None:
        output_dir = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "default")
    elif not isinstance(output_dir, str):
        problems.append(("output_dir", "must be a string"))

    cfg = None
    if not problems:
        cfg = ExperimentConfig(arch, strategy, train, freeze, tasks, output_dir, seed, str(base_dir))
        # cross-field: the padded input must admit the ViT token grid
        try:
            hw = model_input_hw(cfg.task_shapes(), arch)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            problems.append(("tasks", f"cannot read task shapes: {exc}"))
            hw = None
        if hw is not None and arch.has_vit:
            tokens = (hw[0] // arch.patch_size) * (hw[1] // arch.patch_size)
            if arch.lsa and tokens < 2:
                problems.append(("arch.patch_size", f"LSA needs at least two tokens, input {hw} gives {tokens}"))
            if arch.variant == "vit-v2" and arch.levels < 3:
                problems.append(("arch.levels", "vit-v2 needs levels >= 3"))
        if freeze is not None and freeze.groups and "vit" in freeze.groups and not arch.has_vit:
            problems.append(("freeze.groups", "plain-unet has no vit group"))
    if problems:
        raise ConfigInvalid(problems)
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    if path is None:
        raw, base = default_config_dict(), Path(".")
    else:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid([("$", f"cannot read {path}: {exc}")]) from exc
        base = path.parent
    return build_config(apply_overrides(raw, overrides), base)
