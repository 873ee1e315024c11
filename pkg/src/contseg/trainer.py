"""Sequential training over a task sequence, with freezing and single-task baselines."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import strategies as st
from .arch import ArchConfig, SegNet, build_model, group_of, load_checkpoint, save_checkpoint
from .datamodel import PRNG_NAME, TaskDataset, slice_dataset, slice_volume, pad_batch, split_dataset
from .errors import NonFiniteLoss, UnknownGroup
from .metrics import DiceMatrix, MetricSummary, dice, summarize, write_dice_csv, write_summary
from .tensorio import write_tensors

log = logging.getLogger(__name__)

FREEZABLE = ("unet.encoder", "unet.decoder", "unet.other", "vit")


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.99
    seed: int = 0
    split_ratio: float = 0.8

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.epochs_per_task < 0:
            out.append(("epochs_per_task", "must be >= 0"))
        if self.batch_size < 1:
            out.append(("batch_size", "must be >= 1"))
        if not self.learning_rate > 0:
            out.append(("learning_rate", "must be > 0"))
        if self.optimizer not in ("adam", "sgd-momentum"):
            out.append(("optimizer", "must be 'adam' or 'sgd-momentum'"))
        if not 0 < self.split_ratio < 1:
            out.append(("split_ratio", "must be in (0, 1)"))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FreezeSpec:
    groups: tuple[str, ...] = ()
    activate_after_task: int = 1

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        unknown = [g for g in self.groups if g not in FREEZABLE]
        if unknown:
            raise UnknownGroup(f"unknown parameter group(s) {unknown}; expected a subset of {FREEZABLE}")

    def active(self, task_index: int) -> bool:
        return bool(self.groups) and task_index > self.activate_after_task

    def to_dict(self) -> dict:
        return {"groups": list(self.groups), "activate_after_task": self.activate_after_task}


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary JSON-able parts."""
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def apply_freeze(grads: dict, freeze: FreezeSpec, task_index: int) -> dict:
    """Zero the gradients of frozen groups once freezing is active for ``task_index`` (1-based)."""
    if not freeze.active(task_index):
        return dict(grads)
    out = {}
    for name, g in grads.items():
        if g is not None and group_of(name) in freeze.groups:
            g = torch.zeros_like(g)
        out[name] = g
    return out


def frozen_names(model: SegNet, freeze: FreezeSpec, task_index: int) -> set[str]:
    if not freeze.active(task_index):
        return set()
    present = {group_of(n) for n, _ in model.named_parameters()}
    missing = [g for g in freeze.groups if g not in present]
    if missing:
        raise UnknownGroup(f"model has no parameters in group(s) {missing}")
    return {n for n, _ in model.named_parameters() if group_of(n) in freeze.groups}


def _optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, nesterov=True)


def _tensors(batch):
    return torch.from_numpy(batch.images), torch.from_numpy(batch.masks.astype(np.int64))


def train_task(
    model: SegNet,
    state: st.StrategyState,
    dataset: TaskDataset,
    task_index: int,
    strategy: st.StrategyConfig,
    cfg: TrainConfig,
    freeze: FreezeSpec = FreezeSpec(),
    seed: int | None = None,
) -> tuple[SegNet, st.StrategyState]:
    """Train ``model`` in place on one task's training cases, then update the strategy state."""
    seed = cfg.seed if seed is None else seed
    data = dataset
    if strategy.kind == "rehearsal" and state.replay_memory:
        data = st.rehearsal_mix(dataset, state.replay_memory, strategy.replay_fraction, derive_seed(seed, "replay", task_index))
    images, masks = _tensors(slice_dataset(data, model.input_hw))
    n = images.shape[0]
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "shuffle", task_index)))
    frozen = frozen_names(model, freeze, task_index)
    params = dict(model.named_parameters())
    opt = _optimizer(model, cfg)
    prev = state.prev_model if st.needs_previous_model(strategy) else None
    model.train()
    for epoch in range(cfg.epochs_per_task):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            x, y = images[idx], masks[idx]
            trace = model.trace(x)
            prev_trace = None
            if prev is not None:
                with torch.no_grad():
                    prev_trace = prev.trace(x)
            targets = st.training_targets(strategy, y, prev_trace)
            seg = st.seg_loss(trace.logits, targets)
            loss = st.total_loss(seg, strategy, model, state, trace, prev_trace)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"task {task_index} ({dataset.name}) epoch {epoch} batch {start // cfg.batch_size}: "
                    f"loss={loss.item()} seg={seg.item()} strategy={strategy.kind}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            for name in frozen:
                params[name].grad = None  # skipped by the optimizer, state untouched
            if strategy.kind == "rwalk":
                grads = {k: p.grad.detach().clone() for k, p in params.items() if p.grad is not None}
                before = {k: params[k].detach().clone() for k in grads}
                opt.step()
                deltas = {k: params[k].detach() - before[k] for k in grads}
                st.rwalk_step(state, grads, deltas, state.step, strategy.alpha, strategy.update_interval, strategy.xi)
            else:
                opt.step()
    model.eval()
    _end_task(model, state, dataset, strategy)
    return model, state


def _end_task(model, state: st.StrategyState, dataset: TaskDataset, strategy: st.StrategyConfig) -> None:
    kind = strategy.kind
    if kind == "ewc":
        batch = slice_dataset(dataset, model.input_hw)
        images, masks = _tensors(batch)
        samples = ((images[i : i + 1], masks[i : i + 1]) for i in range(images.shape[0]))
        # one sample per slice; summed so the importance scales with the task's data
        state.fishers.append(st.compute_fisher(model, samples, st.slice_nll, reduction="sum"))
        state.anchors.append(st.snapshot(model))
    elif kind == "rwalk":
        st.rwalk_end_task(state, model)
    elif kind == "rehearsal":
        state.replay_memory.append((dataset.name, dataset))
    if st.needs_previous_model(strategy):
        state.prev_model = st.freeze_copy(model)


# -------------------------------------------------------------- evaluation


def predict_case(model: SegNet, case, batch_size: int = 64) -> np.ndarray:
    batch = slice_volume(case)
    h, w = batch.images.shape[2:]
    padded = pad_batch(batch, model.input_hw)
    x = torch.from_numpy(padded.images).to(next(model.parameters()).dtype)
    preds = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            preds.append(model(x[start : start + batch_size]).argmax(dim=1))
    return torch.cat(preds).numpy()[:, :h, :w].astype(np.uint8)


def evaluate(model: SegNet, dataset: TaskDataset) -> list[float]:
    """Per-case 3D Dice of ``model`` on every case of ``dataset``."""
    return [dice(predict_case(model, c), c.mask.labels) for c in dataset.cases]


def model_input_hw(shapes, cfg: ArchConfig) -> tuple[int, int]:
    """Smallest input size covering every slice that the architecture accepts."""
    mult = 2 ** (cfg.levels - 1)
    if cfg.has_vit:
        mult = math.lcm(mult, cfg.patch_size)
    h = max(s[1] for s in shapes)
    w = max(s[2] for s in shapes)
    return (-(-h // mult) * mult, -(-w // mult) * mult)


# ------------------------------------------------------------------ record


@dataclass
class ExperimentRecord:
    config: dict
    task_names: list[str]
    splits: dict
    dice: list[list[float]]
    dice_std: list[list[float]]
    per_case: list[list[list[float]]]
    baseline_dice: list[float] | None
    baseline_std: list[float] | None
    summary: dict
    checkpoints: list[str] = field(default_factory=list)
    baseline_checkpoints: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    wall_clock_s: float | None = None

    @property
    def matrix(self) -> DiceMatrix:
        return DiceMatrix(np.array(self.dice), np.array(self.dice_std), list(self.task_names))

    @property
    def metric_summary(self) -> MetricSummary:
        return MetricSummary.from_dict(self.summary)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _baseline_key(arch: ArchConfig, cfg: TrainConfig, input_hw, seed, index, train: TaskDataset, test: TaskDataset) -> str:
    return json.dumps(
        [arch.to_dict(), cfg.to_dict(), list(input_hw), seed, index, train.name,
         [c.id for c in train.cases], [c.id for c in test.cases]],
        sort_keys=True,
    )


def _save_state(path, state: st.StrategyState, strategy: st.StrategyConfig) -> None:
    tensors = {}
    for k, (a, f) in enumerate(zip(state.anchors, state.fishers)):
        tensors.update({f"anchor.{k}.{n}": t for n, t in a.items()})
        tensors.update({f"fisher.{k}.{n}": t for n, t in f.items()})
    if strategy.kind == "rwalk" and state.anchors:
        tensors.update({f"anchor.0.{n}": t for n, t in state.anchors[-1].items()})
        tensors.update({f"online_fisher.{n}": t for n, t in state.online_fisher.items()})
        tensors.update({f"rwalk_scores.{n}": t for n, t in state.rwalk_scores.items()})
    meta = {
        "kind": "strategy_state",
        "strategy": strategy.to_dict(),
        "step": state.step,
        "replay_memory": [[name, [c.id for c in ds.cases]] for name, ds in state.replay_memory],
    }
    write_tensors(path, tensors, meta)


def split_tasks(tasks: list[TaskDataset], ratio: float, seed: int) -> list[tuple[TaskDataset, TaskDataset]]:
    return [split_dataset(t, ratio, derive_seed(seed, "split", t.name)) for t in tasks]


def run_sequence(
    tasks,
    arch: ArchConfig,
    strategy: st.StrategyConfig,
    cfg: TrainConfig,
    freeze: FreezeSpec = FreezeSpec(),
    out_dir=None,
    baselines: bool = True,
    baseline_cache: dict | None = None,
    presplit: bool = False,
    extra_config: dict | None = None,
) -> ExperimentRecord:
    """Train on ``tasks`` in order, evaluating every checkpoint on every task's test split.

    ``tasks`` is a list of TaskDataset (split here, 80:20 by default) or, with
    ``presplit=True``, a list of ``(train, test)`` pairs. With ``baselines``,
    one single-task model per task is trained from the same initialization
    for forward transfer; ``baseline_cache`` lets runs that share seeds and
    architecture reuse them.
    """
    t0 = time.perf_counter()
    seed = cfg.seed
    pairs = list(tasks) if presplit else split_tasks(list(tasks), cfg.split_ratio, seed)
    if not pairs:
        raise ValueError("run_sequence needs at least one task")
    names = [tr.name for tr, _ in pairs]
    shapes = [c.volume.shape for tr, te in pairs for c in (*tr.cases, *te.cases)]
    input_hw = model_input_hw(shapes, arch)
    init_seed = derive_seed(seed, "init")
    out = Path(out_dir) if out_dir is not None else None

    model = build_model(arch, input_hw, init_seed)
    state = st.StrategyState()
    n = len(pairs)
    values = np.zeros((n, n))
    stds = np.zeros((n, n))
    per_case = []
    checkpoints = []
    for i, (train, _) in enumerate(pairs, start=1):
        log.info("task %d/%d (%s): %d training cases", i, n, train.name, len(train))
        train_task(model, state, train, i, strategy, cfg, freeze, seed=derive_seed(seed, "task", i))
        row = [evaluate(model, test) for _, test in pairs]
        per_case.append(row)
        values[i - 1] = [np.mean(r) for r in row]
        stds[i - 1] = [np.std(r) for r in row]
        if out is not None:
            ckpt = save_checkpoint(out / f"task_{i}" / "model.ckpt", model, init_seed, {"task_index": i, "tasks": names[:i]})
            if strategy.kind in ("ewc", "rwalk"):
                _save_state(out / f"task_{i}" / "strategy.ckpt", state, strategy)
            checkpoints.append(str(ckpt.relative_to(out)))

    base_mean = base_std = None
    base_ckpts = []
    if baselines:
        base_mean, base_std = [], []
        plain = st.StrategyConfig("sequential")
        for i, (train, test) in enumerate(pairs, start=1):
            key = _baseline_key(arch, cfg, input_hw, seed, i, train, test)
            cached = baseline_cache.get(key) if baseline_cache is not None else None
            if cached is None:
                bmodel = build_model(arch, input_hw, init_seed)
                train_task(bmodel, st.StrategyState(), train, i, plain, cfg, seed=derive_seed(seed, "task", i))
                scores = evaluate(bmodel, test)
                cached = ({k: v.clone() for k, v in bmodel.state_dict().items()}, scores)
                if baseline_cache is not None:
                    baseline_cache[key] = cached
            weights, scores = cached
            base_mean.append(float(np.mean(scores)))
            base_std.append(float(np.std(scores)))
            if out is not None:
                bmodel = build_model(arch, input_hw, init_seed)
                bmodel.load_state_dict(weights)
                ckpt = save_checkpoint(out / f"baseline_{i}" / "model.ckpt", bmodel, init_seed, {"task_index": i, "tasks": [names[i - 1]]})
                base_ckpts.append(str(ckpt.relative_to(out)))

    matrix = DiceMatrix(values, stds, names)
    summary = summarize(matrix, base_mean)
    record = ExperimentRecord(
        config={
            "arch": arch.to_dict(),
            "strategy": strategy.to_dict(),
            "train": cfg.to_dict(),
            "freeze": freeze.to_dict(),
            **(extra_config or {}),
        },
        task_names=names,
        splits={tr.name: {"train": [c.id for c in tr.cases], "test": [c.id for c in te.cases]} for tr, te in pairs},
        dice=values.tolist(),
        dice_std=stds.tolist(),
        per_case=per_case,
        baseline_dice=base_mean,
        baseline_std=base_std,
        summary=summary.to_dict(),
        checkpoints=checkpoints,
        baseline_checkpoints=base_ckpts,
        provenance={
            "prng": PRNG_NAME,
            "seed_derivation": "sha256(json(parts))[:8] little-endian >> 1",
            "seed": seed,
            "init_seed": init_seed,
            "input_hw": list(input_hw),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        wall_clock_s=time.perf_counter() - t0,
    )
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        record.save(out / "record.json")
        write_dice_csv(out / "dice_matrix.csv", matrix)
        write_summary(out / "summary.json", summary)
    return record


def reevaluate(run_dir, pairs) -> tuple[DiceMatrix, list[float] | None]:
    """Reload every stored checkpoint of a run and rebuild its Dice matrix and baselines."""
    run_dir = Path(run_dir)
    record = ExperimentRecord.load(run_dir / "record.json")
    n = len(record.checkpoints)
    values = np.zeros((n, n))
    stds = np.zeros((n, n))
    for i, rel in enumerate(record.checkpoints):
        model, _ = load_checkpoint(run_dir / rel)
        for j, (_, test) in enumerate(pairs):
            scores = evaluate(model, test)
            values[i, j] = np.mean(scores)
            stds[i, j] = np.std(scores)
    baselines = None
    if record.baseline_checkpoints:
        baselines = []
        for i, rel in enumerate(record.baseline_checkpoints):
            model, _ = load_checkpoint(run_dir / rel)
            baselines.append(float(np.mean(evaluate(model, pairs[i][1]))))
    return DiceMatrix(values, stds, record.task_names), baselines
