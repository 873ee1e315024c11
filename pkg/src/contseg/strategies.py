"""Continual-learning strategies as loss, penalty and data hooks.

Supported kinds: sequential, rehearsal, ewc, rwalk, mib, pod, plop. EWC and
RWalk penalties can be restricted to one part of the network through
``StrategyConfig.target`` (``all``, ``unet`` or ``vit``).
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import Case, TaskDataset
from .errors import ConfigInvalid, EmptyDataset, NoAnchor, NoPreviousModel, ShapeMismatch

KINDS = ("sequential", "rehearsal", "ewc", "rwalk", "mib", "pod", "plop")
TARGETS = ("all", "unet", "vit")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "sequential"
    lam: float = 0.0
    alpha: float = 0.9
    update_interval: int = 10
    scales: int = 3
    replay_fraction: float = 0.25
    target: str = "all"
    tau: float = 0.8
    xi: float = 1e-3

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigInvalid(problems)

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.kind not in KINDS:
            out.append(("kind", f"must be one of {KINDS}"))
        if not self.lam >= 0:
            out.append(("lambda", "must be >= 0"))
        if not 0 <= self.alpha <= 1:
            out.append(("alpha", "must be in [0, 1]"))
        if self.update_interval < 1:
            out.append(("update_interval", "must be >= 1"))
        if self.scales < 1:
            out.append(("scales", "must be >= 1"))
        if not 0 <= self.replay_fraction <= 1:
            out.append(("replay_fraction", "must be in [0, 1]"))
        if self.target not in TARGETS:
            out.append(("target", f"must be one of {TARGETS}"))
        if not 0 <= self.tau <= 1:
            out.append(("tau", "must be in [0, 1]"))
        if not self.xi > 0:
            out.append(("xi", "must be > 0"))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class StrategyState:
    anchors: list[dict[str, torch.Tensor]] = field(default_factory=list)
    fishers: list[dict[str, torch.Tensor]] = field(default_factory=list)
    # RWalk: online Fisher, accumulated path scores of the current task and
    # the folded scores used by the penalty
    online_fisher: dict[str, torch.Tensor] = field(default_factory=dict)
    path_scores: dict[str, torch.Tensor] = field(default_factory=dict)
    rwalk_scores: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    replay_memory: list[tuple[str, TaskDataset]] = field(default_factory=list)
    prev_model: nn.Module | None = None


def in_target(name: str, target: str) -> bool:
    if target == "all":
        return True
    return name.startswith(target + ".")


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def freeze_copy(model: nn.Module) -> nn.Module:
    prev = copy.deepcopy(model)
    prev.eval()
    for p in prev.parameters():
        p.requires_grad_(False)
    return prev


# ------------------------------------------------------------------ losses


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - soft Dice of the foreground class, pooled over the whole batch."""
    fg = logits.softmax(dim=1)[:, 1]
    target = labels.to(fg.dtype)
    inter = (fg * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (fg.sum() + target.sum() + smooth)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels.long())


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of soft-Dice loss and pixel cross-entropy."""
    return 0.5 * (soft_dice_loss(logits, labels) + cross_entropy(logits, labels))


# ------------------------------------------------------------- rehearsal


def rehearsal_mix(
    current: TaskDataset,
    memory: list[tuple[str, TaskDataset]],
    fraction: float,
    seed: int,
) -> TaskDataset:
    """Current cases plus ``floor(fraction * |T|)`` cases drawn without replacement from each previous task T."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    cases: list[Case] = list(current.cases)
    for k, (name, ds) in enumerate(memory):
        n = math.floor(fraction * len(ds) + 1e-9)
        if n == 0:
            continue
        rng = np.random.Generator(np.random.PCG64([seed, k]))
        picks = np.sort(rng.choice(len(ds), size=n, replace=False))
        cases.extend(Case(f"{name}/{ds.cases[i].id}", ds.cases[i].volume, ds.cases[i].mask) for i in picks)
    return TaskDataset(current.name, tuple(cases))


# ------------------------------------------------------------------ EWC


def compute_fisher(model: nn.Module, samples, loss_fn, reduction: str = "mean") -> dict[str, torch.Tensor]:
    """Empirical diagonal Fisher: mean over samples of the squared loss gradient.

    ``samples`` yields ``(x, y)`` pairs; ``loss_fn(model, x, y)`` returns a scalar.
    ``reduction="sum"`` returns the task-level Fisher (mean times sample count).
    """
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    fisher = {n: torch.zeros_like(p) for n, p in params}
    count = 0
    for x, y in samples:
        grads = torch.autograd.grad(loss_fn(model, x, y), [p for _, p in params], allow_unused=True)
        for (n, _), g in zip(params, grads):
            if g is not None:
                fisher[n] += g.detach() ** 2
        count += 1
    if count == 0:
        raise EmptyDataset("compute_fisher needs at least one sample")
    if reduction == "sum":
        return fisher
    return {n: f / count for n, f in fisher.items()}


def slice_nll(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood of whole slices: pixel cross-entropy summed, not averaged."""
    return F.cross_entropy(model(x), y.long(), reduction="sum")


def _weighted_drift(model, anchor, weight, target) -> torch.Tensor:
    total = None
    for name, p in model.named_parameters():
        if name not in anchor or not in_target(name, target):
            continue
        term = (weight[name] * (p - anchor[name]) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        p0 = next(model.parameters())
        return p0.new_zeros(())
    return total


def ewc_penalty(model: nn.Module, state: StrategyState, lam: float, target: str = "all") -> torch.Tensor:
    """``lam * sum_tasks sum_k F_k (theta_k - theta*_k)^2`` over parameters in ``target``."""
    if not state.anchors or len(state.anchors) != len(state.fishers):
        raise NoAnchor("EWC penalty needs at least one anchor/Fisher pair")
    total = sum(_weighted_drift(model, a, f, target) for a, f in zip(state.anchors, state.fishers))
    return lam * total


# ---------------------------------------------------------------- RWalk


def rwalk_step(
    state: StrategyState,
    grads: dict[str, torch.Tensor],
    deltas: dict[str, torch.Tensor],
    step: int,
    alpha: float,
    update_interval: int,
    xi: float = 1e-3,
) -> StrategyState:
    """Online Fisher EMA every ``update_interval`` steps plus path-score accumulation."""
    if step % update_interval == 0:
        for name, g in grads.items():
            prev = state.online_fisher.get(name)
            prev = torch.zeros_like(g) if prev is None else prev
            state.online_fisher[name] = alpha * prev + (1 - alpha) * g.detach() ** 2
    for name, g in grads.items():
        delta = deltas[name]
        f = state.online_fisher.get(name, torch.zeros_like(g))
        gain = torch.clamp(-g.detach() * delta, min=0.0)
        score = gain / (0.5 * f * delta**2 + xi)
        prev = state.path_scores.get(name)
        state.path_scores[name] = score if prev is None else prev + score
    state.step = step + 1
    return state


def rwalk_end_task(state: StrategyState, model: nn.Module) -> StrategyState:
    """Fold this task's path scores into the penalty weights (average with the previous scores) and reset."""
    for name, s in state.path_scores.items():
        prev = state.rwalk_scores.get(name)
        state.rwalk_scores[name] = s.clone() if prev is None else 0.5 * (prev + s)
    state.path_scores = {}
    state.anchors = [snapshot(model)]
    return state


def rwalk_penalty(model: nn.Module, state: StrategyState, lam: float, target: str = "all") -> torch.Tensor:
    """``lam * sum_k (F_k + s_k)(theta_k - theta*_k)^2`` around the latest anchor."""
    if not state.anchors:
        raise NoAnchor("RWalk penalty needs an anchor")
    anchor = state.anchors[-1]
    weight = {}
    for name, a in anchor.items():
        f = state.online_fisher.get(name, torch.zeros_like(a))
        s = state.rwalk_scores.get(name, torch.zeros_like(a))
        weight[name] = f + s
    return lam * _weighted_drift(model, anchor, weight, target)


# ---------------------------------------------------------- distillation


def mib_distillation(logits: torch.Tensor, prev_logits: torch.Tensor, alpha: float) -> torch.Tensor:
    """Pixel-mean KL from the mixed soft target ``alpha*p_prev + (1-alpha)*p_cur`` to ``p_cur``."""
    if logits.shape != prev_logits.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs previous {tuple(prev_logits.shape)}")
    log_p = logits.log_softmax(dim=1)
    target = alpha * prev_logits.softmax(dim=1) + (1 - alpha) * log_p.exp()
    kl = (target * (torch.log(target.clamp_min(1e-12)) - log_p)).sum(dim=1)
    return kl.mean()


def mib_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    prev_logits: torch.Tensor | None,
    alpha: float,
    lam: float,
) -> torch.Tensor:
    """Cross-entropy plus ``lam`` times the distillation term (zero without a previous model).

    With a single foreground class and no new classes, the background-aware
    cross-entropy and distillation reduce to their standard forms.
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    ce = cross_entropy(logits, labels)
    if prev_logits is None:
        return ce
    return ce + lam * mib_distillation(logits, prev_logits, alpha)


def pod_embedding(fmap: torch.Tensor, scale: int) -> torch.Tensor:
    """Width- then height-pooled channel means for each of the 2^(s-1) x 2^(s-1) regions; [N, E]."""
    n_h = min(2 ** (scale - 1), fmap.shape[2])
    n_w = min(2 ** (scale - 1), fmap.shape[3])
    parts = []
    for rows in torch.tensor_split(fmap, n_h, dim=2):
        for region in torch.tensor_split(rows, n_w, dim=3):
            parts.append(region.mean(dim=3).flatten(1))  # width-pooled: one value per row
            parts.append(region.mean(dim=2).flatten(1))  # height-pooled: one value per column
    return torch.cat(parts, dim=1)


def pod_loss(cur_maps, prev_maps, scales: int, lam: float) -> torch.Tensor:
    """``lam`` times the mean, over maps and scales, of the mean squared embedding difference."""
    if prev_maps is None:
        raise NoPreviousModel("POD needs feature maps from a previous model")
    if len(cur_maps) != len(prev_maps):
        raise ShapeMismatch(f"{len(cur_maps)} current maps vs {len(prev_maps)} previous maps")
    terms = []
    for cur, prev in zip(cur_maps, prev_maps):
        if cur.shape != prev.shape:
            raise ShapeMismatch(f"feature map {tuple(cur.shape)} vs {tuple(prev.shape)}")
        for s in range(1, scales + 1):
            diff = pod_embedding(cur, s) - pod_embedding(prev, s)
            terms.append((diff**2).mean())
    return lam * torch.stack(terms).mean()


def plop_pseudo_labels(labels: torch.Tensor, prev_logits: torch.Tensor | None, tau: float) -> torch.Tensor:
    """Background pixels whose previous-model foreground probability exceeds ``tau`` become foreground."""
    if prev_logits is None:
        raise NoPreviousModel("pseudo-labelling needs the previous model's logits")
    fg_prob = prev_logits.softmax(dim=1)[:, 1]
    relabel = (labels == 0) & (fg_prob > tau)
    return torch.where(relabel, torch.ones_like(labels), labels)


# ------------------------------------------------------------ composition


def needs_previous_model(cfg: StrategyConfig) -> bool:
    return cfg.kind in ("mib", "pod", "plop")


def training_targets(cfg: StrategyConfig, labels, prev_trace):
    """Labels the segmentation loss is computed against (pseudo-labelled for PLOP)."""
    if cfg.kind == "plop" and prev_trace is not None:
        return plop_pseudo_labels(labels, prev_trace.logits, cfg.tau)
    return labels


def total_loss(seg: torch.Tensor, cfg: StrategyConfig, model: nn.Module, state: StrategyState, trace=None, prev_trace=None):
    """Segmentation loss plus the strategy's penalty or distillation term.

    ``trace``/``prev_trace`` are the current and frozen-previous forward traces;
    they are only consulted by the distillation strategies.
    """
    kind = cfg.kind
    if kind in ("sequential", "rehearsal") or cfg.lam == 0:
        return seg
    if kind == "ewc":
        return seg + ewc_penalty(model, state, cfg.lam, cfg.target) if state.anchors else seg
    if kind == "rwalk":
        return seg + rwalk_penalty(model, state, cfg.lam, cfg.target) if state.anchors else seg
    if prev_trace is None:
        return seg
    if kind == "mib":
        return seg + cfg.lam * mib_distillation(trace.logits, prev_trace.logits, cfg.alpha)
    # pod and plop share the spatial distillation term
    return seg + pod_loss(trace.feature_maps, prev_trace.feature_maps, cfg.scales, cfg.lam)
