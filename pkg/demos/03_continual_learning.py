"""
Forgetting and how strategies counter it
========================================

Train one model through the three synthetic tasks with plain sequential
fine-tuning, with rehearsal of earlier cases and with EWC, then compare the
Dice matrices and transfer metrics. Epochs are reduced so the demo runs in a
minute; the acceptance suite uses the full 20 epochs per task.
"""
from dataclasses import replace

import numpy as np

from contseg import report as rp
from contseg.config import build_config, default_config_dict
from contseg.strategies import StrategyConfig
from contseg.trainer import FreezeSpec, run_sequence

cfg = build_config(default_config_dict(seed=0))
tasks = cfg.load_tasks()
train = replace(cfg.train, epochs_per_task=8)
cache = {}  # single-task baselines are shared between runs with the same seeds

strategies = {
    "sequential": StrategyConfig("sequential"),
    "rehearsal": StrategyConfig("rehearsal", replay_fraction=0.25),
    "ewc": StrategyConfig("ewc", lam=0.5),
}
records = {}
for name, strategy in strategies.items():
    records[name] = run_sequence(tasks, cfg.arch, strategy, train, baseline_cache=cache)
    print(f"\n{name}: Dice matrix (row = after task i, column = test task)")
    print(np.array2string(np.array(records[name].dice), precision=3))

print("\nsingle-task baselines:", np.round(records["sequential"].baseline_dice, 3))
for name, record in records.items():
    s = record.summary
    print(f"{name:>10}: mean BWT {s['mean_bwt']:+.3f}  mean FWT {s['mean_fwt']:+.3f}  last-model Dice {s['dice_mean']:.3f}")

# Freezing: train the ViT only on the first task, then keep it fixed.
frozen = run_sequence(tasks, cfg.arch, StrategyConfig("sequential"), train, FreezeSpec(("vit",)), baseline_cache=cache)
records["sequential, ViT frozen"] = frozen

print()
print(rp.render_radar({name: rp.emit_radar(r) for name, r in records.items()}))
