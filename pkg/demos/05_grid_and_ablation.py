"""
Hyperparameter grids and the ViT ablation table
===============================================

Each method is tuned over three values on an inner 80:20 split of the
training data; the setting with the highest mean Dice over all intermediate
models wins, ties going to the lowest standard deviation. The ablation table
crosses the two fusion variants with shifted patch tokens and locality
self-attention. Tasks and epochs are tiny here so the demo finishes quickly.
"""
from dataclasses import replace

from contseg import report as rp
from contseg.arch import ArchConfig
from contseg.strategies import StrategyConfig
from contseg.synthdata import DomainShift, TaskSpec, generate_task
from contseg.trainer import TrainConfig, run_sequence

tasks = [
    generate_task(TaskSpec("a", 10, (8, 16, 16), seed=1)),
    generate_task(TaskSpec("b", 10, (8, 16, 16), DomainShift(noise_sigma=0.05, contrast_gamma=1.5), seed=2)),
]
arch = ArchConfig(variant="vit-v2", levels=3, base_channels=4, vit_depth=1, vit_heads=2, vit_dim=16, patch_size=4)
train = TrainConfig(epochs_per_task=6, batch_size=8)

spec = replace(rp.TUNING_GRIDS["ewc"], tuning_epochs=6)
cells = rp.run_grid(spec, tasks, arch, train)
for params, record in cells:
    mean, sigma = rp.selection_score(record)
    print(f"lambda={params['lambda']:<5} mean Dice {mean:.3f}  sigma {sigma:.3f}")
print("selected:", rp.select_best(cells)["lambda"])

records = {}
for variant in rp.ABLATION_VARIANTS:
    for mod in rp.ABLATION_MODS:
        records[(variant, mod)] = run_sequence(tasks, rp.ablation_arch(arch, variant, mod), StrategyConfig(), train, baselines=False)
print(f"\n{'variant':<8}{'mod':<9}" + "".join(f"{t:>14}" for t in records[("vit-v1", "none")].task_names))
for row in rp.emit_ablation_table(records):
    cells_txt = "".join(
        f"{m:>8.3f}+-{s:.2f}{'*' if best else ' '}" for m, s, best in zip(row["mean"], row["std"], row["best"])
    )
    print(f"{row['variant']:<8}{row['mod']:<9}{cells_txt}")
