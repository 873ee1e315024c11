"""
Transfer metrics and attention heat maps
========================================

The Dice matrix holds the Dice of every intermediate model on every task.
Backward transfer compares the final model with the model right after each
task; forward transfer compares a model that has not seen a task yet with a
model trained on that task alone.
"""
import tempfile
from pathlib import Path

import numpy as np

from contseg.arch import ArchConfig, build_model
from contseg.errors import UndefinedMetric
from contseg.metrics import DiceMatrix, bwt, dice, extract_attention, fwt, read_pgm, summarize, write_pgm
from contseg.synthdata import default_task_specs, generate_task

a = np.zeros((4, 4), bool)
a[0] = True
b = np.zeros((4, 4), bool)
b[0, :2] = True
print("Dice of a 4-pixel and a 2-pixel mask sharing 2 pixels:", dice(a, b))

values = np.array([
    [0.95, 0.30, 0.10],
    [0.60, 0.90, 0.20],
    [0.40, 0.70, 0.85],
])
baselines = [0.95, 0.92, 0.80]
m = DiceMatrix(values, None, ["A", "B", "C"])
print("BWT per task:", [round(bwt(m, i), 3) for i in (1, 2)])
print("FWT per task:", [round(fwt(m, baselines, i), 3) for i in (2, 3)])
try:
    bwt(m, 3)
except UndefinedMetric as exc:
    print("undefined:", exc)
print(summarize(m, baselines))

# Attention received per patch, from the last layer's last head.
cfg = ArchConfig(variant="vit-v2", levels=4, base_channels=8, vit_depth=2, vit_heads=4, vit_dim=32, patch_size=4)
model = build_model(cfg, (16, 16), seed=0)
case = generate_task(default_task_specs(0)[0]).cases[0]
amap = extract_attention(model, case.volume.voxels[6])
print(f"attention map layer {amap.layer} head {amap.head}, shape {amap.grid.shape}, range [{amap.grid.min():.2f}, {amap.grid.max():.2f}]")
with tempfile.TemporaryDirectory() as tmp:
    pixels = read_pgm(write_pgm(Path(tmp) / "attention.pgm", amap.grid))
    print("PGM pixels:", pixels.shape, pixels.dtype)
