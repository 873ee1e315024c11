"""
Synthetic segmentation tasks with controlled domain shift
=========================================================

Three phantom tasks stand in for a sequence of MRI datasets from different
sites. Each task is a set of small 3D volumes with one or two bright
ellipsoids (the structure to segment); the tasks differ by noise, a smooth
bias field, a gamma contrast change and the foreground intensity.
"""
import tempfile
from pathlib import Path

import numpy as np

from contseg.datamodel import load_volume, slice_volume, split_dataset
from contseg.synthdata import DomainShift, TaskSpec, apply_domain_shift, default_task_specs, generate_task, load_task, write_task

# The default sequence: shapes are a quarter of typical hippocampus crops.
specs = default_task_specs(seed=0)
for spec in specs:
    print(f"{spec.name}: {spec.n_cases} cases of {spec.shape}, shift {spec.shift}")

tasks = [generate_task(s) for s in specs]

# Foreground and background statistics show the shift between tasks; the
# last task reverses the contrast polarity (darker structure than background).
for ds in tasks:
    fg = np.concatenate([c.volume.voxels[c.mask.labels == 1] for c in ds.cases])
    bg = np.concatenate([c.volume.voxels[c.mask.labels == 0] for c in ds.cases])
    print(f"{ds.name}: foreground {fg.mean():.2f} +- {fg.std():.2f}, background {bg.mean():.2f} +- {bg.std():.2f}")

# Domain shifts are plain functions and can be applied to any volume.
v = tasks[0].cases[0].volume
shifted = apply_domain_shift(v, DomainShift(noise_sigma=0.05, contrast_gamma=2.0), seed=1)
print("mean intensity before/after gamma 2:", round(float(v.voxels.mean()), 3), round(float(shifted.voxels.mean()), 3))

# Generation is a pure function of the spec: regenerating gives identical bytes.
again = generate_task(specs[0])
print("byte-identical regeneration:", again.cases[3].volume.voxels.tobytes() == tasks[0].cases[3].volume.voxels.tobytes())

# 80:20 case-level split, deterministic in the seed.
train, test = split_dataset(tasks[0], 0.8, seed=0)
print(f"{tasks[0].name}: {len(train)} train / {len(test)} test cases")

# Slices are the training unit: one 2D image per axial slice, min-max normalized per volume.
batch = slice_volume(train.cases[0])
print("slice batch:", batch.images.shape, batch.masks.shape, batch.provenance[:2])

# On disk a volume is a JSON header plus a raw little-endian float32 payload;
# a task directory holds the volumes and a task.json manifest.
with tempfile.TemporaryDirectory() as tmp:
    manifest = write_task(tasks[1], Path(tmp) / "synthB")
    print("files:", sorted(p.name for p in manifest.parent.iterdir())[:5], "...")
    volume, mask = load_volume(manifest.parent / f"{tasks[1].cases[0].id}.json")
    print("reloaded", volume.shape, "mask voxels", int(mask.labels.sum()))
    print("task round trip:", len(load_task(manifest)), "cases")

# A custom task is just another spec.
custom = generate_task(TaskSpec("noisy", 2, (8, 24, 24), DomainShift(noise_sigma=0.2), seed=5))
print(custom.name, custom.cases[0].volume.shape)
