"""Continual-learning harness for 2D segmentation with a ViT U-Net.

Modules: ``datamodel`` (volumes, slicing, splits), ``synthdata`` (phantom
tasks), ``arch`` (U-Net / ViT U-Net), ``strategies`` (CL methods),
``trainer`` (sequential protocol), ``metrics`` (Dice, BWT, FWT),
``report`` (grids, radar, ablation) and ``cli``.
"""

__version__ = "0.1.0"
