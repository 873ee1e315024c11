"""
A U-Net with a vision transformer at the bottleneck
===================================================

The encoder's skip connections feed a ViT path: either the first skip alone
(V1) or the first skip plus the last skip brought back up by transposed
convolutions (V2). The fused map is cut into patches, run through a small
transformer and projected onto the U-Net bottleneck as a residual.
"""
import torch

from contseg.arch import ArchConfig, build_model, param_groups, patch_vectors

cfg = ArchConfig(variant="vit-v2", levels=4, base_channels=16, vit_depth=2, vit_heads=4, vit_dim=64, patch_size=8)
model = build_model(cfg, (64, 64), seed=0)

trace = model.trace(torch.rand(2, 1, 64, 64))
print("logits", tuple(trace.logits.shape))
for level, skip in enumerate(trace.skips):
    print(f"skip {level}: {tuple(skip.shape[1:])}")
print("bottleneck", tuple(trace.bottleneck.shape[1:]))
print("tokens", tuple(trace.vit_tokens.shape), "attention per layer", tuple(trace.attention[0].shape))

# Parameters are grouped by name, which is what freezing and targeted
# regularization operate on.
for group, names in param_groups(model).items():
    count = sum(p.numel() for n, p in model.named_parameters() if n in names)
    print(f"{group:>13}: {len(names):3d} tensors, {count:7d} parameters")

# The re-injection into the bottleneck starts at zero, so a fresh ViT U-Net
# computes exactly what its U-Net alone computes.
plain = build_model(ArchConfig(variant="plain-unet", levels=4, base_channels=16), (64, 64), seed=1)
plain.unet.load_state_dict(model.unet.state_dict())
x = torch.rand(1, 1, 64, 64)
print("max |ViT U-Net - U-Net| at init:", (model(x) - plain(x)).abs().max().item())

# Shifted patch tokenization stacks four diagonally shifted copies with the map.
fmap = torch.rand(1, 32, 64, 64)
print("patch vector length without/with SPT:", patch_vectors(fmap, 8, False).shape[-1], patch_vectors(fmap, 8, True).shape[-1])

# Locality self-attention: a learnable temperature and no attention to oneself.
lsa = build_model(ArchConfig(variant="vit-v1", levels=3, base_channels=8, vit_depth=1, vit_heads=2, vit_dim=32, patch_size=4, lsa=True), (16, 16), 0)
attn = lsa.trace(torch.rand(1, 1, 16, 16)).attention[0]
print("LSA temperature", lsa.vit.encoder.blocks[0].attn.temperature.item(), "diagonal max", attn.diagonal(dim1=-2, dim2=-1).max().item())
