"""Static 2D U-Net, the ViT block (optionally SPT/LSA) and the ViT U-Net.

Parameter names are dotted and partitioned into four groups by prefix:
``unet.encoder``, ``unet.decoder``, ``unet.other`` and ``vit``. Everything the
ViT path adds (fusion, tokenizer, transformer, re-injection) lives under
``vit``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadInputShape, DimMismatch, IncompatiblePatchSize
from .tensorio import read_tensors, write_tensors

VARIANTS = ("plain-unet", "vit-v1", "vit-v2")
GROUPS = ("unet.encoder", "unet.decoder", "unet.other", "vit")


@dataclass(frozen=True)
class ArchConfig:
    variant: str = "vit-v2"
    spt: bool = False
    lsa: bool = False
    levels: int = 4
    base_channels: int = 16
    vit_depth: int = 4
    vit_heads: int = 4
    vit_dim: int = 64
    patch_size: int = 8
    mlp_ratio: int = 2
    zero_init_injection: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.vit_dim % self.vit_heads:
            raise DimMismatch(f"vit_dim {self.vit_dim} not divisible by vit_heads {self.vit_heads}")

    @property
    def has_vit(self) -> bool:
        return self.variant != "plain-unet"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


# Mirrors the base ViT (12 layers, 12 heads, width 768); not used in tests.
BASE_VIT = dict(vit_depth=12, vit_heads=12, vit_dim=768, patch_size=8)


@dataclass
class ForwardTrace:
    logits: torch.Tensor
    skips: list[torch.Tensor]
    bottleneck: torch.Tensor
    vit_tokens: torch.Tensor | None = None
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer: [N, heads, T, T]

    @property
    def feature_maps(self) -> list[torch.Tensor]:
        """Maps used for spatial distillation: every skip plus the bottleneck."""
        return [*self.skips, self.bottleneck]


# ---------------------------------------------------------------------- U-Net


class ConvBlock(nn.Module):
    """conv3x3 - instance norm - leaky ReLU, twice."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm1 = nn.InstanceNorm2d(cout, affine=True)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm2 = nn.InstanceNorm2d(cout, affine=True)

    def forward(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        return F.leaky_relu(self.norm2(self.conv2(x)), 0.01)


class DecoderStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, 2)
        self.block = ConvBlock(2 * cout, cout)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class UNet(nn.Module):
    def __init__(self, levels: int, base: int, in_channels: int = 1, n_classes: int = 2):
        super().__init__()
        chans = [base * 2**i for i in range(levels)]
        self.levels = levels
        self.encoder = nn.ModuleList(
            [ConvBlock(in_channels, chans[0])]
            + [ConvBlock(chans[i - 1], chans[i], stride=2) for i in range(1, levels)]
        )
        # decoder[l] produces the level-l resolution from level l+1
        self.decoder = nn.ModuleList([DecoderStage(chans[i + 1], chans[i]) for i in range(levels - 1)])
        self.other = nn.ModuleDict({"head": nn.Conv2d(chans[0], n_classes, 1)})

    def encode(self, x) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats = []
        for block in self.encoder:
            x = block(x)
            feats.append(x)
        return feats[:-1], feats[-1]

    def decode(self, bottleneck, skips):
        x = bottleneck
        for level in reversed(range(self.levels - 1)):
            x = self.decoder[level](x, skips[level])
        return self.other["head"](x)


def check_input(x: torch.Tensor, levels: int) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise BadInputShape(f"expected [N,1,H,W] input, got {tuple(x.shape)}")
    factor = 2 ** (levels - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise BadInputShape(f"input {tuple(x.shape[2:])} not divisible by 2^(levels-1) = {factor}")


# ------------------------------------------------------------------ ViT parts


def fuse_v1(skips: list[torch.Tensor]) -> torch.Tensor:
    if not skips:
        raise BadInputShape("fuse_v1 needs at least one skip")
    return skips[0]


def fuse_v2(skips: list[torch.Tensor], fusion: nn.ModuleList) -> torch.Tensor:
    """First skip + last skip brought up to first-skip shape by stride-2 transposed convs."""
    if len(skips) < 2:
        raise BadInputShape("fuse_v2 needs at least two skip levels")
    x = skips[-1]
    for up in fusion:
        x = up(x)
    if x.shape != skips[0].shape:
        raise BadInputShape(f"upsampled last skip {tuple(x.shape)} != first skip {tuple(skips[0].shape)}")
    return skips[0] + x


def _shift(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Translate a [N,C,H,W] map by (dy, dx) pixels, zero-filling the vacated border."""
    h, w = x.shape[-2:]
    padded = F.pad(x, (max(dx, 0), max(-dx, 0), max(dy, 0), max(-dy, 0)))
    top = max(-dy, 0)
    left = max(-dx, 0)
    return padded[..., top : top + h, left : left + w]


def patch_vectors(fmap: torch.Tensor, patch: int, spt: bool) -> torch.Tensor:
    """Flattened patches [N, T, C'*patch*patch], C' = 5C with shifted patch tokenization."""
    n, c, h, w = fmap.shape
    if patch < 1 or h % patch or w % patch:
        raise IncompatiblePatchSize(f"patch {patch} does not divide feature map {h}x{w}")
    if spt:
        s = max(patch // 2, 1)
        fmap = torch.cat(
            [fmap] + [_shift(fmap, dy, dx) for dy, dx in ((s, s), (s, -s), (-s, s), (-s, -s))], dim=1
        )
    cols = F.unfold(fmap, kernel_size=patch, stride=patch)  # [N, C'*p*p, T]
    return cols.transpose(1, 2)


class PatchEmbed(nn.Module):
    def __init__(self, channels: int, patch: int, dim: int, n_tokens: int, spt: bool):
        super().__init__()
        self.patch = patch
        self.spt = spt
        in_features = (5 if spt else 1) * channels * patch * patch
        self.norm = nn.LayerNorm(in_features) if spt else None
        self.proj = nn.Linear(in_features, dim)
        self.pos = nn.Parameter(torch.randn(n_tokens, dim) * 0.02)

    def forward(self, fmap):
        return patch_tokenize(fmap, self.patch, self.spt, self)


def patch_tokenize(fmap: torch.Tensor, patch: int, spt: bool, embed: PatchEmbed) -> torch.Tensor:
    vecs = patch_vectors(fmap, patch, spt)
    if embed.norm is not None:
        vecs = embed.norm(vecs)
    tokens = embed.proj(vecs)
    if tokens.shape[1] != embed.pos.shape[0]:
        raise IncompatiblePatchSize(f"{tokens.shape[1]} tokens, positional table has {embed.pos.shape[0]}")
    return tokens + embed.pos


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, lsa: bool):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.lsa = lsa
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if lsa:
            self.temperature = nn.Parameter(torch.tensor(math.sqrt(self.head_dim)))

    def forward(self, x):
        n, t, d = x.shape
        q, k, v = self.qkv(x).reshape(n, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        temp = self.temperature if self.lsa else math.sqrt(self.head_dim)
        logits = q @ k.transpose(-1, -2) / temp
        if self.lsa:
            eye = torch.eye(t, dtype=torch.bool, device=x.device)
            logits = logits.masked_fill(eye, float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.proj(out), attn


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, lsa: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, lsa)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn


class ViTEncoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int, lsa: bool):
        super().__init__()
        self.dim = dim
        self.lsa = lsa
        self.blocks = nn.ModuleList([TransformerBlock(dim, heads, mlp_ratio, lsa) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)


def vit_forward(tokens: torch.Tensor, encoder: ViTEncoder) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Pre-norm transformer; returns output tokens and per-layer attention [N,heads,T,T]."""
    if tokens.shape[-1] != encoder.dim:
        raise DimMismatch(f"token dim {tokens.shape[-1]} != ViT dim {encoder.dim}")
    attentions = []
    x = tokens
    for block in encoder.blocks:
        x, attn = block(x)
        attentions.append(attn)
    return encoder.norm(x), attentions


class ViTPath(nn.Module):
    """Fusion -> tokenizer -> transformer -> projection onto the bottleneck."""

    def __init__(self, cfg: ArchConfig, input_hw: tuple[int, int]):
        super().__init__()
        h, w = input_hw
        chans = [cfg.base_channels * 2**i for i in range(cfg.levels)]
        self.variant = cfg.variant
        self.patch = cfg.patch_size
        self.grid = (h // cfg.patch_size, w // cfg.patch_size)
        self.bottleneck_hw = (h // 2 ** (cfg.levels - 1), w // 2 ** (cfg.levels - 1))
        if cfg.variant == "vit-v2":
            # last skip sits at level L-2; one stride-2 stage per level back to 0
            self.fusion = nn.ModuleList(
                [nn.ConvTranspose2d(chans[i], chans[i - 1], 2, 2) for i in range(cfg.levels - 2, 0, -1)]
            )
        n_tokens = self.grid[0] * self.grid[1]
        self.embed = PatchEmbed(chans[0], cfg.patch_size, cfg.vit_dim, n_tokens, cfg.spt)
        self.encoder = ViTEncoder(cfg.vit_dim, cfg.vit_depth, cfg.vit_heads, cfg.mlp_ratio, cfg.lsa)
        self.inject = nn.Conv2d(cfg.vit_dim, chans[-1], 1)
        if cfg.zero_init_injection:
            nn.init.zeros_(self.inject.weight)
            nn.init.zeros_(self.inject.bias)

    def fuse(self, skips):
        return fuse_v2(skips, self.fusion) if self.variant == "vit-v2" else fuse_v1(skips)

    def to_bottleneck(self, tokens: torch.Tensor) -> torch.Tensor:
        n, t, d = tokens.shape
        grid = tokens.transpose(1, 2).reshape(n, d, *self.grid)
        gh, gw = self.grid
        bh, bw = self.bottleneck_hw
        if gh % bh == 0 and gw % bw == 0:
            grid = F.adaptive_avg_pool2d(grid, self.bottleneck_hw)
        else:
            grid = F.interpolate(grid, size=self.bottleneck_hw, mode="bilinear", align_corners=False)
        return self.inject(grid)


class SegNet(nn.Module):
    def __init__(self, cfg: ArchConfig, input_hw: tuple[int, int]):
        super().__init__()
        self.cfg = cfg
        self.input_hw = tuple(input_hw)
        self.unet = UNet(cfg.levels, cfg.base_channels)
        self.vit = ViTPath(cfg, self.input_hw) if cfg.has_vit else None

    def trace(self, x: torch.Tensor) -> ForwardTrace:
        if self.vit is None:
            return unet_forward(self, x)
        return vit_unet_forward(self, x)

    def forward(self, x):
        return self.trace(x).logits


def unet_forward(model: SegNet, x: torch.Tensor) -> ForwardTrace:
    check_input(x, model.unet.levels)
    skips, bottleneck = model.unet.encode(x)
    return ForwardTrace(model.unet.decode(bottleneck, skips), skips, bottleneck)


def vit_unet_forward(model: SegNet, x: torch.Tensor) -> ForwardTrace:
    if model.vit is None:
        raise ValueError("vit_unet_forward needs a vit-v1 or vit-v2 model")
    check_input(x, model.unet.levels)
    if tuple(x.shape[2:]) != model.input_hw:
        raise BadInputShape(f"input {tuple(x.shape[2:])} != model input {model.input_hw}")
    skips, bottleneck = model.unet.encode(x)
    vit = model.vit
    tokens = patch_tokenize(vit.fuse(skips), vit.patch, vit.embed.spt, vit.embed)
    tokens, attention = vit_forward(tokens, vit.encoder)
    injected = bottleneck + vit.to_bottleneck(tokens)
    logits = model.unet.decode(injected, skips)
    return ForwardTrace(logits, skips, injected, tokens, attention)


# ------------------------------------------------------------- param store


def group_of(name: str) -> str:
    for g in GROUPS:
        if name == g or name.startswith(g + "."):
            return g
    raise KeyError(f"parameter {name!r} belongs to no group")


def param_groups(model: nn.Module) -> dict[str, list[str]]:
    groups = {g: [] for g in GROUPS}
    for name, _ in model.named_parameters():
        groups[group_of(name)].append(name)
    return groups


def build_model(cfg: ArchConfig, input_hw: tuple[int, int], seed: int) -> SegNet:
    h, w = input_hw
    factor = 2 ** (cfg.levels - 1)
    if h % factor or w % factor:
        raise BadInputShape(f"input {h}x{w} not divisible by 2^(levels-1) = {factor}")
    if cfg.has_vit and (h % cfg.patch_size or w % cfg.patch_size):
        raise IncompatiblePatchSize(f"patch {cfg.patch_size} does not divide first skip {h}x{w}")
    if cfg.variant == "vit-v2" and cfg.levels < 3:
        raise BadInputShape("vit-v2 needs at least two skip levels (levels >= 3)")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegNet(cfg, input_hw)


def save_checkpoint(path, model: SegNet, seed: int, extra: dict | None = None) -> Path:
    tensors = dict(model.named_parameters())
    meta = {
        "kind": "model",
        "config": model.cfg.to_dict(),
        "input_hw": list(model.input_hw),
        "seed": seed,
        **(extra or {}),
    }
    return write_tensors(path, tensors, meta, {n: group_of(n) for n in tensors})


def load_checkpoint(path) -> tuple[SegNet, dict]:
    manifest, tensors = read_tensors(path)
    model = SegNet(ArchConfig.from_dict(manifest["config"]), tuple(manifest["input_hw"]))
    missing = set(dict(model.named_parameters())) ^ set(tensors)
    if missing:
        raise ValueError(f"{path}: parameter names differ from the model: {sorted(missing)}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[name])
    return model, manifest
