"""Frozen vision-transformer feature extractor.

An input image is cut into non-overlapping 14x14 patches, each linearly
embedded, a learned class token is prepended, positional embeddings are
added, and the sequence runs through pre-norm transformer blocks. The
class token is dropped at the end and the patch tokens are reshaped
row-major into a spatial grid for the convolutional head.

Published variant schemas (base/large/giant) are available for loading
real weights; the tiny-test variant is small enough to train against on a
CPU and is what the test-suite exercises.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneVariant:
    name: str
    embed_dim: int
    depth: int
    n_heads: int
    patch_size: int = 14
    mlp_hidden: int | None = None  # None -> 4 * embed_dim
    gated_mlp: bool = False

    def __post_init__(self):
        if self.embed_dim < 16:
            raise ValueError(f"embed_dim must be >= 16, got {self.embed_dim}")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.depth < 1 or self.patch_size < 1:
            raise ValueError("depth and patch_size must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.embed_dim


_VARIANTS = {
    "base": BackboneVariant("base", embed_dim=768, depth=12, n_heads=12),
    "large": BackboneVariant("large", embed_dim=1024, depth=24, n_heads=16),
    "giant": BackboneVariant(
        "giant", embed_dim=1536, depth=40, n_heads=24, mlp_hidden=4096, gated_mlp=True
    ),
    "tiny-test": BackboneVariant("tiny-test", embed_dim=64, depth=2, n_heads=4),
}

VARIANT_NAMES = tuple(sorted(_VARIANTS))


def get_variant(name: str, **overrides) -> BackboneVariant:
    """Look up a variant by name. Only tiny-test accepts overrides
    (embed_dim, depth, n_heads); the published schemas are fixed."""
    if name not in _VARIANTS:
        raise ValueError(f"unknown variant {name!r}, expected one of {sorted(_VARIANTS)}")
    variant = _VARIANTS[name]
    if overrides:
        if name != "tiny-test":
            raise ValueError(f"variant {name!r} is a fixed published schema")
        variant = replace(variant, **overrides)
    return variant


# ---------------------------------------------------------------------------
# patch tiling
# ---------------------------------------------------------------------------


def patchify(image: torch.Tensor, patch_size: int = 14) -> torch.Tensor:
    """Cut (C, H, W) into row-major non-overlapping (N, C, p, p) patches."""
    if not torch.is_tensor(image):
        image = torch.as_tensor(image)
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {tuple(image.shape)}")
    c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    # (C, gh, p, gw, p) -> (gh, gw, C, p, p) -> (N, C, p, p)
    tiles = image.reshape(c, h // p, p, w // p, p).permute(1, 3, 0, 2, 4)
    return tiles.reshape(-1, c, p, p)


def untile(patches: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
    """Reassemble patchify output back into the (C, H, W) image."""
    gh, gw = grid_hw
    n, c, p, _ = patches.shape
    if n != gh * gw:
        raise ValueError(f"{n} patches cannot fill a {gh}x{gw} grid")
    tiles = patches.reshape(gh, gw, c, p, p).permute(2, 0, 3, 1, 4)
    return tiles.reshape(c, gh * p, gw * p)


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # (b, heads, n, hd)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class GatedMlp(nn.Module):
    """Gated feed-forward used by the giant schema: half the projected
    width gates the other half."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w12 = nn.Linear(dim, 2 * hidden)
        self.w3 = nn.Linear(hidden, dim)

    def forward(self, x):
        x1, x2 = self.w12(x).chunk(2, dim=-1)
        return self.w3(F.silu(x1) * x2)


class Block(nn.Module):
    def __init__(self, variant: BackboneVariant):
        super().__init__()
        d = variant.embed_dim
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, variant.n_heads)
        self.norm2 = nn.LayerNorm(d)
        mlp_cls = GatedMlp if variant.gated_mlp else Mlp
        self.mlp = mlp_cls(d, variant.hidden_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class VitBackbone(nn.Module):
    """Patch embedding + class token + positional embedding + pre-norm
    transformer stack. forward() maps a (B, 3, S, S) batch to (B, gh, gw, D)
    token grids with the class token dropped."""

    def __init__(self, variant: BackboneVariant, input_size: int = 448):
        super().__init__()
        p = variant.patch_size
        if input_size % p:
            raise ValueError(f"input size {input_size} not divisible by patch {p}")
        self.variant = variant
        self.input_size = input_size
        self.grid_size = input_size // p
        self.n_patches = self.grid_size**2
        d = variant.embed_dim

        self.patch_proj = nn.Linear(3 * p * p, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches + 1, d))
        self.blocks = nn.ModuleList(Block(variant) for _ in range(variant.depth))
        self.norm = nn.LayerNorm(d)

        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def embed_tokens(self, patches: torch.Tensor) -> torch.Tensor:
        """(N, 3, p, p) patches of one image -> (N+1, D) token sequence:
        linear embedding plus positional embeddings, class token first."""
        if patches.ndim != 4 or patches.shape[0] != self.n_patches:
            raise ValueError(
                f"expected {self.n_patches} patches, got shape {tuple(patches.shape)}"
            )
        flat = patches.reshape(self.n_patches, -1).to(self.patch_proj.weight.dtype)
        tokens = self.patch_proj(flat)
        tokens = torch.cat([self.cls_token[0], tokens], dim=0)
        return tokens + self.pos_embed[0]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4:
            raise ValueError(f"expected (B, 3, S, S) batch, got {tuple(images.shape)}")
        b = images.shape[0]
        tokens = torch.stack([self.embed_tokens(patchify(img, self.variant.patch_size))
                              for img in images])
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        patch_tokens = tokens[:, 1:, :]  # class token dropped
        return patch_tokens.reshape(b, self.grid_size, self.grid_size, -1)

    @torch.no_grad()
    def encode(self, image) -> torch.Tensor:
        """Single preprocessed (3, S, S) image -> (gh, gw, D) token grid."""
        if not torch.is_tensor(image):
            image = torch.as_tensor(image, dtype=torch.float32)
        return self.forward(image[None])[0]


def build_backbone(
    variant: BackboneVariant | str, input_size: int = 448, seed: int = 0
) -> VitBackbone:
    """Construct a backbone with seed-determined initial weights."""
    if isinstance(variant, str):
        variant = get_variant(variant)
    torch.manual_seed(seed)
    return VitBackbone(variant, input_size=input_size)


def freeze(module: nn.Module) -> nn.Module:
    """Exclude every parameter from gradient updates; forward unchanged."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# parameter schema (computed without instantiation; giant never fits in CI RAM)
# ---------------------------------------------------------------------------


def parameter_shapes(
    variant: BackboneVariant, input_size: int = 448
) -> dict[str, tuple[int, ...]]:
    d, p, h = variant.embed_dim, variant.patch_size, variant.hidden_dim
    n = (input_size // p) ** 2
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (d, 3 * p * p),
        "patch_proj.bias": (d,),
        "cls_token": (1, 1, d),
        "pos_embed": (1, n + 1, d),
    }
    for i in range(variant.depth):
        pre = f"blocks.{i}."
        shapes[pre + "norm1.weight"] = (d,)
        shapes[pre + "norm1.bias"] = (d,)
        shapes[pre + "attn.qkv.weight"] = (3 * d, d)
        shapes[pre + "attn.qkv.bias"] = (3 * d,)
        shapes[pre + "attn.proj.weight"] = (d, d)
        shapes[pre + "attn.proj.bias"] = (d,)
        shapes[pre + "norm2.weight"] = (d,)
        shapes[pre + "norm2.bias"] = (d,)
        if variant.gated_mlp:
            shapes[pre + "mlp.w12.weight"] = (2 * h, d)
            shapes[pre + "mlp.w12.bias"] = (2 * h,)
            shapes[pre + "mlp.w3.weight"] = (d, h)
            shapes[pre + "mlp.w3.bias"] = (d,)
        else:
            shapes[pre + "mlp.fc1.weight"] = (h, d)
            shapes[pre + "mlp.fc1.bias"] = (h,)
            shapes[pre + "mlp.fc2.weight"] = (d, h)
            shapes[pre + "mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    return shapes


def parameter_count(variant: BackboneVariant, input_size: int = 448) -> int:
    return sum(math.prod(s) for s in parameter_shapes(variant, input_size).values())


# ---------------------------------------------------------------------------
# checkpoint archive
# ---------------------------------------------------------------------------


def save_named_tensors(module: nn.Module, path, meta: dict | None = None) -> None:
    """Write a module's parameters as a flat named-tensor archive
    ({"tensors": {name: tensor}, "meta": {...}}). Atomic: temp + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tensors": {k: v.detach().cpu() for k, v in module.state_dict().items()},
        "meta": dict(meta or {}),
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_named_tensors(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint archive {path}: {exc}") from exc
    if not isinstance(payload, dict) or "tensors" not in payload:
        raise ValueError(f"{path} is not a named-tensor archive")
    return payload["tensors"], payload.get("meta", {})


def load_into(module: nn.Module, path) -> list[str]:
    """Populate a module from a named-tensor archive; returns the sorted
    manifest of loaded parameter names. Missing keys, unexpected keys and
    shape mismatches are all errors naming the offending key."""
    tensors, _ = load_named_tensors(path)
    expected = module.state_dict()
    for name in expected:
        if name not in tensors:
            raise KeyError(f"checkpoint {path} is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(expected[name].shape):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint "
                f"{tuple(tensors[name].shape)} vs model {tuple(expected[name].shape)}"
            )
    unexpected = set(tensors) - set(expected)
    if unexpected:
        raise ValueError(f"unexpected tensors in {path}: {sorted(unexpected)}")
    module.load_state_dict(tensors)
    return sorted(tensors)
