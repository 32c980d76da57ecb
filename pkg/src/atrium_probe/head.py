"""Trainable segmentation head on top of the frozen backbone.

A 1x1 convolution maps the D-dimensional token grid to a working channel
count, then three [3x3 conv + ReLU + x2 bilinear upsample] stages carry
32 -> 64 -> 128 -> 256 with channel halving, a 1x1 convolution produces the
single logit channel and a final bilinear resize reaches the input
resolution (448 = 32 * 14 is not a power-of-two multiple of 32, so the
fractional last hop is unavoidable).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import VitBackbone


def _zero_biases(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d) and m.bias is not None:
            nn.init.zeros_(m.bias)


class TokenClassifier(nn.Module):
    """Pointwise (1x1) convolution over the token grid: D -> C channels,
    spatial layout untouched."""

    def __init__(self, embed_dim: int, channels: int = 128):
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, channels, kernel_size=1)
        _zero_biases(self)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, gh, gw, D) token grid -> (B, C, gh, gw) feature map."""
        if grid.ndim != 4:
            raise ValueError(f"expected (B, gh, gw, D) grid, got {tuple(grid.shape)}")
        return self.conv(grid.permute(0, 3, 1, 2))


class Decoder(nn.Module):
    """Three conv/upsample stages with channel halving, then 1x1 conv to
    one logit channel and a bilinear resize to the output resolution."""

    def __init__(self, channels: int = 128, out_size: int = 448):
        super().__init__()
        if channels < 8 or channels % 8:
            raise ValueError(f"channels must be a multiple of 8, got {channels}")
        self.out_size = out_size
        widths = [channels, channels // 2, channels // 4, channels // 8]
        self.stages = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], kernel_size=3, padding=1)
            for i in range(3)
        )
        self.out_conv = nn.Conv2d(widths[3], 1, kernel_size=1)
        _zero_biases(self)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        x = features
        for conv in self.stages:
            x = F.relu(conv(x))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.out_conv(x)
        if x.shape[-1] != self.out_size:
            x = F.interpolate(
                x, size=(self.out_size, self.out_size),
                mode="bilinear", align_corners=False,
            )
        return x


class SegHead(nn.Module):
    """TokenClassifier + Decoder; the only trainable part of the ViT path."""

    def __init__(self, embed_dim: int, channels: int = 128, out_size: int = 448):
        super().__init__()
        self.classifier = TokenClassifier(embed_dim, channels)
        self.decoder = Decoder(channels, out_size)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.classifier(grid))


class ViTSegmenter(nn.Module):
    """Frozen backbone composed with the trainable head; (B, 3, S, S)
    images -> (B, 1, S, S) logits. Nothing else touches the input."""

    def __init__(self, backbone: VitBackbone, head_channels: int = 128):
        super().__init__()
        self.backbone = backbone
        self.head = SegHead(
            backbone.variant.embed_dim, head_channels, backbone.input_size
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(images))

    def head_parameters(self):
        return self.head.parameters()


def build_head(
    embed_dim: int, channels: int = 128, out_size: int = 448, seed: int = 0
) -> SegHead:
    torch.manual_seed(seed)
    return SegHead(embed_dim, channels, out_size)
