"""Comparison models: plain UNet, Attention UNet, and a ResNet50-encoder
UNet, all emitting single-channel logits at input resolution.

UNet and Attention UNet share their module names exactly (the attention
variant only adds gate modules), so weights transplant cleanly between
them; with gates bypassed the two compute the same function.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet50

from .backbone import VitBackbone, get_variant, freeze
from .cache import cached_checkpoint
from .head import ViTSegmenter

ARCHITECTURES = ("unet", "attention_unet", "res50_unet", "vit_head")

RESNET50_CACHE_NAME = "resnet50_imagenet.pth"


@dataclass
class ModelSpec:
    """Configuration of one method.

    The default input sizes are 320 (CNN baselines) and 448 (ViT);
    smaller sizes are accepted for CPU-scale runs as long as they meet the
    architecture's divisibility constraint (16 for UNets, 32 for the
    ResNet50 encoder, 14 for the ViT patch grid).
    """

    architecture: str
    input_size: int = 0  # 0 -> per-architecture default
    base_channels: int = 64
    pretrained_encoder: bool = False
    # vit_head only:
    variant: str = "tiny-test"
    embed_dim: int | None = None
    depth: int | None = None
    n_heads: int | None = None
    head_channels: int = 128
    vit_normalize: str = "imagenet"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.architecture!r}, "
                f"expected one of {ARCHITECTURES}"
            )
        if self.input_size == 0:
            self.input_size = 448 if self.architecture == "vit_head" else 320
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.architecture in ("unet", "attention_unet") and self.input_size % 16:
            raise ValueError(
                f"{self.architecture} needs input_size divisible by 16, "
                f"got {self.input_size}"
            )
        if self.architecture == "res50_unet" and self.input_size % 32:
            raise ValueError(
                f"res50_unet needs input_size divisible by 32, got {self.input_size}"
            )
        if self.architecture == "vit_head" and self.input_size % 14:
            raise ValueError(
                f"vit_head needs input_size divisible by 14, got {self.input_size}"
            )

    @property
    def in_channels(self) -> int:
        """Grayscale input everywhere except the pretrained RGB stems."""
        return 1 if self.architecture in ("unet", "attention_unet") else 3

    def backbone_variant(self):
        overrides = {}
        if self.embed_dim is not None:
            overrides["embed_dim"] = self.embed_dim
        if self.depth is not None:
            overrides["depth"] = self.depth
        if self.n_heads is not None:
            overrides["n_heads"] = self.n_heads
        return get_variant(self.variant, **overrides)


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """Classic 4-level encoder/decoder with skip concatenations and
    channel doubling per level."""

    def __init__(self, in_channels: int = 1, base_channels: int = 64):
        super().__init__()
        b = base_channels
        self.enc1 = DoubleConv(in_channels, b)
        self.enc2 = DoubleConv(b, 2 * b)
        self.enc3 = DoubleConv(2 * b, 4 * b)
        self.enc4 = DoubleConv(4 * b, 8 * b)
        self.bottleneck = DoubleConv(8 * b, 16 * b)
        self.pool = nn.MaxPool2d(2)
        self.up4 = nn.ConvTranspose2d(16 * b, 8 * b, 2, stride=2)
        self.dec4 = DoubleConv(16 * b, 8 * b)
        self.up3 = nn.ConvTranspose2d(8 * b, 4 * b, 2, stride=2)
        self.dec3 = DoubleConv(8 * b, 4 * b)
        self.up2 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.dec2 = DoubleConv(4 * b, 2 * b)
        self.up1 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.dec1 = DoubleConv(2 * b, b)
        self.out_conv = nn.Conv2d(b, 1, 1)

    def _skip(self, level: int, skip, gate):
        """Hook for subclasses to transform a skip feature; the plain UNet
        passes it through. gate is the upsampled coarser-level feature."""
        return skip

    def _decode(self, x5, skips):
        x1, x2, x3, x4 = skips
        u4 = self.up4(x5)
        d4 = self.dec4(torch.cat([u4, self._skip(4, x4, u4)], dim=1))
        u3 = self.up3(d4)
        d3 = self.dec3(torch.cat([u3, self._skip(3, x3, u3)], dim=1))
        u2 = self.up2(d3)
        d2 = self.dec2(torch.cat([u2, self._skip(2, x2, u2)], dim=1))
        u1 = self.up1(d2)
        d1 = self.dec1(torch.cat([u1, self._skip(1, x1, u1)], dim=1))
        return self.out_conv(d1)

    def forward(self, x):
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError(f"input spatial dims must divide by 16, got {tuple(x.shape)}")
        x1 = self.enc1(x)
        x2 = self.enc2(self.pool(x1))
        x3 = self.enc3(self.pool(x2))
        x4 = self.enc4(self.pool(x3))
        x5 = self.bottleneck(self.pool(x4))
        return self._decode(x5, (x1, x2, x3, x4))


class AttentionGate(nn.Module):
    """Additive attention: the coarser-level gating signal decides, per
    pixel, how much of the skip feature passes through."""

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int):
        super().__init__()
        self.w_skip = nn.Conv2d(skip_ch, inter_ch, 1, bias=False)
        self.w_gate = nn.Conv2d(gate_ch, inter_ch, 1, bias=True)
        self.psi = nn.Conv2d(inter_ch, 1, 1, bias=True)

    def coefficients(self, skip, gate):
        return torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + self.w_gate(gate))))

    def forward(self, skip, gate):
        return skip * self.coefficients(skip, gate)


class AttentionUNet(UNet):
    """UNet with attention gates on every skip connection. The gating
    signal is the upsampled decoder feature originating from the coarser
    level. bypass_gates=True short-circuits every gate to an all-ones
    mask, which reduces the model to the plain UNet it shares weights
    with (used by the equivalence test)."""

    def __init__(self, in_channels: int = 1, base_channels: int = 64):
        super().__init__(in_channels, base_channels)
        b = base_channels
        self.att4 = AttentionGate(8 * b, 8 * b, 4 * b)
        self.att3 = AttentionGate(4 * b, 4 * b, 2 * b)
        self.att2 = AttentionGate(2 * b, 2 * b, b)
        self.att1 = AttentionGate(b, b, max(b // 2, 1))
        self.bypass_gates = False

    def _skip(self, level: int, skip, gate):
        if self.bypass_gates:
            return skip
        att = getattr(self, f"att{level}")
        return att(skip, gate)


class Res50UNet(nn.Module):
    """ResNet50 encoder (5 feature stages) with a UNet-style decoder.

    The encoder can start from a classification-pretrained checkpoint in
    the local cache; with pretrained=False it is randomly initialized
    (the phantom / CI mode). Input is 3-channel because the pretrained
    stem is.
    """

    def __init__(self, pretrained: bool = False):
        super().__init__()
        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)     # 64,  /2
        self.maxpool = net.maxpool
        self.layer1 = net.layer1                                    # 256, /4
        self.layer2 = net.layer2                                    # 512, /8
        self.layer3 = net.layer3                                    # 1024,/16
        self.layer4 = net.layer4                                    # 2048,/32
        self.loaded_manifest: list[str] = []
        if pretrained:
            self.loaded_manifest = self._load_pretrained_encoder()

        self.up4 = nn.ConvTranspose2d(2048, 256, 2, stride=2)
        self.dec4 = DoubleConv(256 + 1024, 256)
        self.up3 = nn.ConvTranspose2d(256, 128, 2, stride=2)
        self.dec3 = DoubleConv(128 + 512, 128)
        self.up2 = nn.ConvTranspose2d(128, 64, 2, stride=2)
        self.dec2 = DoubleConv(64 + 256, 64)
        self.up1 = nn.ConvTranspose2d(64, 32, 2, stride=2)
        self.dec1 = DoubleConv(32 + 64, 32)
        self.final = nn.Sequential(
            nn.Conv2d(32, 16, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 1, 1),
        )

    def _load_pretrained_encoder(self) -> list[str]:
        path = cached_checkpoint(RESNET50_CACHE_NAME)
        state = torch.load(path, map_location="cpu", weights_only=True)
        # accept either a raw torchvision state_dict or our archive format
        if isinstance(state, dict) and "tensors" in state:
            state = state["tensors"]
        remap = {"conv1": "stem.0", "bn1": "stem.1"}
        loaded = {}
        for key, tensor in state.items():
            if key.startswith("fc."):
                continue
            root = key.split(".", 1)[0]
            target = key.replace(root, remap[root], 1) if root in remap else key
            loaded[target] = tensor
        encoder_keys = {
            k for k in self.state_dict()
            if k.startswith(("stem.", "layer1.", "layer2.", "layer3.", "layer4."))
        }
        missing = encoder_keys - set(loaded)
        if missing:
            raise ValueError(
                f"encoder checkpoint {path} incomplete, missing {sorted(missing)[:3]}..."
            )
        self.load_state_dict(loaded, strict=False)
        return sorted(loaded)

    def forward(self, x):
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"input spatial dims must divide by 32, got {tuple(x.shape)}")
        c0 = self.stem(x)
        c1 = self.layer1(self.maxpool(c0))
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        d4 = self.dec4(torch.cat([self.up4(c4), c3], dim=1))
        d3 = self.dec3(torch.cat([self.up3(d4), c2], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), c1], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), c0], dim=1))
        full = F.interpolate(d1, scale_factor=2, mode="bilinear", align_corners=False)
        return self.final(full)


def build_model(spec: ModelSpec, seed: int = 0) -> nn.Module:
    """Construct any method's model with seed-determined initial weights.
    For vit_head the backbone comes out frozen; only the head trains."""
    torch.manual_seed(seed)
    if spec.architecture == "unet":
        return UNet(spec.in_channels, spec.base_channels)
    if spec.architecture == "attention_unet":
        return AttentionUNet(spec.in_channels, spec.base_channels)
    if spec.architecture == "res50_unet":
        return Res50UNet(pretrained=spec.pretrained_encoder)
    backbone = VitBackbone(spec.backbone_variant(), input_size=spec.input_size)
    freeze(backbone)
    return ViTSegmenter(backbone, head_channels=spec.head_channels)
