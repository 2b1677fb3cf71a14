"""Shared-encoder multi-task network.

Residual encoder, UNet++ nested decoder with four deep-supervision heads,
and a pooled classification head that reads the deepest encoder map,
optionally reweighted by the region confidence maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rcm

NUM_SEG_OUTPUTS = 4


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 5
    base_channels: int = 16
    num_classes: int = 3
    seg_channels: int = 2
    input_shape: tuple[int, int, int] = (1, 96, 144)
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.num_classes != 3 or self.seg_channels != 2:
            raise ValueError("the network is built for 3 plaque classes and 2 segmentation channels")
        if len(self.input_shape) != 3 or self.input_shape[0] != 1:
            raise ValueError("input_shape must be (1, H, W)")
        check_divisible(self.input_shape[1:], self.depth)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def check_divisible(hw, depth: int) -> None:
    step = 2 ** (depth - 1)
    if any(v % step for v in hw):
        raise ValueError(f"spatial size {tuple(hw)} must be divisible by {step} for depth {depth}")


@dataclass
class ForwardOutputs:
    seg_logits: list[torch.Tensor]  # 4 x (B, 2, H, W)
    cls_logits: torch.Tensor  # (B, 3)
    features: torch.Tensor  # deepest encoder map M, (B, C, h, w)
    region_probs: torch.Tensor | None = None  # (B, 4, h, w) when the RCM path ran
    fused: torch.Tensor | None = None


class ResidualBlock(nn.Module):
    """1x1 -> 3x3 -> 1x1 bottleneck with a shortcut, rectified after the sum."""

    def __init__(self, in_channels: int, out_channels: int, projection: bool = True):
        super().__init__()
        if in_channels != out_channels and not projection:
            raise ValueError(f"residual block {in_channels}->{out_channels} needs a projection shortcut")
        mid = max(out_channels // 2, 1)
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, mid, 1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return F.relu(self.body(x) + self.shortcut(x))


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.seq = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.seq(x)


class Up(nn.Module):
    """Bilinear x2 followed by a 1x1 channel-reducing conv."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList()
        in_ch = config.input_shape[0]
        for level in range(config.depth):
            self.blocks.append(ResidualBlock(in_ch, config.channels(level)))
            in_ch = config.channels(level)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for level, block in enumerate(self.blocks):
            if level > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        return feats


class NestedDecoder(nn.Module):
    """UNet++ decoder: node X[i][j] sees X[i][0..j-1] and the upsampled X[i+1][j-1]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.depth = config.depth
        self.nodes = nn.ModuleDict()
        self.ups = nn.ModuleDict()
        for j in range(1, config.depth):
            for i in range(config.depth - j):
                c = config.channels(i)
                self.ups[f"{i}_{j}"] = Up(config.channels(i + 1), c)
                self.nodes[f"{i}_{j}"] = ConvBlock(c * (j + 1), c)
        self.heads = nn.ModuleList(nn.Conv2d(config.channels(0), config.seg_channels, 1) for _ in range(config.depth - 1))

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != self.depth:
            raise ValueError(f"decoder expects {self.depth} feature levels, got {len(feats)}")
        grid = [[f] for f in feats]
        for j in range(1, self.depth):
            for i in range(self.depth - j):
                key = f"{i}_{j}"
                up = self.ups[key](grid[i + 1][j - 1])
                grid[i].append(self.nodes[key](torch.cat([*grid[i][:j], up], dim=1)))
        top = grid[0][1:]
        logits = [head(x) for head, x in zip(self.heads, top)]
        if len(logits) >= NUM_SEG_OUTPUTS:
            return logits[-NUM_SEG_OUTPUTS:]
        # shallow configs repeat the deepest path so |S| stays 4
        return logits + [logits[-1]] * (NUM_SEG_OUTPUTS - len(logits))


class ClassificationHead(nn.Module):
    def __init__(self, channels: int, num_classes: int = 3):
        super().__init__()
        self.fc = nn.Linear(channels, num_classes)

    def forward(self, fused):
        return self.fc(fused.mean(dim=(2, 3)))


class RCCMNet(nn.Module):
    def __init__(
        self,
        config: ModelConfig,
        alpha=rcm.DEFAULT_ALPHA,
        softmax_axis: str = "levels",
        use_rcm: bool = True,
    ):
        super().__init__()
        self.config = config
        self.alpha = rcm.check_alpha(alpha)
        if softmax_axis not in rcm.SOFTMAX_AXES:
            raise ValueError(f"softmax_axis must be one of {rcm.SOFTMAX_AXES}")
        self.softmax_axis = softmax_axis
        self.use_rcm = use_rcm
        self.encoder = Encoder(config)
        self.decoder = NestedDecoder(config)
        self.classifier = ClassificationHead(config.channels(config.depth - 1), config.num_classes)

    def encode(self, image) -> list[torch.Tensor]:
        if image.ndim != 4 or image.shape[1] != self.config.input_shape[0]:
            raise ValueError(f"expected (B, {self.config.input_shape[0]}, H, W) input, got {tuple(image.shape)}")
        check_divisible(image.shape[2:], self.config.depth)
        return self.encoder(image)

    def decode(self, feats) -> list[torch.Tensor]:
        return self.decoder(feats)

    def classify(self, fused) -> torch.Tensor:
        return self.classifier(fused)

    def forward(self, image) -> ForwardOutputs:
        feats = self.encode(image)
        seg = self.decode(feats)
        deepest = feats[-1]
        probs = fused = None
        if self.use_rcm:
            probs = rcm.region_probability_maps(seg, deepest.shape[-2:], axis=self.softmax_axis)
            fused = rcm.fuse_features(probs, deepest, self.alpha)
            cls = self.classify(fused)
        else:
            cls = self.classify(deepest)
        return ForwardOutputs(seg_logits=seg, cls_logits=cls, features=deepest, region_probs=probs, fused=fused)


def build_model(config: ModelConfig, alpha=rcm.DEFAULT_ALPHA, softmax_axis="levels", use_rcm=True) -> RCCMNet:
    """Construct a network with seeded fan-in-scaled uniform initialisation.

    The global torch RNG is left untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.rng_seed)
        return RCCMNet(config, alpha=alpha, softmax_axis=softmax_axis, use_rcm=use_rcm)


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
