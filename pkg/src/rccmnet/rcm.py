"""Region confidence maps and the region-weighted feature fusion."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F

DEFAULT_ALPHA = (0.1, 0.2, 0.3, 0.4)
SOFTMAX_AXES = ("levels", "classes")
PLAQUE_CHANNEL = 1


def check_alpha(alpha) -> tuple[float, ...]:
    alpha = tuple(float(a) for a in alpha)
    if len(alpha) != 4 or not all(math.isfinite(a) for a in alpha):
        raise ValueError(f"alpha must be four finite numbers, got {alpha}")
    return alpha


def downsample_logits(s: torch.Tensor, target, channel: int | None = PLAQUE_CHANNEL) -> torch.Tensor:
    """Bilinear resize of a (B, 2, H, W) or (2, H, W) logit map to ``target``.

    With ``channel`` set only that channel is kept (as a singleton channel
    axis); ``channel=None`` keeps both.
    """
    squeeze = s.ndim == 3
    if squeeze:
        s = s.unsqueeze(0)
    h, w = int(target[0]), int(target[1])
    if h > s.shape[-2] or w > s.shape[-1]:
        raise ValueError(f"target {(h, w)} is larger than the source {tuple(s.shape[-2:])}")
    if channel is not None:
        s = s[:, channel : channel + 1]
    if (h, w) != tuple(s.shape[-2:]):
        s = F.interpolate(s, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
    return s.squeeze(0) if squeeze else s


def region_probability_maps(seg_logits: Sequence[torch.Tensor], target, axis: str = "levels") -> torch.Tensor:
    """Per-level region probability maps, stacked as (B, 4, h, w).

    ``axis="levels"`` normalises the plaque logits across the four decoder
    outputs at each pixel. ``axis="classes"`` instead takes each output's
    own plaque probability over its two segmentation channels.
    """
    if len(seg_logits) != 4:
        raise ValueError(f"expected 4 segmentation outputs, got {len(seg_logits)}")
    for s in seg_logits:
        if not torch.isfinite(s).all():
            raise ValueError("segmentation logits contain non-finite values")
    if axis == "levels":
        stacked = torch.cat([downsample_logits(s, target) for s in seg_logits], dim=1)
        # softmax subtracts the per-pixel max internally
        return torch.softmax(stacked, dim=1)
    if axis == "classes":
        maps = [torch.softmax(downsample_logits(s, target, channel=None), dim=1)[:, PLAQUE_CHANNEL : PLAQUE_CHANNEL + 1] for s in seg_logits]
        return torch.cat(maps, dim=1)
    raise ValueError(f"unknown softmax axis {axis!r}")


def fuse_features(probs: torch.Tensor, features: torch.Tensor, alpha=DEFAULT_ALPHA) -> torch.Tensor:
    """FM = sum_i alpha_i * p_i * M, with each p_i broadcast over channels."""
    alpha = check_alpha(alpha)
    if probs.ndim != 4 or probs.shape[1] != 4:
        raise ValueError(f"probability maps must be (B, 4, h, w), got {tuple(probs.shape)}")
    if probs.shape[0] != features.shape[0] or probs.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"probability maps {tuple(probs.shape)} do not match features {tuple(features.shape)}")
    a = probs.new_tensor(alpha).view(1, 4, 1, 1)
    weight = (a * probs).sum(dim=1, keepdim=True)
    return weight * features
