"""Segmentation and classification loss terms and the joint objective."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .model import ForwardOutputs


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    entropy_weight_seg: float = 1.0
    entropy_weight_cls: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class LossBreakdown:
    l_wce: torch.Tensor
    l_ent_seg: torch.Tensor
    l_ce: torch.Tensor
    l_ent_cls: torch.Tensor
    l_seg: torch.Tensor
    l_cls: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def one_hot_mask(mask: torch.Tensor) -> torch.Tensor:
    """(B, H, W) {0,1} mask -> (B, 2, H, W) one-hot, channel 1 = plaque."""
    return F.one_hot(mask.long(), 2).permute(0, 3, 1, 2)


def one_hot_labels(labels: torch.Tensor, num_classes: int = 3) -> torch.Tensor:
    return F.one_hot(labels.long(), num_classes)


def _check_one_hot(t: torch.Tensor, dim: int, what: str) -> None:
    if not (((t == 0) | (t == 1)).all() and (t.sum(dim=dim) == 1).all()):
        raise ValueError(f"{what} must be one-hot along dim {dim}")


def _log_probs(logits: torch.Tensor, dim: int, epsilon: float) -> tuple[torch.Tensor, torch.Tensor]:
    q = torch.softmax(logits, dim=dim)
    return q, q.clamp_min(epsilon).log()


def _per_sample_ce_seg(seg_logits, z, epsilon) -> torch.Tensor:
    per_output = []
    for s in seg_logits:
        _, log_q = _log_probs(s, 1, epsilon)
        per_output.append(-(z * log_q).sum(dim=1).mean(dim=(1, 2)))
    return torch.stack(per_output).mean(dim=0)


def weighted_ce_seg(seg_logits, z: torch.Tensor, weights: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    """Pixel-mean cross-entropy, averaged over the deep-supervision outputs,
    scaled per sample and averaged over the batch."""
    if any(s.shape != z.shape for s in seg_logits):
        raise ValueError(f"segmentation logits and target {tuple(z.shape)} disagree in shape")
    _check_one_hot(z, 1, "segmentation target")
    z = z.to(seg_logits[0].dtype)
    weights = torch.as_tensor(weights, dtype=z.dtype, device=z.device).reshape(-1)
    if weights.numel() == 1:
        weights = weights.expand(z.shape[0])
    return (weights * _per_sample_ce_seg(seg_logits, z, epsilon)).mean()


def entropy_seg(seg_logits, epsilon: float = 1e-7) -> torch.Tensor:
    per_output = []
    for s in seg_logits:
        q, log_q = _log_probs(s, 1, epsilon)
        per_output.append(-(q * log_q).sum(dim=1).mean())
    return torch.stack(per_output).mean()


def ce_cls(cls_logits: torch.Tensor, y: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    if y.shape != cls_logits.shape:
        raise ValueError(f"class target {tuple(y.shape)} does not match logits {tuple(cls_logits.shape)}")
    _check_one_hot(y, -1, "class target")
    _, log_q = _log_probs(cls_logits, -1, epsilon)
    return -(y.to(log_q.dtype) * log_q).sum(dim=-1).mean()


def entropy_cls(cls_logits: torch.Tensor, epsilon: float = 1e-7) -> torch.Tensor:
    q, log_q = _log_probs(cls_logits, -1, epsilon)
    return -(q * log_q).sum(dim=-1).mean()


def total_loss(outputs: ForwardOutputs, z, y, weights, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Joint objective: (WCE + entropy) for segmentation plus lambda times
    (CE + entropy) for classification."""
    eps = cfg.epsilon
    l_wce = weighted_ce_seg(outputs.seg_logits, z, weights, eps)
    l_ent_seg = entropy_seg(outputs.seg_logits, eps)
    l_ce = ce_cls(outputs.cls_logits, y, eps)
    l_ent_cls = entropy_cls(outputs.cls_logits, eps)
    l_seg = l_wce + cfg.entropy_weight_seg * l_ent_seg
    l_cls = l_ce + cfg.entropy_weight_cls * l_ent_cls
    return LossBreakdown(
        l_wce=l_wce,
        l_ent_seg=l_ent_seg,
        l_ce=l_ce,
        l_ent_cls=l_ent_cls,
        l_seg=l_seg,
        l_cls=l_cls,
        total=l_seg + cfg.lam * l_cls,
    )
