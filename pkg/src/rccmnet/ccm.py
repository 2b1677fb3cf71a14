"""Category confidence: per-sample KL weights for the segmentation loss."""

from __future__ import annotations

import torch

TRANSFORMS = ("identity", "exp_neg")
DEFAULT_EPSILON = 1e-7


def class_prediction(cls_logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(cls_logits, dim=-1)


def _as_one_hot(labels, num_classes: int, like: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, device=like.device)
    if labels.ndim == like.ndim - 1 and not labels.is_floating_point():
        return torch.nn.functional.one_hot(labels.long(), num_classes).to(like.dtype)
    return labels.to(like.dtype)


def _check_one_hot(y: torch.Tensor) -> None:
    if not (((y == 0) | (y == 1)).all() and (y.sum(dim=-1) == 1).all()):
        raise ValueError("labels must be one-hot")


def sample_weight(y, g, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """KL(y || g) over the last axis, with 0*log(0/.) taken as 0.

    For a one-hot ``y`` with true class c this is ``-log g_c``. ``g`` is
    clamped below at ``epsilon`` before the log.
    """
    g = torch.as_tensor(g)
    if not g.is_floating_point():
        g = g.double()
    y = _as_one_hot(y, g.shape[-1], g)
    if y.shape != g.shape:
        raise ValueError(f"label shape {tuple(y.shape)} does not match prediction shape {tuple(g.shape)}")
    _check_one_hot(y)
    if ((g.sum(dim=-1) - 1).abs() > 1e-4).any() or (g < 0).any():
        raise ValueError("predictions must be probability vectors (normalised within 1e-4)")
    log_g = g.clamp_min(epsilon).log()
    terms = torch.where(y > 0, y * (torch.log(torch.where(y > 0, y, torch.ones_like(y))) - log_g), torch.zeros_like(y))
    return terms.sum(dim=-1)


def batch_weights(
    labels,
    predictions: torch.Tensor,
    transform: str = "identity",
    normalize_mean_one: bool = False,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Per-sample segmentation-loss weights, detached from the graph.

    ``identity`` returns the KL value itself, so poorly classified samples
    weigh more. ``exp_neg`` returns exp(-KL) = g_c, so confident samples
    weigh more.
    """
    if transform not in TRANSFORMS:
        raise ValueError(f"transform must be one of {TRANSFORMS}, got {transform!r}")
    predictions = predictions.detach()
    if len(labels) != len(predictions):
        raise ValueError(f"{len(labels)} labels vs {len(predictions)} predictions")
    w = sample_weight(labels, predictions, epsilon=epsilon)
    if transform == "exp_neg":
        w = torch.exp(-w)
    if normalize_mean_one:
        mean = w.mean()
        if mean > 0:
            w = w / mean
        else:
            w = torch.ones_like(w)
    return w.detach()
