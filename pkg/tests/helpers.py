"""Shared oracles for the test suite."""

import math

import numpy as np
import torch

from rccmnet.ccm import batch_weights, class_prediction
from rccmnet.losses import LossConfig, one_hot_labels, one_hot_mask, total_loss
from rccmnet.model import ModelConfig, build_model

# one "PASS criterion N: ..." / "FAIL criterion N: ..." line per acceptance criterion
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def finite_difference_check(step: float = 1e-5, floor: float = 1e-6, seed: int = 3):
    """Compare autograd against central differences on a tiny double model.

    Every scalar parameter is perturbed. The CCM weights are computed once
    from the unperturbed model: they are detached in training, so the
    analytic gradient treats them as constants and the oracle must too.
    Returns (max relative error, number of parameters checked).
    """
    gen = torch.Generator().manual_seed(seed)
    model = build_model(ModelConfig(depth=2, base_channels=2, input_shape=(1, 8, 12), rng_seed=seed)).double()
    model.train()
    x = torch.rand(3, 1, 8, 12, dtype=torch.float64, generator=gen)
    z = one_hot_mask((torch.rand(3, 8, 12, generator=gen) > 0.5).long())
    labels = torch.tensor([0, 1, 2])
    y = one_hot_labels(labels)
    with torch.no_grad():
        w = batch_weights(labels, class_prediction(model(x).cls_logits))

    def loss():
        return total_loss(model(x), z, y, w, LossConfig()).total

    params = list(model.parameters())
    grads = torch.autograd.grad(loss(), params)
    worst = 0.0
    count = 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            gf = g.reshape(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + step
                hi = loss().item()
                flat[k] = old - step
                lo = loss().item()
                flat[k] = old
                num = (hi - lo) / (2 * step)
                a = gf[k].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
                count += 1
    return worst, count


def brute_contour(mask):
    """Boundary pixels by direct neighbour inspection (outside image = background)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    up, down = padded[:-2, 1:-1], padded[2:, 1:-1]
    left, right = padded[1:-1, :-2], padded[1:-1, 2:]
    edge = mask & ~(up & down & left & right)
    return np.argwhere(edge)


def brute_surface(a, m, spacing):
    """(ASSD, HD) from the full pairwise distance matrix."""
    pa, pm = brute_contour(a), brute_contour(m)
    diff = pa[:, None, :] - pm[None, :, :]
    sq = (diff * diff).sum(axis=2)
    d_am = np.sqrt(sq.min(axis=1).astype(np.float64)) * spacing
    d_ma = np.sqrt(sq.min(axis=0).astype(np.float64)) * spacing
    # a mean never exceeds the maximum; the min() only absorbs division rounding
    mean_am = min(math.fsum(d_am) / len(d_am), float(d_am.max()))
    mean_ma = min(math.fsum(d_ma) / len(d_ma), float(d_ma.max()))
    assd = 0.5 * (mean_am + mean_ma)
    return assd, float(max(d_am.max(), d_ma.max()))


def brute_dice(a, m):
    a_set = {tuple(p) for p in brute_argwhere(a)}
    m_set = {tuple(p) for p in brute_argwhere(m)}
    return 200.0 * len(a_set & m_set) / (len(a_set) + len(m_set))


def brute_argwhere(mask):
    return [(i, j) for i, row in enumerate(mask) for j, v in enumerate(row) if v]
