"""Training objectives for the main module and the discriminator.

All functions take tensors (or array-likes, converted to float64 tensors) and
return a scalar tensor so they can sit inside an autograd graph.
"""

from __future__ import annotations

import torch

DISJOINT_EPS = 1e-6


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def loss_fence(scores) -> torch.Tensor:
    """Mean |D(I_fc) - 1|: how far the fence cut is from being accepted as real."""
    s = _tensor(scores).reshape(-1)
    if s.numel() == 0:
        raise ValueError("loss_fence needs at least one score")
    return (s - 1.0).abs().mean()


def loss_disjoint(fence, wild, eps: float = DISJOINT_EPS) -> torch.Tensor:
    """Soft Dice overlap between the two cuts, per image, averaged over the batch.

    Intersection is the sum of elementwise products, set sizes are sums of
    values; ``eps`` is added to numerator and denominator. Inputs of ndim <= 2
    are one image; otherwise the leading dimension indexes images.
    """
    f, w = _tensor(fence), _tensor(wild)
    if f.shape != w.shape:
        raise ValueError(f"shape mismatch: {tuple(f.shape)} vs {tuple(w.shape)}")
    if f.ndim <= 2:
        f, w = f.reshape(1, -1), w.reshape(1, -1)
    else:
        f, w = f.flatten(1), w.flatten(1)
    inter = (f * w).sum(dim=1)
    total = f.sum(dim=1) + w.sum(dim=1)
    return ((2.0 * inter + eps) / (total + eps)).mean()


def loss_reconstruction(inputs, recon) -> torch.Tensor:
    """Pixelwise MSE averaged over every pixel of every sample."""
    x, r = _tensor(inputs), _tensor(recon)
    if x.shape != r.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(r.shape)}")
    return ((x - r) ** 2).mean()


def loss_discriminator(scores_fake, scores_real) -> torch.Tensor:
    """Pooled MAE with fakes targeting -1 and reals +1."""
    fake = _tensor(scores_fake).reshape(-1)
    real = _tensor(scores_real).reshape(-1)
    n = fake.numel() + real.numel()
    if n == 0:
        raise ValueError("loss_discriminator needs at least one score")
    return ((fake + 1.0).abs().sum() + (real - 1.0).abs().sum()) / n


def loss_main_total(fence_loss, disjoint_loss, recon_loss, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    lf, lw, lr = (float(v) for v in weights)
    if min(lf, lw, lr) < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    if lf == lw == lr == 0:
        raise ValueError("at least one loss weight must be positive")
    return lf * _tensor(fence_loss) + lw * _tensor(disjoint_loss) + lr * _tensor(recon_loss)
