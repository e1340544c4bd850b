"""Objective terms for the three-stage procedure: supervised soft Dice,
prediction-consistency Dice, domain-classification cross entropy, and their
weighted combination

    total = supervised + alpha * consistency - beta * adversarial

where the minus sign is the segmenter's incentive to fool the domain
discriminator (the discriminator itself minimizes the same cross entropy
through its own optimizer; no gradient-reversal layer is used).

All functions accept torch tensors (differentiable path) or numpy arrays /
mask value types (evaluation path). Batched inputs of shape (N, H, W) reduce
by the mean over samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import BinMask, ProbMask


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.3
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("dice smoothing epsilon must be positive")


@dataclass(frozen=True)
class DomainTarget:
    """One-hot domain membership for a batch, shape (N, n_domains)."""

    onehot: np.ndarray

    def __post_init__(self):
        oh = np.atleast_2d(np.asarray(self.onehot, dtype=np.float64))
        if not (np.isin(oh, (0.0, 1.0)).all() and (oh.sum(axis=1) == 1.0).all()):
            raise ValueError("each row must be one-hot (exactly one entry 1)")
        oh.setflags(write=False)
        object.__setattr__(self, "onehot", oh)

    @classmethod
    def from_indices(cls, indices, n_domains: int) -> "DomainTarget":
        idx = np.atleast_1d(np.asarray(indices, dtype=int))
        if (idx < 0).any() or (idx >= n_domains).any():
            raise ValueError(f"domain index out of range for n_domains={n_domains}")
        oh = np.zeros((len(idx), n_domains))
        oh[np.arange(len(idx)), idx] = 1.0
        return cls(oh)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, ProbMask):
        return torch.from_numpy(x.probs.copy())
    if isinstance(x, BinMask):
        return torch.from_numpy(x.labels.astype(np.float64))
    if isinstance(x, DomainTarget):
        return torch.from_numpy(x.onehot.copy())
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _per_sample_flat(t: torch.Tensor) -> torch.Tensor:
    """(H, W) -> (1, H*W); (N, ...) -> (N, prod)."""
    if t.ndim <= 1:
        return t.reshape(1, -1)
    if t.ndim == 2:
        return t.reshape(1, -1)
    return t.reshape(t.shape[0], -1)


def soft_dice_loss(pred, target, epsilon: float = 1e-5) -> torch.Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per sample, batch mean.

    Smoothing in both numerator and denominator makes empty-vs-empty score a
    loss of 0 (perfect agreement on absence)."""
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {tuple(p.shape)} vs target {tuple(t.shape)}")
    for name, x in (("pred", p), ("target", t)):
        xd = x.detach()
        if not torch.isfinite(xd).all() or xd.min() < 0 or xd.max() > 1:
            raise ValueError(f"{name} entries must be finite and in [0, 1]")
    pf, tf = _per_sample_flat(p), _per_sample_flat(t)
    inter = (pf * tf).sum(dim=1)
    dice = (2.0 * inter + epsilon) / (pf.sum(dim=1) + tf.sum(dim=1) + epsilon)
    return (1.0 - dice).mean()


def consistency_loss(pred_orig_aligned, pred_aug, epsilon: float = 1e-5) -> torch.Tensor:
    """Dice disagreement between the (re-aligned) prediction on the original
    image and the prediction on its augmented version. The caller is
    responsible for replaying spatial augmentations onto pred_orig_aligned
    first; intensity-only augmentations need no alignment."""
    return soft_dice_loss(pred_orig_aligned, pred_aug, epsilon)


def adversarial_loss(logits, target) -> torch.Tensor:
    """Multi-class cross entropy of softmax(logits) against one-hot domain
    labels, averaged over the batch."""
    z = _as_tensor(logits)
    t = _as_tensor(target)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    t = t.reshape(-1, t.shape[-1]) if t.ndim > 1 else t.reshape(1, -1)
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch: logits {tuple(z.shape)} vs target {tuple(t.shape)}")
    td = t.detach()
    if not ((td == 0) | (td == 1)).all() or not (td.sum(dim=1) == 1).all():
        raise ValueError("target rows must be one-hot")
    return -(t * torch.log_softmax(z, dim=1)).sum(dim=1).mean()


def total_loss(sup, cons, adv, w: LossWeights = LossWeights()):
    """sup + alpha * cons - beta * adv. Accepts scalars or 0-dim tensors."""
    for name, x in (("sup", sup), ("cons", cons), ("adv", adv)):
        val = float(x.detach()) if isinstance(x, torch.Tensor) else float(x)
        if not math.isfinite(val):
            raise ValueError(f"non-finite loss component {name}={val}")
    return sup + w.alpha * cons - w.beta * adv
