"""Hybrid segmentation objective: focal + soft dice, with auxiliary heads.

Both losses are single fused graph ops with analytic backward passes.
Composing them out of elementwise primitives would put pow/log on the
path right where p_y -> 1 or gamma -> 0 degenerate; the fused forms
branch those cases explicitly instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, record, scale
from .model import CsdnOutput


@dataclass(frozen=True)
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] | None = None  # None = uniform 1.0
    dice_eps: float = 1e-5
    aux_weight: float = 0.4

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be > 0")
        if self.focal_alpha is not None and any(a <= 0 for a in self.focal_alpha):
            raise ValueError("focal_alpha entries must be > 0")

    def alpha_vector(self, num_classes: int) -> np.ndarray:
        if self.focal_alpha is None:
            return np.ones(num_classes)
        if len(self.focal_alpha) != num_classes:
            raise ValueError(f"focal_alpha has {len(self.focal_alpha)} entries "
                             f"for {num_classes} classes")
        return np.asarray(self.focal_alpha, dtype=np.float64)


def _check_labels(labels: np.ndarray, logits: Tensor) -> np.ndarray:
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(n, h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be an integer index map")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label values must lie in [0, {k})")
    return labels


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def focal_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean per-pixel -alpha_y (1-p_y)^gamma log p_y over softmax p."""
    labels = _check_labels(labels, logits)
    n, k, h, w = logits.shape
    gamma = float(cfg.focal_gamma)
    alpha = cfg.alpha_vector(k).astype(logits.dtype)

    lsm = _log_softmax(logits.data)
    lsm_y = np.take_along_axis(lsm, labels[:, None], axis=1)[:, 0]
    u = np.exp(lsm_y)
    om_u = -np.expm1(lsm_y)  # 1 - p_y without cancellation near 1
    a_y = alpha[labels]
    npix = n * h * w
    focal_w = np.ones_like(u) if gamma == 0.0 else om_u ** gamma
    loss_val = float((-a_y * focal_w * lsm_y).sum() / npix)
    out = Tensor.scalar(loss_val, dtype=logits.dtype)

    def bwd(g):
        p = np.exp(lsm)
        if gamma == 0.0:
            bracket = np.ones_like(u)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                bracket = om_u ** gamma - gamma * u * lsm_y * om_u ** (gamma - 1.0)
            bracket = np.where(om_u <= 0.0, 0.0, bracket)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        gz = (a_y * bracket)[:, None] * (p - onehot)
        return (gz * (g.reshape(()) / npix),)

    return record(out, [logits], bwd, "focal_loss")


def dice_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """1 - mean soft dice over classes present in the ground truth.

    Per class, dice = (2 sum(p g) + eps)/(sum p + sum g + eps) with sums
    over batch and space; classes with no ground-truth pixels are skipped
    so the mean never divides by a vacuous denominator.
    """
    labels = _check_labels(labels, logits)
    n, k, h, w = logits.shape
    eps = float(cfg.dice_eps)

    lsm = _log_softmax(logits.data)
    p = np.exp(lsm)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)

    inter = (p * onehot).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    gsum = onehot.sum(axis=(0, 2, 3))
    present = gsum > 0
    denom = psum + gsum + eps
    dice = (2.0 * inter + eps) / denom
    kept = int(present.sum())
    loss_val = float(1.0 - dice[present].mean())
    out = Tensor.scalar(loss_val, dtype=logits.dtype)

    def bwd(g):
        # q_c = dL/dp_c per pixel; zero for skipped classes.
        num = 2.0 * onehot * denom.reshape(1, k, 1, 1) \
            - (2.0 * inter + eps).reshape(1, k, 1, 1)
        q = -(num / (denom ** 2).reshape(1, k, 1, 1)) / kept
        q = np.where(present.reshape(1, k, 1, 1), q, 0.0)
        dot = (q * p).sum(axis=1, keepdims=True)
        gz = p * (q - dot)
        return (gz * g.reshape(()),)

    return record(out, [logits], bwd, "dice_loss")


def hybrid_loss(out: CsdnOutput, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """focal + dice on the main head, plus aux_weight times the same on
    each auxiliary head (absent in eval mode)."""
    total = add(focal_loss(out.main_logits, labels, cfg),
                dice_loss(out.main_logits, labels, cfg))
    for aux in out.aux_logits:
        term = add(focal_loss(aux, labels, cfg),
                   dice_loss(aux, labels, cfg))
        total = add(total, scale(term, cfg.aux_weight))
    return total
