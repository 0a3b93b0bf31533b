"""Training objective: image-level cross-entropy plus per-layer focal and dual Dice terms."""
from dataclasses import dataclass

import numpy as np

from vip2clip import autograd as ag
from vip2clip.errors import ConfigError, ShapeMismatch

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0

    def __post_init__(self):
        vals = (self.lam, self.focal_gamma, self.focal_alpha, self.dice_eps)
        if not all(np.isfinite(vals)) or self.lam < 0:
            raise ConfigError(f"invalid loss config {self}")


def global_loss(abnormal_probs, label: int) -> ag.Var:
    """Mean over layers of -log P(label); ``abnormal_probs`` holds S_a per layer."""
    terms = []
    for s_a in abnormal_probs:
        p = s_a if label else 1.0 - s_a
        terms.append(-ag.log(ag.clamp(p, PROB_CLIP, 1 - PROB_CLIP)))
    return ag.reduce_mean(ag.stack(terms))


def focal_loss(probs, gt, gamma: float = 2.0, alpha: float = 0.25) -> ag.Var:
    """``probs`` is (h, w, 2) with channel 0 normal, 1 abnormal; ``gt`` binary (h, w)."""
    gt = np.asarray(gt)
    if tuple(probs.shape) != gt.shape + (2,):
        raise ShapeMismatch(f"focal probs {tuple(probs.shape)} vs mask {gt.shape}")
    return ag.focal(probs, gt, gamma=gamma, alpha=alpha, clip=PROB_CLIP)


def dice_loss(pred, target, eps: float = 1.0) -> ag.Var:
    target = np.asarray(target)
    if tuple(pred.shape) != target.shape:
        raise ShapeMismatch(f"dice pred {tuple(pred.shape)} vs target {target.shape}")
    return ag.dice(pred, target, eps=eps)


def local_loss(up_n, up_a, gt, cfg: LossConfig) -> ag.Var:
    """Focal on the two-channel map plus Dice for each channel against its target."""
    gt = np.asarray(gt)
    probs = ag.stack([up_n, up_a], axis=-1)
    return (focal_loss(probs, gt, cfg.focal_gamma, cfg.focal_alpha)
            + dice_loss(up_n, 1.0 - gt, cfg.dice_eps)
            + dice_loss(up_a, gt, cfg.dice_eps))


def total_loss(abnormal_probs, label: int, up_normal, up_abnormal, gt, cfg: LossConfig):
    """Return ``(total, global, summed_local)`` for one sample.

    ``up_normal`` / ``up_abnormal`` are the per-layer maps already at mask
    resolution.
    """
    l_global = global_loss(abnormal_probs, label)
    l_local = ag.reduce_sum(ag.stack([local_loss(n, a, gt, cfg) for n, a in zip(up_normal, up_abnormal)]))
    return l_global + cfg.lam * l_local, l_global, l_local
