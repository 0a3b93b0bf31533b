"""Unified text-patch alignment: patch scoring, Top-k image scoring, inference fusion."""
import logging
from dataclasses import dataclass, field

import numpy as np

from vip2clip import autograd as ag
from vip2clip import numerics
from vip2clip.errors import EmptyLayerList, KTooLarge, ShapeMismatch

log = logging.getLogger(__name__)


@dataclass
class AnomalyResult:
    normal_maps: list            # per layer (H, W)
    anomaly_maps: list           # per layer (H, W)
    image_scores: list           # per layer S_a
    map: np.ndarray              # fused (h_img, w_img)
    score: float
    topk_indices: list = field(default_factory=list)


def _unit_rows(F):
    # patch rows come out of the backbone normalized; keep cosine exact anyway
    return numerics.l2_normalize(np.asarray(F))


def score_patch_probs(prompts, F, tau: float) -> ag.Var:
    """(HW, 2) two-way softmax of cosine similarities; column 1 is abnormal.

    ``prompts`` is the (2, D) stack (normal, abnormal), unit rows.
    """
    if prompts.shape[1] != F.shape[1]:
        raise ShapeMismatch(f"prompt dim {prompts.shape[1]} vs patch dim {F.shape[1]}")
    cos = ag.matmul(_unit_rows(F), ag.transpose(ag.l2_normalize(prompts)))
    return ag.softmax(cos, temperature=tau)


def score_patches(g_n, g_a, F, tau: float, grid: tuple | None = None):
    """Patch-grid normal/abnormal probability maps ``(M_n, M_a)``."""
    hw = F.shape[0]
    if grid is None:
        side = int(round(np.sqrt(hw)))
        grid = (side, hw // side)
    if grid[0] * grid[1] != hw:
        raise ShapeMismatch(f"grid {grid} does not hold {hw} patches")
    probs = score_patch_probs(ag.stack([g_n, g_a], axis=0), F, tau)
    return ag.reshape(probs[:, 0], grid), ag.reshape(probs[:, 1], grid)


def clamp_k(k: int, n_patches: int) -> int:
    if k > n_patches:
        log.warning("Top-k %d exceeds %d patches; clamping", k, n_patches)
        return n_patches
    return k


def topk_pool(F, M_a, k: int):
    """Mean of the k patch rows with the largest anomaly probability.

    Selection is a constant of the graph; gradients reach only the
    gathered rows.
    """
    scores = np.asarray(M_a).ravel()
    if not 1 <= k <= scores.size:
        raise KTooLarge(f"k={k} outside [1, {scores.size}]")
    idx = numerics.top_k_indices(scores, k)
    pooled = ag.reduce_mean(ag.index(F, idx), axis=0) if isinstance(F, ag.Var) \
        else np.asarray(F)[idx].mean(axis=0)
    return pooled, idx


def image_score_probs(prompts, feature, tau: float) -> ag.Var:
    """(2,) softmax over cosine of ``feature`` against (normal, abnormal) prompts."""
    feat = numerics.l2_normalize(np.asarray(feature))
    cos = ag.matmul(ag.l2_normalize(prompts), feat)
    return ag.softmax(cos, temperature=tau)


def image_score(g_n, g_a, F_a, tau: float):
    probs = image_score_probs(ag.stack([g_n, g_a], axis=0), F_a, tau)
    return probs[0], probs[1]


def fuse_maps(normal_maps, anomaly_maps, image_size) -> np.ndarray:
    """Pre-smoothing fused map: mean over layers of (1 - Up(M_n))/2 + Up(M_a)/2."""
    if not anomaly_maps:
        raise EmptyLayerList("no layers to fuse")
    h, w = image_size
    acc = None
    for m_n, m_a in zip(normal_maps, anomaly_maps):
        up_n = numerics.upsample_bilinear(np.asarray(m_n), h, w)
        up_a = numerics.upsample_bilinear(np.asarray(m_a), h, w)
        term = 0.5 * (1.0 - up_n) + 0.5 * up_a
        acc = term if acc is None else acc + term
    return acc / len(anomaly_maps)


def fuse_inference(per_layer, image_size, sigma: float):
    """Final image score and smoothed pixel map from ``(M_n, M_a, S_a)`` per layer."""
    if not per_layer:
        raise EmptyLayerList("no layers to fuse")
    score = float(np.mean([float(np.asarray(s)) for _, _, s in per_layer]))
    fused = fuse_maps([m for m, _, _ in per_layer], [m for _, m, _ in per_layer], image_size)
    return score, numerics.gaussian_smooth(fused, sigma)
