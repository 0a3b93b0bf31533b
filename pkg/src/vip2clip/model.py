"""Per-image forward pass composing prompt construction, alignment, and losses."""
from dataclasses import dataclass

import numpy as np

from vip2clip import autograd as ag
from vip2clip import utpa
from vip2clip.backbone import BackboneOutput, FrozenBackbone
from vip2clip.losses import LossConfig, total_loss
from vip2clip.vip_prompt import PromptState, build_layer_prompts


@dataclass(frozen=True)
class ModelOptions:
    k: int = 50
    tau: float = 0.07
    sigma: float = 4.0
    use_ica: bool = True
    use_fgp: bool = True
    dual_branch: bool = False


@dataclass
class ForwardPass:
    normal_maps: list      # per layer Var (H, W)
    anomaly_maps: list     # per layer Var (H, W)
    image_probs: list      # per layer Var (2,): (S_n, S_a)
    topk: list             # per layer selected patch indices (UTPA mode)
    image_size: tuple


def forward(ps: PromptState, bb: FrozenBackbone, bo: BackboneOutput, opts: ModelOptions,
            frozen_topk: list | None = None) -> ForwardPass:
    """``frozen_topk`` pins the per-layer Top-k indices (used by finite-difference checks)."""
    prompts = build_layer_prompts(ps, bb, bo, use_ica=opts.use_ica, use_fgp=opts.use_fgp)
    normal_maps, anomaly_maps, image_probs, topk = [], [], [], []
    for layer, (stacked, F) in enumerate(zip(prompts.stacked, bo.patch_maps)):
        probs = utpa.score_patch_probs(stacked, F, opts.tau)
        m_n = ag.reshape(probs[:, 0], bo.grid)
        m_a = ag.reshape(probs[:, 1], bo.grid)
        if opts.dual_branch:
            feature, idx = bo.global_embed, None
        elif frozen_topk is not None:
            idx = frozen_topk[layer]
            feature = np.asarray(F)[idx].mean(axis=0)
        else:
            feature, idx = utpa.topk_pool(F, m_a.data, utpa.clamp_k(opts.k, F.shape[0]))
        normal_maps.append(m_n)
        anomaly_maps.append(m_a)
        image_probs.append(utpa.image_score_probs(stacked, feature, opts.tau))
        topk.append(idx)
    return ForwardPass(normal_maps, anomaly_maps, image_probs, topk, bo.image_size)


def sample_loss(fp: ForwardPass, mask: np.ndarray, label: int, cfg: LossConfig):
    h, w = fp.image_size
    up_n = [ag.upsample(m, h, w) for m in fp.normal_maps]
    up_a = [ag.upsample(m, h, w) for m in fp.anomaly_maps]
    s_a = [p[1] for p in fp.image_probs]
    return total_loss(s_a, int(label), up_n, up_a, mask, cfg)


def predict(ps: PromptState, bb: FrozenBackbone, bo: BackboneOutput, opts: ModelOptions) -> utpa.AnomalyResult:
    fp = forward(ps, bb, bo, opts)
    per_layer = [(m_n.data, m_a.data, p.data[1])
                 for m_n, m_a, p in zip(fp.normal_maps, fp.anomaly_maps, fp.image_probs)]
    score, fused = utpa.fuse_inference(per_layer, bo.image_size, opts.sigma)
    return utpa.AnomalyResult(
        normal_maps=[m for m, _, _ in per_layer],
        anomaly_maps=[m for _, m, _ in per_layer],
        image_scores=[float(s) for _, _, s in per_layer],
        map=fused,
        score=score,
        topk_indices=fp.topk,
    )
