"""Image-conditioned prompt construction and per-layer cross-attention refinement.

The prompt path never sees a class label: the only inputs are learnable
tokens, two fixed state words, the global image embedding, and patch maps.
"""
from dataclasses import dataclass, fields

import numpy as np

from vip2clip import autograd as ag
from vip2clip.backbone import BackboneOutput, FrozenBackbone
from vip2clip.errors import ConfigError, ShapeMismatch

TRAINABLE = ("v", "w", "o", "meta_w1", "meta_b1", "meta_w2", "meta_b2", "W_q", "W_k", "W_v", "W_o")


@dataclass
class PromptState:
    """Every trainable tensor of the prompt learner.

    Tensor fields hold either arrays or :class:`~vip2clip.autograd.Var`
    leaves (during training). ``e`` static tokens + one state word + ``r``
    shared generic tokens make up each prompt.
    """

    v: object           # (e, C_tok) normal-prompt static tokens
    w: object           # (e, C_tok) abnormal-prompt static tokens
    o: object           # (r, C_tok) generic tokens standing in for a class name
    meta_w1: object     # (D, D_h)
    meta_b1: object     # (D_h,)
    meta_w2: object     # (D_h, r*C_tok)
    meta_b2: object     # (r*C_tok,)
    W_q: object         # (C, C)
    W_k: object         # (D, C)
    W_v: object         # (D, C)
    W_o: object         # (C, D)
    state_word_normal: int = 0
    state_word_abnormal: int = 1

    @property
    def n_static(self) -> int:
        return self.v.shape[0]

    @property
    def n_dynamic(self) -> int:
        return self.o.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.n_static + 1 + self.n_dynamic

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in TRAINABLE}

    def replace(self, **updates) -> "PromptState":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(updates)
        return PromptState(**values)

    def as_arrays(self, dtype=None) -> "PromptState":
        return self.replace(**{k: np.array(np.asarray(t), dtype=dtype) for k, t in self.tensors().items()})

    def as_leaves(self, dtype=None) -> "PromptState":
        """Fresh gradient-tracking leaves holding copies of the current values."""
        return self.replace(**{k: ag.Var(np.array(np.asarray(t), dtype=dtype), requires_grad=True, name=k)
                               for k, t in self.tensors().items()})

    def to_checkpoint(self, prefix: str = "prompt.") -> dict:
        out = {prefix + k: np.asarray(t, dtype=np.float32) for k, t in self.tensors().items()}
        out[prefix + "state_word_normal"] = np.array([self.state_word_normal], dtype=np.float32)
        out[prefix + "state_word_abnormal"] = np.array([self.state_word_abnormal], dtype=np.float32)
        return out

    @classmethod
    def from_checkpoint(cls, tensors: dict, prefix: str = "prompt.") -> "PromptState":
        try:
            values = {k: np.array(tensors[prefix + k], dtype=np.float32) for k in TRAINABLE}
            normal = int(tensors[prefix + "state_word_normal"][0])
            abnormal = int(tensors[prefix + "state_word_abnormal"][0])
        except KeyError as exc:
            raise ShapeMismatch(f"checkpoint lacks prompt tensor {exc}") from None
        return cls(**values, state_word_normal=normal, state_word_abnormal=abnormal)


# Prompts and patch rows are unit vectors, so fan-in scaled W_q/W_k give near-uniform
# attention that never sharpens within a short schedule; a large normal init starts it peaked.
QK_INIT_STD = 6.0
# value/output projections start small so Adam steps move their direction quickly
VO_INIT_GAIN = 0.25
TOKEN_INIT_STD = 0.02


def init_prompt_state(bb: FrozenBackbone, n_static: int = 6, n_dynamic: int = 3,
                      normal_word: str = "good", abnormal_word: str = "damaged",
                      rng: np.random.Generator | None = None, hidden: int | None = None) -> PromptState:
    cfg = bb.cfg
    if n_static + 1 + n_dynamic != cfg.prompt_length:
        raise ConfigError(
            f"{n_static} static + 1 word + {n_dynamic} dynamic tokens != prompt length {cfg.prompt_length}")
    rng = rng if rng is not None else np.random.default_rng(0)
    d, ct, c = cfg.visual_dim, cfg.text_embed_dim, cfg.joint_dim
    dh = hidden or max(1, d // 4)

    def fan_in(n, shape):
        bound = 1.0 / np.sqrt(n)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    return PromptState(
        v=(TOKEN_INIT_STD * rng.standard_normal((n_static, ct))).astype(np.float32),
        w=(TOKEN_INIT_STD * rng.standard_normal((n_static, ct))).astype(np.float32),
        o=(TOKEN_INIT_STD * rng.standard_normal((n_dynamic, ct))).astype(np.float32),
        meta_w1=fan_in(d, (d, dh)),
        meta_b1=fan_in(d, (dh,)),
        meta_w2=fan_in(dh, (dh, n_dynamic * ct)),
        meta_b2=fan_in(dh, (n_dynamic * ct,)),
        W_q=(QK_INIT_STD * rng.standard_normal((c, c))).astype(np.float32),
        W_k=(QK_INIT_STD * rng.standard_normal((d, c))).astype(np.float32),
        W_v=VO_INIT_GAIN * fan_in(d, (d, c)),
        W_o=VO_INIT_GAIN * fan_in(c, (c, d)),
        state_word_normal=cfg.vocab.index(normal_word),
        state_word_abnormal=cfg.vocab.index(abnormal_word),
    )


def meta_net(ps: PromptState, f) -> ag.Var:
    hidden = ag.relu(ag.matmul(f, ps.meta_w1) + ps.meta_b1)
    return ag.matmul(hidden, ps.meta_w2) + ps.meta_b2


def ica_assemble(ps: PromptState, f, bb: FrozenBackbone, use_ica: bool = True):
    """Build the normal and abnormal token sequences for one image.

    Layout: ``[static tokens][state word][z_1 .. z_r]`` with ``z = o + a`` and
    ``a`` the Meta-Net output reshaped to ``(r, C_tok)``; the ``z`` tokens
    are shared by both prompts. With ``use_ica=False`` the generic tokens
    enter unchanged.
    """
    ct = ps.o.shape[1]
    if np.shape(f) != (ps.meta_w1.shape[0],):
        raise ShapeMismatch(f"global embedding {np.shape(f)} does not match Meta-Net input {ps.meta_w1.shape[0]}")
    if use_ica:
        z = ps.o + ag.reshape(meta_net(ps, f), (ps.n_dynamic, ct))
    else:
        z = ag.as_var(ps.o)
    words = bb._w["vocab"]
    good = words[ps.state_word_normal][None, :]
    bad = words[ps.state_word_abnormal][None, :]
    tokens_n = ag.concat([ps.v, good, z], axis=0)
    tokens_a = ag.concat([ps.w, bad, z], axis=0)
    return tokens_n, tokens_a


def attention(G_t, F, ps: PromptState):
    """Row-stochastic attention of the two prompt rows over patch tokens."""
    c = ps.W_q.shape[0]
    q = ag.matmul(G_t, ps.W_q)
    k = ag.matmul(F, ps.W_k)
    return ag.softmax(ag.matmul(q, ag.transpose(k)) / float(np.sqrt(c)))


def fgp_refine(G_t, F, ps: PromptState) -> ag.Var:
    """Cross-attend prompts over one layer's patches; returns unit rows (normal, abnormal)."""
    if G_t.shape[0] != 2 or G_t.shape[1] != ps.W_q.shape[0] or F.shape[1] != ps.W_k.shape[0]:
        raise ShapeMismatch(f"fgp_refine got G_t {tuple(G_t.shape)} and patches {tuple(F.shape)}")
    attn = attention(G_t, F, ps)
    values = ag.matmul(F, ps.W_v)
    return ag.l2_normalize(ag.matmul(ag.matmul(attn, values), ps.W_o))


@dataclass
class LayerPrompts:
    normal: list       # N unit vectors (D,)
    abnormal: list     # N unit vectors (D,)
    stacked: list      # N Vars of shape (2, D): rows (normal, abnormal)
    text: object       # (2, C) text-encoder output, before refinement


def build_layer_prompts(ps: PromptState, bb: FrozenBackbone, bo: BackboneOutput,
                        use_ica: bool = True, use_fgp: bool = True) -> LayerPrompts:
    tokens_n, tokens_a = ica_assemble(ps, bo.global_embed, bb, use_ica=use_ica)
    G_t = ag.stack([bb.encode_text(tokens_n), bb.encode_text(tokens_a)], axis=0)
    stacked = []
    if not use_fgp:
        # C and D differ, so the text rows still need the output projection
        shared = ag.l2_normalize(ag.matmul(G_t, ps.W_o))
        stacked = [shared] * len(bo.patch_maps)
    else:
        stacked = [fgp_refine(G_t, F, ps) for F in bo.patch_maps]
    return LayerPrompts(
        normal=[g[0] for g in stacked],
        abnormal=[g[1] for g in stacked],
        stacked=stacked,
        text=G_t,
    )
