"""Frozen miniature dual encoder.

The visual tower turns a grayscale image into a global embedding and one
L2-normalized patch map per tap layer; the text tower maps a sequence of
token embeddings to a unit vector in the joint text space. Weights are drawn
once from a seeded generator and never change afterwards.
"""
from dataclasses import dataclass, field

import numpy as np

from vip2clip import autograd as ag
from vip2clip import numerics
from vip2clip.errors import BadImageSize, BadPromptLength, ConfigError, ShapeMismatch

# pixel normalization applied before patch embedding (CLIP-style mean/std)
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25

# state adjectives: default pair first, then the alternatives swept in the adjective ablation
VOCAB = ("good", "damaged", "normal", "abnormal", "perfect", "flawed", "flawless", "imperfect")


@dataclass(frozen=True)
class BackboneConfig:
    grid_h: int = 16
    grid_w: int = 16
    visual_dim: int = 64
    text_embed_dim: int = 32
    joint_dim: int = 32
    n_layers: int = 4
    text_layers: int = 2
    prompt_length: int = 10
    patch_pool: int = 4
    smoothing: bool = False
    seed: int = 0
    vocab: tuple = field(default=VOCAB)

    def __post_init__(self):
        dims = (self.grid_h, self.grid_w, self.visual_dim, self.text_embed_dim, self.joint_dim,
                self.n_layers, self.text_layers, self.prompt_length, self.patch_pool)
        if min(dims) < 1:
            raise ConfigError(f"backbone dimensions must be >= 1: {self}")
        if "good" not in self.vocab or "damaged" not in self.vocab:
            raise ConfigError("vocabulary must contain 'good' and 'damaged'")


@dataclass
class BackboneOutput:
    global_embed: np.ndarray        # (D,)
    patch_maps: list                # N arrays of shape (H*W, D)
    image_size: tuple               # (h, w) of the input image
    grid: tuple                     # (H, W)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FrozenBackbone:
    """Immutable stand-in for a pretrained vision-language encoder pair."""

    def __init__(self, cfg: BackboneConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        self._w = {}
        for name, arr in weights.items():
            arr = np.array(arr)
            arr.flags.writeable = False
            self._w[name] = arr
        self.dtype = next(iter(self._w.values())).dtype
        self._check_shapes()

    @classmethod
    def build(cls, cfg: BackboneConfig) -> "FrozenBackbone":
        rng = np.random.default_rng(cfg.seed)
        d, ct, c, p2 = cfg.visual_dim, cfg.text_embed_dim, cfg.joint_dim, cfg.patch_pool ** 2
        w = {
            "visual.embed.w": _uniform(rng, p2, (p2, d)),
            "visual.embed.b": _uniform(rng, p2, (d,)),
        }
        for i in range(cfg.n_layers):
            w[f"visual.layer{i}.w"] = _uniform(rng, d, (d, d))
            w[f"visual.layer{i}.b"] = _uniform(rng, d, (d,))
        w["visual.head.w"] = _uniform(rng, d, (d, d))
        w["visual.head.b"] = _uniform(rng, d, (d,))
        w["text.pos"] = _uniform(rng, ct, (cfg.prompt_length, ct))
        for i in range(cfg.text_layers):
            w[f"text.layer{i}.mix"] = _uniform(rng, cfg.prompt_length, (cfg.prompt_length, cfg.prompt_length))
            w[f"text.layer{i}.w"] = _uniform(rng, ct, (ct, ct))
            w[f"text.layer{i}.b"] = _uniform(rng, ct, (ct,))
        w["text.proj.w"] = _uniform(rng, ct, (ct, c))
        w["text.proj.b"] = _uniform(rng, ct, (c,))
        w["vocab"] = _uniform(rng, ct, (len(cfg.vocab), ct))
        return cls(cfg, {k: v.astype(np.float32) for k, v in w.items()})

    def _check_shapes(self):
        cfg = self.cfg
        expect = {
            "visual.embed.w": (cfg.patch_pool ** 2, cfg.visual_dim),
            "text.pos": (cfg.prompt_length, cfg.text_embed_dim),
            "text.proj.w": (cfg.text_embed_dim, cfg.joint_dim),
            "vocab": (len(cfg.vocab), cfg.text_embed_dim),
        }
        for name, shape in expect.items():
            if name not in self._w or self._w[name].shape != shape:
                got = self._w[name].shape if name in self._w else None
                raise ShapeMismatch(f"backbone tensor {name}: expected {shape}, got {got}")
        for i in range(cfg.n_layers):
            if f"visual.layer{i}.w" not in self._w:
                raise ShapeMismatch(f"backbone is missing visual layer {i}")

    def astype(self, dtype) -> "FrozenBackbone":
        return FrozenBackbone(self.cfg, {k: v.astype(dtype) for k, v in self._w.items()})

    def tensors(self, prefix: str = "backbone.") -> dict[str, np.ndarray]:
        return {prefix + k: v for k, v in self._w.items()}

    @classmethod
    def from_tensors(cls, cfg: BackboneConfig, tensors: dict, prefix: str = "backbone.") -> "FrozenBackbone":
        return cls(cfg, {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})

    def word_embedding(self, word: str) -> np.ndarray:
        try:
            return self._w["vocab"][self.cfg.vocab.index(word)]
        except ValueError:
            raise ConfigError(f"state word {word!r} not in vocabulary {self.cfg.vocab}") from None

    # --------------------------------------------------------------- visual

    def patchify(self, img: np.ndarray) -> np.ndarray:
        """Mean-pool each grid cell into a patch_pool x patch_pool descriptor, then normalize."""
        cfg = self.cfg
        h, w = img.shape
        q = cfg.patch_pool
        if h % (cfg.grid_h * q) or w % (cfg.grid_w * q):
            raise BadImageSize(
                f"image {h}x{w} not divisible by grid {cfg.grid_h}x{cfg.grid_w} with pool {q}")
        sh, sw = h // (cfg.grid_h * q), w // (cfg.grid_w * q)
        x = np.asarray(img, dtype=self.dtype).reshape(cfg.grid_h, q, sh, cfg.grid_w, q, sw)
        x = x.mean(axis=(2, 5))                       # (H, q, W, q)
        x = x.transpose(0, 2, 1, 3).reshape(cfg.grid_h * cfg.grid_w, q * q)
        return (x - PIXEL_MEAN) / PIXEL_STD

    def _smooth_grid(self, tokens: np.ndarray) -> np.ndarray:
        h, w = self.cfg.grid_h, self.cfg.grid_w
        grid = tokens.reshape(h, w, -1)
        padded = np.pad(grid, ((1, 1), (1, 1), (0, 0)), mode="edge")
        acc = np.zeros_like(grid)
        for di in range(3):
            for dj in range(3):
                acc += padded[di:di + h, dj:dj + w]
        return (acc / 9).reshape(h * w, -1)

    def encode_image(self, img: np.ndarray, return_raw: bool = False) -> BackboneOutput:
        x = self.patchify(img) @ self._w["visual.embed.w"] + self._w["visual.embed.b"]
        maps, raw = [], []
        for i in range(self.cfg.n_layers):
            x = x + np.tanh(x @ self._w[f"visual.layer{i}.w"] + self._w[f"visual.layer{i}.b"])
            raw.append(x)
            tap = self._smooth_grid(x) if self.cfg.smoothing else x
            maps.append(numerics.l2_normalize(tap))
        pooled = x.mean(axis=0) @ self._w["visual.head.w"] + self._w["visual.head.b"]
        out = BackboneOutput(numerics.l2_normalize(pooled), maps, tuple(img.shape),
                             (self.cfg.grid_h, self.cfg.grid_w))
        if return_raw:
            return out, raw
        return out

    # ----------------------------------------------------------------- text

    def encode_text(self, token_embeds) -> ag.Var:
        """Differentiable in ``token_embeds``; returns a unit vector of size joint_dim."""
        if token_embeds.shape != (self.cfg.prompt_length, self.cfg.text_embed_dim):
            raise BadPromptLength(
                f"expected tokens of shape {(self.cfg.prompt_length, self.cfg.text_embed_dim)}, "
                f"got {tuple(token_embeds.shape)}")
        x = ag.add(token_embeds, self._w["text.pos"])
        for i in range(self.cfg.text_layers):
            mixed = ag.matmul(self._w[f"text.layer{i}.mix"], x)
            x = x + ag.tanh(mixed @ self._w[f"text.layer{i}.w"] + self._w[f"text.layer{i}.b"])
        pooled = ag.reduce_mean(x, axis=0)
        return ag.l2_normalize(pooled @ self._w["text.proj.w"] + self._w["text.proj.b"])


def build_backbone(cfg: BackboneConfig) -> FrozenBackbone:
    return FrozenBackbone.build(cfg)


def encode_image(bb: FrozenBackbone, img: np.ndarray) -> BackboneOutput:
    return bb.encode_image(img)


def encode_text(bb: FrozenBackbone, token_embeds) -> ag.Var:
    return bb.encode_text(token_embeds)
