"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment, unknown keys are rejected. Every
key and its default is listed in ``DEFAULTS``; the README reproduces the
table. All randomness derives from the single ``seed`` key through named
sub-streams (see :func:`substream`).
"""
import zlib
from pathlib import Path

import numpy as np

from vip2clip import __version__
from vip2clip.backbone import VOCAB, BackboneConfig
from vip2clip.data import DEFECTS, TEXTURES, SynthConfig
from vip2clip.errors import ConfigError, IoError
from vip2clip.losses import LossConfig
from vip2clip.model import ModelOptions

DEFAULTS: dict[str, object] = {
    "seed": 42,
    "backbone.grid": "16x16",
    "backbone.visual_dim": 64,
    "backbone.text_embed_dim": 32,
    "backbone.joint_dim": 32,
    "backbone.layers": 4,
    "backbone.text_layers": 2,
    "backbone.patch_pool": 4,
    "backbone.smoothing": False,
    "prompt.length": 10,
    "prompt.dynamic": 3,
    "prompt.normal_word": "good",
    "prompt.abnormal_word": "damaged",
    "prompt.meta_hidden": 0,
    "utpa.k": 50,
    "utpa.tau": 0.07,
    "loss.lambda": 1.0,
    "loss.focal_gamma": 2.0,
    "loss.focal_alpha": 0.25,
    "loss.dice_eps": 1.0,
    "map.sigma": 4.0,
    "train.lr": 1e-3,
    "train.epochs": 10,
    "train.batch": 8,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "data.root": "",
    "data.size": 128,
    "data.n_train": 400,
    "data.n_val": 50,
    "data.n_test": 100,
    "data.anomaly_fraction": 0.5,
    "data.textures": "grating,checker,noise",
    "data.test_textures": "",
    "data.defects": "blob,scratch,patch",
    "data.delta": 0.35,
    "data.area_min": 64,
    "data.area_max": 1200,
    "data.noise": 0.02,
    "eval.fpr_limit": 0.3,
    "eval.thresholds": 200,
    "ablate.ica": False,
    "ablate.fgp": False,
    "ablate.dual_branch": False,
}

# module-ablation presets: (ablate.ica, ablate.fgp, ablate.dual_branch)
PRESETS = {
    "none": (True, True, True),
    "ica": (False, True, True),
    "fgp": (True, False, True),
    "ica+fgp": (False, False, True),
    "utpa": (True, True, False),
    "utpa+ica": (False, True, False),
    "utpa+fgp": (True, False, False),
    "full": (False, False, False),
}
PRESET_KEY = "ablate.preset"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, raw) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        raw = str(raw)
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    return raw.strip()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key == PRESET_KEY:
            if raw not in PRESETS:
                raise ConfigError(f"unknown ablation preset {raw!r}; choose from {sorted(PRESETS)}")
            for k, v in zip(("ablate.ica", "ablate.fgp", "ablate.dual_branch"), PRESETS[raw]):
                self.values[k] = v
            return
        self.values[key] = coerce(key, raw)

    def __getitem__(self, key):
        return self.values[key]

    def copy(self) -> "RunConfig":
        return RunConfig({k: format_value(v) for k, v in self.values.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, str(path))

    def dumps(self) -> str:
        lines = [f"# vip2clip {__version__}"]
        lines += [f"{k}={format_value(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        try:
            Path(path).write_text(self.dumps())
        except OSError as exc:
            raise IoError(f"cannot write config {path}: {exc}") from exc

    # ------------------------------------------------------------ builders

    def grid(self) -> tuple[int, int]:
        text = self["backbone.grid"].lower()
        try:
            h, _, w = text.partition("x")
            return int(h), int(w or h)
        except ValueError:
            raise ConfigError(f"backbone.grid must look like 16x16, got {text!r}") from None

    def n_static(self) -> int:
        n = self["prompt.length"] - 1 - self["prompt.dynamic"]
        if n < 1 or self["prompt.dynamic"] < 1:
            raise ConfigError("prompt.length must leave >= 1 static and >= 1 dynamic token besides the state word")
        return n

    def backbone_config(self) -> BackboneConfig:
        gh, gw = self.grid()
        for word in (self["prompt.normal_word"], self["prompt.abnormal_word"]):
            if word not in VOCAB:
                raise ConfigError(f"state word {word!r} not in vocabulary {VOCAB}")
        return BackboneConfig(
            grid_h=gh, grid_w=gw,
            visual_dim=self["backbone.visual_dim"],
            text_embed_dim=self["backbone.text_embed_dim"],
            joint_dim=self["backbone.joint_dim"],
            n_layers=self["backbone.layers"],
            text_layers=self["backbone.text_layers"],
            prompt_length=self["prompt.length"],
            patch_pool=self["backbone.patch_pool"],
            smoothing=self["backbone.smoothing"],
            seed=seed_int(self["seed"], "backbone"),
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lam=self["loss.lambda"],
            focal_gamma=self["loss.focal_gamma"],
            focal_alpha=self["loss.focal_alpha"],
            dice_eps=self["loss.dice_eps"],
        )

    def model_options(self) -> ModelOptions:
        if self["utpa.k"] < 1 or self["utpa.tau"] <= 0 or self["map.sigma"] <= 0:
            raise ConfigError("utpa.k >= 1, utpa.tau > 0 and map.sigma > 0 are required")
        return ModelOptions(
            k=self["utpa.k"],
            tau=self["utpa.tau"],
            sigma=self["map.sigma"],
            use_ica=not self["ablate.ica"],
            use_fgp=not self["ablate.fgp"],
            dual_branch=self["ablate.dual_branch"],
        )

    def synth_config(self) -> SynthConfig:
        def names(key, allowed):
            items = tuple(x.strip() for x in self[key].split(",") if x.strip())
            if set(items) - set(allowed):
                raise ConfigError(f"{key} entries must come from {allowed}")
            return items

        textures = names("data.textures", TEXTURES)
        overrides = ()
        if self["data.test_textures"]:
            overrides = (("test", names("data.test_textures", TEXTURES)),)
        return SynthConfig(
            size=self["data.size"],
            textures=textures,
            defects=names("data.defects", DEFECTS),
            delta=self["data.delta"],
            area_min=self["data.area_min"],
            area_max=self["data.area_max"],
            noise=self["data.noise"],
            counts=(("train", self["data.n_train"]), ("val", self["data.n_val"]), ("test", self["data.n_test"])),
            anomaly_fraction=self["data.anomaly_fraction"],
            seed=seed_int(self["seed"], "data"),
            split_textures=overrides,
        )


def seed_int(seed: int, stream: str) -> int:
    """Deterministic 63-bit seed for a named sub-stream of the master seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(seed_int(seed, stream))
