"""Command-line entry point: ``vip2clip <command> [options]``.

Commands: gen-data, train, eval, infer, gradcheck, sweep. Every command that
writes a run directory also writes ``config.txt`` there (the full resolved
configuration, version header included), so a run can be repeated exactly.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.
"""
import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from vip2clip import __version__, checkpoint, data
from vip2clip.backbone import BackboneConfig, FrozenBackbone, build_backbone
from vip2clip.config import PRESET_KEY, RunConfig, substream
from vip2clip.errors import ConfigError, IoError, ValidationError, Vip2ClipError
from vip2clip.model import ModelOptions, predict
from vip2clip.training import TrainConfig, encode_samples, evaluate_model, gradcheck, train
from vip2clip.vip_prompt import PromptState, init_prompt_state

log = logging.getLogger("vip2clip")

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "checkpoint.vpck"


# ----------------------------------------------------------------- helpers


def load_config(args) -> RunConfig:
    path = args.config
    if path is None and getattr(args, "checkpoint", None):
        sibling = Path(args.checkpoint).parent / CONFIG_NAME
        if sibling.exists():
            path = sibling
    cfg = RunConfig.load(path) if path else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


def run_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def split_samples(cfg: RunConfig, splits: tuple, cache: dict | None = None) -> dict:
    """Samples per split from ``data.root`` if set, else generated in memory."""
    root = cfg["data.root"]
    if root:
        out = {}
        for split in splits:
            sub = Path(root) / split
            out[split] = data.load_mvtec_layout(sub if sub.is_dir() else root, size=cfg["data.size"])
        return out
    synth = cfg.synth_config()
    if cache is not None and synth in cache:
        return cache[synth]
    generated = data.generate(synth)
    if cache is not None:
        cache[synth] = generated
    return generated


def fresh_state(cfg: RunConfig, bb: FrozenBackbone) -> PromptState:
    hidden = cfg["prompt.meta_hidden"] or None
    return init_prompt_state(bb, cfg.n_static(), cfg["prompt.dynamic"],
                             cfg["prompt.normal_word"], cfg["prompt.abnormal_word"],
                             rng=substream(cfg["seed"], "init"), hidden=hidden)


def load_model(cfg: RunConfig, ckpt_path) -> tuple[FrozenBackbone, PromptState]:
    """Backbone and prompt state from a checkpoint, or a fresh seeded pair if none is given."""
    bcfg = cfg.backbone_config()
    if ckpt_path is None:
        bb = build_backbone(bcfg)
        return bb, fresh_state(cfg, bb)
    tensors = checkpoint.load(ckpt_path)
    bb = FrozenBackbone.from_tensors(bcfg, tensors)
    ps = PromptState.from_checkpoint(tensors)
    if ps.prompt_length != bcfg.prompt_length:
        raise ConfigError(f"checkpoint prompt length {ps.prompt_length} != config {bcfg.prompt_length}")
    return bb, ps


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch"],
        lr=cfg["train.lr"],
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        seed=cfg["seed"],
        loss=cfg.loss_config(),
        options=cfg.model_options(),
        eval_fpr_limit=cfg["eval.fpr_limit"],
        eval_thresholds=cfg["eval.thresholds"],
    )


def save_model(path, bb: FrozenBackbone, ps: PromptState) -> None:
    checkpoint.save(path, {**bb.tensors(), **ps.to_checkpoint()})


def run_training(cfg: RunConfig, out: Path | None = None, cache: dict | None = None):
    tc = train_config(cfg)
    splits = split_samples(cfg, ("train", "val"), cache)
    bb = build_backbone(cfg.backbone_config())
    ps = fresh_state(cfg, bb)
    log_path = out / "train_log.csv" if out is not None else None
    result = train(tc, bb, ps, encode_samples(bb, splits["train"]), encode_samples(bb, splits["val"]),
                   log_path=log_path, shuffle_rng=substream(cfg["seed"], "shuffle"))
    return bb, result


def run_eval(cfg: RunConfig, bb: FrozenBackbone, ps: PromptState, cache: dict | None = None):
    test = split_samples(cfg, ("test",), cache)["test"]
    ev = evaluate_model(ps, bb, encode_samples(bb, test), cfg.model_options(),
                        cfg["eval.fpr_limit"], cfg["eval.thresholds"])
    if ev.report is None:
        raise ValidationError("evaluation needs both normal and abnormal test images")
    return ev.report


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = run_dir(args.out)
    splits = data.generate_to_disk(cfg.synth_config(), out)
    cfg.save(out / CONFIG_NAME)
    for name, samples in splits.items():
        print(f"{name}: {len(samples)} images ({sum(s.label for s in samples)} abnormal)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = run_dir(args.out)
    cfg.save(out / CONFIG_NAME)
    bb, result = run_training(cfg, out)
    save_model(out / CHECKPOINT_NAME, bb, result.state)
    print(f"trained {cfg['train.epochs']} epochs in {result.seconds:.1f}s -> {out / CHECKPOINT_NAME}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    out = run_dir(args.out)
    cfg.save(out / CONFIG_NAME)
    bb, ps = load_model(cfg, args.checkpoint)
    report = run_eval(cfg, bb, ps)
    (out / "eval.csv").write_text(report.to_csv())
    print(report.table())
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args)
    out = run_dir(args.out)
    cfg.save(out / CONFIG_NAME)
    bb, ps = load_model(cfg, args.checkpoint)
    source = args.input or cfg["data.root"]
    if not source:
        raise ConfigError("infer needs --input or data.root")
    samples = data.load_mvtec_layout(source, size=cfg["data.size"])
    opts = cfg.model_options()
    rows = []
    for s in samples:
        res = predict(ps, bb, bb.encode_image(s.image), opts)
        data.save_png(out / f"{s.id}_map.png", np.clip(res.map, 0.0, 1.0))
        rows.append((s.id, repr(float(res.score)), s.label))
    with open(out / "scores.csv", "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(["id", "score", "label"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} maps and scores to {out}")
    return 0


def toy_setup(seed: int):
    """Gradient-check instance: 8x8 grid, D=32, C=16, N=2, two 32x32 images."""
    bcfg = BackboneConfig(grid_h=8, grid_w=8, visual_dim=32, text_embed_dim=16, joint_dim=16, n_layers=2,
                          seed=seed)
    bb = build_backbone(bcfg).astype(np.float64)
    ps = init_prompt_state(bb, rng=substream(seed, "init"))
    synth = data.SynthConfig(size=32, area_min=16, area_max=120, counts=(("train", 2),),
                             anomaly_fraction=0.5, seed=seed)
    return bb, ps, data.generate(synth)["train"]


def cmd_gradcheck(args) -> int:
    cfg = load_config(args)
    bb, ps, samples = toy_setup(cfg["seed"])
    opts = ModelOptions(k=min(cfg["utpa.k"], 16), tau=cfg["utpa.tau"], sigma=cfg["map.sigma"],
                        use_ica=not cfg["ablate.ica"], use_fgp=not cfg["ablate.fgp"],
                        dual_branch=cfg["ablate.dual_branch"])
    report = gradcheck(ps, bb, samples, opts, cfg.loss_config(), n_params_sampled=args.samples,
                       seed=cfg["seed"])
    text = report.to_text()
    if args.out:
        out = run_dir(args.out)
        cfg.save(out / CONFIG_NAME)
        (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    return 0 if report.passed else 1


def cmd_sweep(args) -> int:
    base = load_config(args)
    out = run_dir(args.out)
    base.save(out / CONFIG_NAME)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    # validate every value before spending time on training
    configs = []
    for value in values:
        cfg = base.copy()
        cfg.set(args.key, value)
        if args.key != PRESET_KEY:
            cfg.backbone_config(), cfg.model_options(), cfg.synth_config(), train_config(cfg)
        configs.append(cfg)
    metrics_wanted = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    cache: dict = {}
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["key", "value", "metric", "result"])
        for value, cfg in zip(values, configs):
            start = time.perf_counter()
            bb, result = run_training(cfg, cache=cache)
            report = run_eval(cfg, bb, result.state, cache)
            rows = dict(report.rows())
            names = metrics_wanted or list(rows)
            unknown = [n for n in names if n not in rows]
            if unknown:
                raise ConfigError(f"unknown metric(s) {unknown}; choose from {list(rows)}")
            for name in names:
                writer.writerow([args.key, value, name, repr(float(rows[name]))])
            fh.flush()
            log.info("%s=%s done in %.1fs", args.key, value, time.perf_counter() - start)
            print(f"{args.key}={value}: " + ", ".join(f"{n}={float(rows[n]):.4f}" for n in names))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vip2clip", description="Prompt-learning anomaly detection at desk scale.")
    parser.add_argument("--version", action="version", version=f"vip2clip {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="key=value config file (defaults apply for missing keys)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen-data", help="write the synthetic train/val/test corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the prompt parameters, write checkpoint and log")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or the untrained init) on the test split")
    common(p)
    p.add_argument("--checkpoint", help="VPCK checkpoint; omitted = seeded untrained initialization")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write anomaly maps and image scores")
    common(p)
    p.add_argument("--checkpoint", help="VPCK checkpoint; omitted = seeded untrained initialization")
    p.add_argument("--input", help="MVTec-style directory (defaults to data.root)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient on a toy instance")
    common(p, out_required=False)
    p.add_argument("--samples", type=int, default=8, help="coordinates probed per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train+eval once per value of one config key")
    common(p)
    p.add_argument("key", help=f"config key to sweep (or {PRESET_KEY})")
    p.add_argument("values", help="comma-separated values")
    p.add_argument("--metrics", help="comma-separated metric names to record (default: all)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Vip2ClipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
