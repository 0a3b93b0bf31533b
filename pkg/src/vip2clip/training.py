"""Adam, the training loop, evaluation, and finite-difference gradient checking."""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from vip2clip import autograd as ag
from vip2clip import metrics
from vip2clip.backbone import FrozenBackbone
from vip2clip.errors import ConfigError, EmptyDataset, NonFiniteTensor, ShapeMismatch, SingleClass
from vip2clip.losses import LossConfig
from vip2clip.model import ModelOptions, forward, predict, sample_loss
from vip2clip.vip_prompt import TRAINABLE, PromptState

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "l_total", "l_global", "l_local", "val_pixel_auroc", "val_image_auroc"]


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam; returns new parameter arrays and advances ``state``."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    loss: LossConfig = LossConfig()
    options: ModelOptions = ModelOptions()
    eval_fpr_limit: float = 0.3
    eval_thresholds: int = 200

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class Encoded:
    """A sample with its (frozen) backbone output cached."""
    sample: object
    out: object


def encode_samples(bb: FrozenBackbone, samples) -> list[Encoded]:
    return [Encoded(s, bb.encode_image(s.image)) for s in samples]


def batch_loss(ps: PromptState, bb: FrozenBackbone, batch: list[Encoded], cfg: TrainConfig):
    """Mean (total, global, local) over the batch, summed in index order."""
    totals, globals_, locals_ = [], [], []
    for item in batch:
        fp = forward(ps, bb, item.out, cfg.options)
        t, g, l = sample_loss(fp, item.sample.mask, item.sample.label, cfg.loss)
        totals.append(t)
        globals_.append(g)
        locals_.append(l)
    return ag.reduce_mean(ag.stack(totals)), ag.reduce_mean(ag.stack(globals_)), ag.reduce_mean(ag.stack(locals_))


@dataclass
class EvalOutput:
    report: metrics.EvalReport | None
    scores: list
    maps: list


def evaluate_model(ps: PromptState, bb: FrozenBackbone, encoded: list[Encoded], opts: ModelOptions,
                   fpr_limit: float = 0.3, n_thresholds: int = 200) -> EvalOutput:
    results = [predict(ps, bb, e.out, opts) for e in encoded]
    scores = [r.score for r in results]
    maps = [r.map for r in results]
    labels = [e.sample.label for e in encoded]
    try:
        report = metrics.evaluate(scores, labels, maps, [e.sample.mask for e in encoded], fpr_limit, n_thresholds)
    except SingleClass:
        report = None
    return EvalOutput(report, scores, maps)


def pixel_and_image_auroc(ps, bb, encoded, opts) -> tuple[float, float]:
    results = [predict(ps, bb, e.out, opts) for e in encoded]
    flat = np.concatenate([r.map.ravel() for r in results])
    gt = np.concatenate([e.sample.mask.ravel() for e in encoded])
    labels = [e.sample.label for e in encoded]
    try:
        pix = metrics.auroc(flat, gt)
        img = metrics.auroc([r.score for r in results], labels)
    except SingleClass:
        return float("nan"), float("nan")
    return pix, img


@dataclass
class TrainResult:
    state: PromptState
    history: list = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: TrainConfig, bb: FrozenBackbone, ps: PromptState, train_set: list[Encoded],
          val_set: list[Encoded] | None = None, log_path=None, shuffle_rng=None) -> TrainResult:
    """Minimise the total loss over shuffled mini-batches; backbone stays frozen."""
    if not train_set:
        raise EmptyDataset("training set is empty")
    rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng(cfg.seed)
    adam = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = {k: np.array(v, dtype=np.float32) for k, v in ps.tensors().items()}
    history = []
    start = time.perf_counter()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(train_set))
            sums = np.zeros(3)
            n_batches = 0
            for b in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[b:b + cfg.batch_size]]
                leaves = ps.replace(**params).as_leaves()
                total, l_global, l_local = batch_loss(leaves, bb, batch, cfg)
                values = np.array([float(total.data), float(l_global.data), float(l_local.data)])
                if not np.all(np.isfinite(values)):
                    raise NonFiniteTensor(f"non-finite loss at epoch {epoch}, step {adam.step + 1}")
                total.backward()
                # tensors an ablation disconnects from the loss get no gradient and stay put
                grads = {k: getattr(leaves, k).grad for k in TRAINABLE}
                grads = {k: np.zeros_like(params[k]) if g is None else g for k, g in grads.items()}
                params = adam_step(adam, params, grads)
                sums += values
                n_batches += 1
            ps = ps.replace(**params)
            val_pix, val_img = (float("nan"), float("nan"))
            if val_set:
                val_pix, val_img = pixel_and_image_auroc(ps, bb, val_set, cfg.options)
            row = [epoch, adam.step, *(sums / n_batches), val_pix, val_img]
            history.append(dict(zip(LOG_HEADER, row)))
            log.info("epoch %d: total %.4f global %.4f local %.4f val pixel %.3f image %.3f",
                     epoch, *(sums / n_batches), val_pix, val_img)
            if writer is not None:
                writer.writerow([epoch, adam.step] + [repr(float(x)) for x in row[2:]])
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(ps, history, time.perf_counter() - start)


# --------------------------------------------------------------- gradcheck


def _five_point(f, x, i, h):
    x = x.copy()
    base = x.flat[i]
    vals = []
    for step in (2, 1, -1, -2):
        x.flat[i] = base + step * h
        vals.append(f(x))
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h), vals


def _central(f, x, i, h):
    x = x.copy()
    base = x.flat[i]
    x.flat[i] = base + h
    up = f(x)
    x.flat[i] = base - h
    down = f(x)
    return (up - down) / (2 * h), [up, down]


def fd_noise(magnitude: float, h: float) -> float:
    """Roundoff level of a float64 difference quotient.

    ``magnitude`` bounds the size of the terms summed into the function
    value (not the value itself, which may cancel to near zero).
    """
    return 2 * np.finfo(np.float64).eps * (abs(magnitude) + 1.0) / h


def relative_errors(analytic, numeric, scale: float, floor_frac: float = 1e-3,
                    noise: float = 0.0) -> np.ndarray:
    """max(|a - n| - noise, 0) / max(|a|, |n|, floor_frac * scale).

    ``scale`` is the largest analytic magnitude over the whole tensor, so
    coordinates that are tiny relative to their tensor are judged on an
    absolute scale instead of amplifying roundoff; ``noise`` is the
    finite-difference roundoff level (see :func:`fd_noise`), which no
    difference quotient can resolve.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return np.zeros(1)
    floor = max(floor_frac * scale, 1e-300)
    excess = np.maximum(np.abs(analytic - numeric) - noise, 0.0)
    return excess / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class GradcheckReport:
    per_tensor: dict            # name -> {"max", "median", "probes", "flips", "kinks"}
    per_node: dict              # op name -> max relative error of its local backward rule
    tol: float
    seconds: float = 0.0

    @property
    def failing_tensors(self) -> list[str]:
        return [k for k, v in self.per_tensor.items() if v["max"] > self.tol]

    @property
    def failing_nodes(self) -> list[str]:
        return [k for k, v in self.per_node.items() if v > self.tol]

    @property
    def max_error(self) -> float:
        return max(v["max"] for v in self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return not self.failing_tensors and not self.failing_nodes

    def to_text(self) -> str:
        lines = [f"{'tensor':<10}{'max_rel':>12}{'median_rel':>12}{'probes':>8}{'flips':>8}{'kinks':>8}"]
        for name, r in self.per_tensor.items():
            lines.append(f"{name:<10}{r['max']:>12.3e}{r['median']:>12.3e}{r['probes']:>8d}"
                         f"{r['flips']:>8d}{r['kinks']:>8d}")
        lines.append("")
        lines.append(f"{'node':<14}{'max_rel':>12}")
        for name, err in sorted(self.per_node.items()):
            flag = "  FAIL" if err > self.tol else ""
            lines.append(f"{name:<14}{err:>12.3e}{flag}")
        lines.append("")
        lines.append(f"tolerance {self.tol:g}: {'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s)")
        return "\n".join(lines)


def check_nodes(root: ag.Var, rng: np.random.Generator, probes: int = 4, h: float = 1e-5,
                tol: float = 1e-4) -> dict:
    """Verify each recorded op's backward rule in isolation against central differences."""
    worst: dict[str, float] = {}
    for node in ag.topo_order(root):
        if node.op is None:
            continue
        op = ag.OPS[node.op]
        arrays = [p.data for p in node.parents]
        u = rng.standard_normal(np.shape(node.data))
        grads = op.backward(u, node.saved, *arrays, **node.attrs)
        for i, parent in enumerate(node.parents):
            if not parent.requires_grad or grads[i] is None:
                continue

            def f(x, i=i):
                args = list(arrays)
                args[i] = x
                return float(np.sum(u * op.forward(*args, **node.attrs)[0]))

            def magnitude(x, i=i):
                args = list(arrays)
                args[i] = x
                return float(np.sum(np.abs(u * op.forward(*args, **node.attrs)[0])))

            x = np.array(arrays[i], dtype=np.float64)
            coords = rng.choice(x.size, size=min(probes, x.size), replace=False)
            numeric = np.array([_five_point(f, x, c, h)[0] for c in coords])
            full = np.asarray(grads[i])
            err = float(relative_errors(full.ravel()[coords], numeric, float(np.max(np.abs(full))),
                                        noise=fd_noise(magnitude(x), h)).max())
            worst[node.op] = max(worst.get(node.op, 0.0), err)
    return worst


def relu_signature(root: ag.Var) -> tuple:
    """Sign pattern of every ReLU input in the graph below ``root``."""
    return tuple(np.signbit(n.parents[0].data).tobytes() for n in ag.topo_order(root) if n.op == "relu")


def gradcheck(ps: PromptState, bb: FrozenBackbone, samples, opts: ModelOptions, loss_cfg: LossConfig,
              n_params_sampled: int = 8, h: float = 1e-4, tol: float = 1e-4, seed: int = 0,
              stencil: str = "five_point", node_checks: bool = True) -> GradcheckReport:
    """Compare backward() with finite differences of the total loss, in float64.

    Finite differences run with every Top-k selection frozen at its base
    value, matching the backward pass, which treats the selection as a
    constant. Probes whose perturbation would have changed a selection are
    still checked and reported in the ``flips`` column.

    A stencil that straddles a ReLU kink measures neither one-sided slope,
    so such probes are re-differenced with a step ten times smaller (down
    to ``h / 100``) and counted in the ``kinks`` column.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    bb64 = bb.astype(np.float64)
    encoded = encode_samples(bb64, samples)
    base = ps.as_arrays(np.float64)
    cfg = TrainConfig(loss=loss_cfg, options=opts)

    def run(state, frozen=None):
        fps = [forward(state, bb64, e.out, opts, None if frozen is None else frozen[i])
               for i, e in enumerate(encoded)]
        losses = [sample_loss(fp, e.sample.mask, e.sample.label, loss_cfg)[0] for fp, e in zip(fps, encoded)]
        selection = [fp.topk for fp in fps]
        return ag.reduce_mean(ag.stack(losses)), selection

    def free_selection(state):
        fps = [forward(state, bb64, e.out, opts) for e in encoded]
        return tuple(tuple(idx) for fp in fps for idx in fp.topk if idx is not None)

    leaves = base.as_leaves(np.float64)
    loss, frozen = run(leaves)
    kink_base = relu_signature(loss)
    selection = free_selection(base)
    loss.backward()
    diff = _five_point if stencil == "five_point" else _central

    per_tensor = {}
    for name in TRAINABLE:
        analytic_full = getattr(leaves, name).grad
        if analytic_full is None:
            # disconnected by an ablation: the finite differences must then vanish too
            analytic_full = np.zeros(np.shape(getattr(base, name)))
        x0 = np.array(getattr(base, name), dtype=np.float64)
        coords = rng.choice(x0.size, size=min(n_params_sampled, x0.size), replace=False)
        kept_a, kept_n, flips, kinks = [], [], 0, 0
        for c in coords:
            signatures = []

            def f(x):
                out = run(base.replace(**{name: x}).as_leaves(np.float64), frozen)[0]
                signatures.append(relu_signature(out))
                return float(out.data)

            for step in (h, h / 10, h / 100):
                signatures.clear()
                numeric, _ = diff(f, x0, c, step)
                if all(sig == kink_base for sig in signatures):
                    break
            kinks += step != h
            probe = x0.copy()
            probe.flat[c] += h
            flips += free_selection(base.replace(**{name: probe})) != selection
            kept_a.append(analytic_full.flat[c])
            kept_n.append(numeric)
        errs = relative_errors(kept_a, kept_n, float(np.max(np.abs(analytic_full))),
                               noise=fd_noise(float(loss.data), h))
        per_tensor[name] = {"max": float(errs.max()), "median": float(np.median(errs)),
                            "probes": len(kept_a), "flips": int(flips), "kinks": int(kinks)}

    per_node = check_nodes(loss, rng, tol=tol) if node_checks else {}
    return GradcheckReport(per_tensor, per_node, tol, time.perf_counter() - start)
