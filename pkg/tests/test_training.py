import dataclasses

import numpy as np
import pytest

from vip2clip import autograd as ag
from vip2clip.data import SynthConfig, generate
from vip2clip.errors import ConfigError, EmptyDataset, ShapeMismatch
from vip2clip.losses import LossConfig
from vip2clip.model import ModelOptions
from vip2clip.training import (LOG_HEADER, AdamState, TrainConfig, adam_step, batch_loss, encode_samples, fd_noise,
                               gradcheck, relative_errors, train)
from vip2clip.vip_prompt import TRAINABLE, init_prompt_state

OPTS = ModelOptions(k=10)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = {"x": rng.standard_normal(5)}
        out = adam_step(AdamState(), p, {"x": np.zeros(5)})
        np.testing.assert_array_equal(out["x"], p["x"])

    def test_first_step_is_signed_lr(self, rng):
        g = rng.standard_normal(6)
        st = AdamState(lr=0.01)
        out = adam_step(st, {"x": np.zeros(6)}, {"x": g})
        np.testing.assert_allclose(out["x"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert st.step == 1

    def test_hundred_steps_deterministic(self, rng):
        grads = [rng.standard_normal(4) for _ in range(100)]

        def run():
            st, p = AdamState(), {"x": np.ones(4)}
            for g in grads:
                p = adam_step(st, p, {"x": g})
            return p["x"]

        assert run().tobytes() == run().tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step(AdamState(), {"x": np.zeros(3)}, {"x": np.zeros(4)})


@pytest.fixture(scope="module")
def separable(toy_bb):
    sp = generate(SynthConfig(size=32, area_min=16, area_max=120, delta=0.6, counts=(("train", 16),), seed=3))
    return encode_samples(toy_bb, sp["train"])


@pytest.fixture(scope="module")
def pair(toy_samples):
    return toy_samples["train"][:2]


class TestTrain:
    def test_global_loss_decreases_with_lambda_zero(self, toy_bb, separable):
        ps = init_prompt_state(toy_bb, rng=np.random.default_rng(11))
        cfg = TrainConfig(epochs=5, batch_size=16, lr=1e-3, loss=LossConfig(lam=0.0), options=OPTS)
        hist = [h["l_global"] for h in train(cfg, toy_bb, ps, separable).history]
        assert hist[-1] < hist[0]
        for a, b in zip(hist, hist[1:]):
            assert b <= a * 1.05

    def test_deterministic(self, toy_bb, toy_samples):
        enc = encode_samples(toy_bb, toy_samples["train"])
        cfg = TrainConfig(epochs=2, batch_size=3, options=OPTS)

        def run():
            ps = init_prompt_state(toy_bb, rng=np.random.default_rng(11))
            return train(cfg, toy_bb, ps, enc, shuffle_rng=np.random.default_rng(0)).state.to_checkpoint()

        a, b = run(), run()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_log_and_history(self, toy_bb, toy_samples, tmp_path):
        enc = encode_samples(toy_bb, toy_samples["train"])
        val = encode_samples(toy_bb, toy_samples["test"])
        ps = init_prompt_state(toy_bb, rng=np.random.default_rng(11))
        res = train(TrainConfig(epochs=2, batch_size=4, options=OPTS), toy_bb, ps, enc, val, tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 3
        assert res.history[-1]["step"] == 4
        assert all(np.isfinite(h["l_total"]) for h in res.history)

    def test_parameters_move_backbone_does_not(self, toy_bb, toy_samples, toy_state):
        before = {k: v.copy() for k, v in toy_bb.tensors().items()}
        enc = encode_samples(toy_bb, toy_samples["train"])
        res = train(TrainConfig(epochs=1, batch_size=8, options=OPTS), toy_bb, toy_state, enc)
        for name in TRAINABLE:
            assert not np.array_equal(getattr(res.state, name), getattr(toy_state, name)), name
        for k, v in toy_bb.tensors().items():
            assert v.tobytes() == before[k].tobytes()

    def test_ablated_tensors_stay_fixed(self, toy_bb, toy_samples, toy_state):
        enc = encode_samples(toy_bb, toy_samples["train"])
        opts = ModelOptions(k=10, use_ica=False, use_fgp=False)
        res = train(TrainConfig(epochs=1, batch_size=8, options=opts), toy_bb, toy_state, enc)
        for name in ("meta_w1", "meta_b2", "W_q", "W_k", "W_v"):
            np.testing.assert_array_equal(getattr(res.state, name), getattr(toy_state, name))
        assert not np.array_equal(res.state.W_o, toy_state.W_o)

    def test_only_prompt_tensors_are_leaves(self, toy_bb, toy_samples, toy_state):
        enc = encode_samples(toy_bb, toy_samples["train"][:2])
        total, _, _ = batch_loss(toy_state.as_leaves(), toy_bb, enc, TrainConfig(options=OPTS))
        leaves = {n.name for n in ag.topo_order(total) if n.op is None and n.requires_grad}
        assert leaves == set(TRAINABLE)

    def test_empty(self, toy_bb, toy_state):
        with pytest.raises(EmptyDataset):
            train(TrainConfig(), toy_bb, toy_state, [])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)


class TestGradcheck:
    def test_passes_on_fresh_state(self, toy_bb, toy_state, pair):
        rep = gradcheck(toy_state, toy_bb, pair, OPTS, LossConfig(), n_params_sampled=4)
        assert rep.passed, rep.to_text()
        assert set(rep.per_tensor) == set(TRAINABLE)
        assert all(r["probes"] > 0 for r in rep.per_tensor.values())
        assert "PASS" in rep.to_text()

    def test_flags_corrupted_dice_rule(self, toy_bb, toy_state, pair, monkeypatch):
        good = ag.OPS["dice"]

        def bad(g, saved, pred, target, eps):
            gp, gt = good.backward(g, saved, pred, target, eps)
            return gp * 1.01, gt

        monkeypatch.setitem(ag.OPS, "dice", dataclasses.replace(good, backward=bad))
        rep = gradcheck(toy_state, toy_bb, pair, OPTS, LossConfig(), n_params_sampled=4)
        assert not rep.passed
        assert "dice" in rep.failing_nodes
        assert "FAIL" in rep.to_text()

    def test_ablated_graph(self, toy_bb, toy_state, pair):
        opts = ModelOptions(k=10, use_ica=False, use_fgp=False, dual_branch=True)
        rep = gradcheck(toy_state, toy_bb, pair, opts, LossConfig(), n_params_sampled=2)
        assert rep.passed, rep.to_text()

    def test_relative_error_floor(self):
        # tiny coordinates are judged against a fraction of the tensor scale
        err = relative_errors([1e-9], [2e-9], scale=1.0)
        assert err[0] == pytest.approx(1e-9 / 1e-3)
        assert relative_errors([1.0], [1.0 + 1e-12], 1.0, noise=fd_noise(1.0, 1e-4))[0] == 0.0
