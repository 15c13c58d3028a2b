import numpy as np
import pytest

from qanet import tensor as tn
from qanet.dataio import SynthSpec, synth_scene
from qanet.model import ModelConfig, init_params
from qanet.tensor import Tensor
from qanet.training import (DEFAULT_MILESTONES, AdamState, TrainConfig, TrainingDiverged, adam_step, loss_neg_cpsnr,
                            lr_at, train)


def registered_scenes(n=2, size=16, r=2, n_images=4, seed=0):
    out = []
    for i in range(n):
        s = synth_scene(SynthSpec(size=size, r=r, n_images=n_images, cloud_fraction=0.3, noise_sigma=0.01,
                                  seed=seed + i))
        s.registered = True
        out.append(s)
    return out


def tiny_run(**overrides):
    model_cfg = ModelConfig.tiny(T=3, C=4)
    base = dict(epochs=3, milestones=(2,), batch=2, T=3, patch=8, lr0=1e-3, seed=5)
    return model_cfg, TrainConfig(**{**base, **overrides})


class TestSchedule:
    def test_default_schedule_points(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-4
        assert lr_at(119, cfg) == 1e-4
        assert lr_at(120, cfg) == pytest.approx(8e-5, rel=1e-12)
        assert lr_at(500, cfg) == pytest.approx(1e-4 * 0.8 ** 7, rel=1e-12)
        assert lr_at(500, cfg) == pytest.approx(2.097e-5, abs=1e-8)
        assert cfg.milestones == DEFAULT_MILESTONES

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(milestones=(10, 5))
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=100)   # default milestones run past 100

    def test_scaled_schedule(self):
        cfg = TrainConfig.scaled(52)
        assert cfg.epochs == 52 and cfg.milestones == (12, 22, 30, 36, 40, 44, 48)


class TestLoss:
    def test_perfect_is_clamped(self):
        hr = np.random.default_rng(0).random((4, 4))
        sr = Tensor(hr.copy(), requires_grad=True)
        loss = loss_neg_cpsnr(sr, hr, np.ones((4, 4)))
        tn.backward(loss)
        assert loss.item() == pytest.approx(-100.0)
        assert np.all(sr.grad == 0)

    def test_matches_metric(self):
        from qanet.metrics import cpsnr
        rng = np.random.default_rng(1)
        hr, sr, mask = rng.random((6, 6)), rng.random((6, 6)), rng.random((6, 6)) > 0.3
        assert loss_neg_cpsnr(Tensor(sr), hr, mask).item() == pytest.approx(-cpsnr(hr, sr, mask), abs=1e-10)

    def test_finite_difference(self):
        rng = np.random.default_rng(2)
        hr, mask = rng.random((4, 4)), rng.random((4, 4)) > 0.2
        err = tn.grad_check(lambda s: loss_neg_cpsnr(s, hr, mask), hr + rng.normal(0, 0.05, (4, 4)))
        assert err < 1e-5

    def test_masked_pixels_ignored(self):
        rng = np.random.default_rng(3)
        hr, sr = rng.random((4, 4)), rng.random((4, 4))
        mask = np.ones((4, 4))
        mask[0] = 0
        sr2 = sr.copy()
        sr2[0] += 5
        assert loss_neg_cpsnr(Tensor(sr), hr, mask).item() == loss_neg_cpsnr(Tensor(sr2), hr, mask).item()


class TestAdam:
    def test_first_step_is_lr(self):
        p = {"w": Tensor([0.0])}
        new, state = adam_step(p, {"w": np.array([1.0])}, AdamState.zeros(p), lr=0.1)
        assert new["w"].data[0] == pytest.approx(-0.1, rel=1e-6)
        assert state.step == 1

    def test_zero_gradient_no_change(self):
        p = {"w": Tensor([1.5, -2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), lr=0.1)
        assert np.array_equal(new["w"].data, p["w"].data)

    def test_identical_sets_stay_identical(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=5)
        pa, pb = {"w": Tensor(w)}, {"w": Tensor(w.copy())}
        sa, sb = AdamState.zeros(pa), AdamState.zeros(pb)
        for _ in range(5):
            g = rng.normal(size=5)
            pa, sa = adam_step(pa, {"w": g}, sa, 0.01, 1e-3)
            pb, sb = adam_step(pb, {"w": g.copy()}, sb, 0.01, 1e-3)
        assert np.array_equal(pa["w"].data, pb["w"].data)

    def test_weight_decay_modes(self):
        p = {"w": Tensor([1.0])}
        coupled, _ = adam_step(p, {"w": np.zeros(1)}, AdamState.zeros(p), 0.1, weight_decay=0.5)
        decoupled, _ = adam_step(p, {"w": np.zeros(1)}, AdamState.zeros(p), 0.1, 0.5, decoupled=True)
        assert coupled["w"].data[0] == pytest.approx(0.9, rel=1e-6)
        assert decoupled["w"].data[0] == pytest.approx(1.0 - 0.1 * 0.5)


class TestTrain:
    def test_reproducible_and_finite(self):
        scenes = registered_scenes()
        mc, tc = tiny_run()
        a, b = train(scenes, mc, tc), train(scenes, mc, tc)
        assert a.history == b.history
        assert all(np.isfinite(h[2]) for h in a.history)
        assert all(np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k]) for k in a.checkpoint.params)

    def test_zero_lr_keeps_params(self):
        mc, tc = tiny_run(lr0=0.0, weight_decay=0.0, epochs=1, milestones=())
        res = train(registered_scenes(1), mc, tc)
        init = init_params(mc, tc.seed)
        assert all(np.array_equal(res.checkpoint.params[k], init[k].data) for k in init)

    def test_loss_decreases(self):
        mc, tc = tiny_run(epochs=30, milestones=(20,), lr0=3e-3, stride=4)
        res = train(registered_scenes(3), mc, tc)
        losses = [h[2] for h in res.history]
        assert np.mean(losses[-20:]) < np.mean(losses[:10])

    def test_checkpoints_and_resume(self):
        scenes = registered_scenes()
        mc, tc = tiny_run(epochs=4, milestones=(2,), checkpoint_every=2)
        seen = []
        full = train(scenes, mc, tc, on_checkpoint=seen.append)
        assert [c.epoch for c in seen] == [2, 4]
        resumed = train(scenes, mc, tc, resume=seen[0])
        assert all(np.array_equal(resumed.checkpoint.params[k], full.checkpoint.params[k])
                   for k in full.checkpoint.params)

    def test_trains_inside_no_grad(self):
        mc, tc = tiny_run(epochs=1, milestones=())
        with tn.no_grad():
            res = train(registered_scenes(1), mc, tc)
        init = init_params(mc, tc.seed)
        assert any(not np.array_equal(res.checkpoint.params[k], init[k].data) for k in init)

    def test_t_mismatch(self):
        mc, _ = tiny_run()
        with pytest.raises(ValueError, match="T="):
            train(registered_scenes(), mc, TrainConfig(T=2, epochs=1, milestones=()))

    def test_no_patches(self):
        mc, tc = tiny_run()
        with pytest.raises(ValueError, match="no training patches"):
            train(registered_scenes(n_images=2), mc, tc)

    def test_divergence_reported(self):
        mc, tc = tiny_run(lr0=1e300, epochs=1, milestones=())
        with pytest.raises(TrainingDiverged) as info:
            train(registered_scenes(1), mc, tc)
        assert info.value.state["epoch"] == 0
