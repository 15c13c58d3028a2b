import numpy as np
import pytest
from PIL import Image

from qanet import dataio, model
from qanet.dataio import (Checkpoint, CheckpointError, SceneLoadError, SynthSpec, box_downsample,
                          checkpoint_bytes, extract_patches, load_checkpoint, load_probav_scene, read_png16,
                          save_checkpoint, save_scene, synth_scene, write_png16)
from qanet.model import ModelConfig
from qanet.tensor import no_grad


def write_imgset(path, n=9, lr_side=128, r=3, hr=True, seed=0):
    rng = np.random.default_rng(seed)
    path.mkdir(parents=True)
    for i in range(n):
        Image.fromarray(rng.integers(0, 2 ** 14, (lr_side, lr_side), dtype=np.uint16)).save(path / f"LR{i:03d}.png")
        Image.fromarray((rng.random((lr_side, lr_side)) > 0.2).astype(np.uint8) * 255).save(path / f"QM{i:03d}.png")
    if hr:
        Image.fromarray(rng.integers(0, 2 ** 14, (lr_side * r,) * 2, dtype=np.uint16)).save(path / "HR.png")
        Image.fromarray(np.ones((lr_side * r,) * 2, bool)).save(path / "SM.png")
    return path


class TestPNG:
    def test_16bit_roundtrip(self, tmp_path):
        a = np.random.default_rng(0).integers(0, 65536, (7, 5)).astype(np.float64) / 65535
        write_png16(tmp_path / "a.png", a)
        assert np.array_equal(read_png16(tmp_path / "a.png") / 65535.0, a)

    def test_rejects_8bit(self, tmp_path):
        Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "x.png")
        with pytest.raises(SceneLoadError, match="bit depth 8"):
            read_png16(tmp_path / "x.png")


class TestSceneDirectory:
    def test_probav_layout(self, tmp_path):
        scene = load_probav_scene(write_imgset(tmp_path / "RED" / "imgset0001"))
        assert scene.n_images == 9 and scene.hr.shape == (384, 384) and scene.band == "RED"
        assert scene.scale == 3 and set(np.unique(scene.qm[0])) <= {0, 1}
        assert 0.0 <= scene.lr[0].min() and scene.lr[0].max() <= 1.0

    def test_test_split_without_hr(self, tmp_path):
        scene = load_probav_scene(write_imgset(tmp_path / "s", n=3, lr_side=8, hr=False))
        assert not scene.has_truth and scene.sm is None

    def test_missing_qm_named(self, tmp_path):
        path = write_imgset(tmp_path / "s", n=4, lr_side=8)
        (path / "QM003.png").unlink()
        with pytest.raises(SceneLoadError, match="QM003.png"):
            load_probav_scene(path)

    def test_save_load_roundtrip(self, tmp_path):
        scene = synth_scene(SynthSpec(size=8, r=2, n_images=3, seed=4))
        scene.registered = True
        back = load_probav_scene(save_scene(scene, tmp_path / "s"))
        assert back.registered and back.n_images == 3
        assert np.max(np.abs(back.hr - scene.hr)) <= 0.5 / 65535 + 1e-12
        assert all(np.array_equal(a, b) for a, b in zip(back.qm, scene.qm))

    def test_hr_without_sm(self, tmp_path):
        path = write_imgset(tmp_path / "s", n=2, lr_side=8)
        (path / "SM.png").unlink()
        with pytest.raises(SceneLoadError, match="SM.png"):
            load_probav_scene(path)


class TestSynthetic:
    def test_clear_and_exact_downsample(self):
        scene = synth_scene(SynthSpec(size=12, r=3, n_images=4, cloud_fraction=0.0, seed=1))
        assert all(q.all() for q in scene.qm)
        for lr in scene.lr:
            assert np.array_equal(lr, np.clip(box_downsample(scene.hr, 3), 0, 1))

    def test_deterministic(self):
        spec = SynthSpec(size=10, r=2, n_images=5, cloud_fraction=0.3, shift_range=2, noise_sigma=0.01, seed=9)
        a, b = synth_scene(spec), synth_scene(spec)
        assert all(np.array_equal(x, y) for x, y in zip(a.lr + a.qm, b.lr + b.qm))
        assert np.array_equal(a.hr, b.hr)

    def test_cloud_fraction_bounds(self):
        with pytest.raises(ValueError):
            SynthSpec(cloud_fraction=1.0)
        scene = synth_scene(SynthSpec(size=32, r=2, n_images=6, cloud_fraction=0.3, seed=2))
        frac = 1 - np.mean([q.mean() for q in scene.qm])
        assert 0.1 < frac < 0.5


class TestPatches:
    def test_tiling_and_alignment(self):
        lr = [np.random.default_rng(0).random((128, 128))]
        hr = np.random.default_rng(1).random((384, 384))
        scene = dataio.Scene("s", lr, [np.ones((128, 128), np.uint8)], hr, np.ones((384, 384), np.uint8),
                             registered=True)
        patches = extract_patches(scene, 32, 32)
        assert len(patches) == 16
        for p in patches:
            y, x = p.offset
            assert np.array_equal(p.hr, hr[3 * y:3 * y + 96, 3 * x:3 * x + 96])
            assert np.array_equal(p.lr[0], lr[0][y:y + 32, x:x + 32])

    def test_clouded_hr_region_skipped(self):
        sm = np.ones((64, 64), np.uint8)
        sm[:32, :32] = 0
        scene = dataio.Scene("s", [np.zeros((32, 32))], [np.ones((32, 32))], np.zeros((64, 64)), sm,
                             registered=True)
        assert [p.offset for p in extract_patches(scene, 16)] == [(0, 16), (16, 0), (16, 16)]

    def test_requires_registration(self):
        scene = synth_scene(SynthSpec(size=8, r=2, n_images=2))
        with pytest.raises(ValueError, match="register"):
            extract_patches(scene, 4)


class TestCheckpoint:
    def make(self, cfg=None):
        cfg = cfg or ModelConfig.tiny()
        params = {k: v.data for k, v in model.init_params(cfg, 3).items()}
        m = {k: np.full_like(v, 0.5) for k, v in params.items()}
        return Checkpoint(cfg, params, m, {k: v * 2 for k, v in m.items()}, step=7, epoch=2,
                          rng_state={"a": 1}, extra={"note": "x"})

    def test_save_load_save_identical(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "a.qnt")
        back = load_checkpoint(tmp_path / "a.qnt")
        save_checkpoint(back, tmp_path / "b.qnt")
        assert (tmp_path / "a.qnt").read_bytes() == (tmp_path / "b.qnt").read_bytes()
        assert back.step == 7 and back.epoch == 2 and back.config == ck.config

    def test_forward_preserved(self, tmp_path):
        ck = self.make()
        save_checkpoint(ck, tmp_path / "a.qnt")
        back = load_checkpoint(tmp_path / "a.qnt")
        rng = np.random.default_rng(0)
        lr, qm = rng.random((2, 8, 8)), (rng.random((2, 8, 8)) > 0.3).astype(float)
        from qanet.tensor import Tensor
        with no_grad():
            a = model.forward(lr, qm, {k: Tensor(v) for k, v in ck.params.items()}, ck.config).data
            b = model.forward(lr, qm, {k: Tensor(v) for k, v in back.params.items()}, back.config).data
        assert np.array_equal(a, b)

    def test_config_mismatch(self, tmp_path):
        save_checkpoint(self.make(), tmp_path / "a.qnt")
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(tmp_path / "a.qnt", expected_config=ModelConfig.tiny(C=8))

    def test_corrupt_files(self, tmp_path):
        data = checkpoint_bytes(self.make())
        (tmp_path / "t.qnt").write_bytes(data[:-8])
        with pytest.raises(CheckpointError, match="payload"):
            load_checkpoint(tmp_path / "t.qnt")
        (tmp_path / "m.qnt").write_bytes(b"NOTMAGIC" + data[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "m.qnt")

    def test_parameter_set_must_match(self):
        ck = self.make()
        del ck.params["up.bias"]
        with pytest.raises(CheckpointError):
            checkpoint_bytes(ck)
