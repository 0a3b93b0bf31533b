import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vip2clip import data
from vip2clip.errors import ConfigError, EmptyDataset, IoError, MissingMask, UnreadableImage

SMALL = data.SynthConfig(size=32, area_min=16, area_max=120, counts=(("train", 12), ("val", 4), ("test", 9)), seed=7)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class TestGenerate:
    def test_same_seed_same_png_corpus(self, tmp_path):
        data.generate_to_disk(SMALL, tmp_path / "a")
        data.generate_to_disk(SMALL, tmp_path / "b")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_changes_corpus(self):
        a = data.generate(SMALL)["train"][0].image
        b = data.generate(data.SynthConfig(**{**SMALL.__dict__, "seed": 8}))["train"][0].image
        assert a.tobytes() != b.tobytes()

    def test_counts_and_fraction(self):
        splits = data.generate(SMALL)
        for name, n in SMALL.counts:
            labels = [s.label for s in splits[name]]
            assert len(labels) == n
            assert abs(sum(labels) - n * SMALL.anomaly_fraction) <= 1

    def test_masks_and_labels_agree(self):
        for samples in data.generate(SMALL).values():
            for s in samples:
                assert s.image.shape == s.mask.shape == (32, 32)
                assert set(np.unique(s.mask)) <= {0.0, 1.0}
                assert s.label == int(s.mask.any())
                assert 0.0 <= s.image.min() and s.image.max() <= 1.0
                if s.label:
                    assert SMALL.area_min <= s.mask.sum() <= SMALL.area_max
                else:
                    assert s.defect == "good"

    def test_splits_disjoint(self):
        ids = [s.id for samples in data.generate(SMALL).values() for s in samples]
        assert len(ids) == len(set(ids))

    @given(st.integers(0, 2**31), st.sampled_from(data.DEFECTS), st.sampled_from(data.TEXTURES))
    def test_every_defect_respects_area(self, seed, defect, texture):
        img, mask = data.make_sample(texture, defect, np.random.default_rng(seed), SMALL)
        assert SMALL.area_min <= mask.sum() <= SMALL.area_max
        # pixels are stored at 8-bit precision
        np.testing.assert_array_equal(np.round(img * 255) / 255, img)

    def test_split_texture_override(self):
        cfg = data.SynthConfig(**{**SMALL.__dict__, "textures": ("grating",),
                                  "split_textures": (("test", ("checker",)),)})
        splits = data.generate(cfg)
        assert {s.cls for s in splits["train"]} == {"grating"}
        assert {s.cls for s in splits["test"]} == {"checker"}

    @pytest.mark.parametrize("bad", [dict(size=4), dict(area_min=50, area_max=10), dict(anomaly_fraction=1.0),
                                     dict(textures=("marble",)), dict(defects=()), dict(area_max=600)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            data.SynthConfig(**{"size": 32, "area_min": 16, "area_max": 120, **bad})


@pytest.fixture
def mvtec_tree(tmp_path, rng):
    root = tmp_path / "mvtec"
    for i in range(2):
        data.save_png(root / "bottle" / "test" / "good" / f"{i:03d}.png", rng.random((40, 40)))
    for i in range(2):
        mask = np.zeros((40, 40))
        mask[5 + i:15, 10:20] = 1
        data.save_png(root / "bottle" / "test" / "crack" / f"{i:03d}.png", rng.random((40, 40)))
        data.save_png(root / "bottle" / "ground_truth" / "crack" / f"{i:03d}_mask.png", mask)
    return root


class TestLoader:
    def test_two_good_two_defect(self, mvtec_tree):
        samples = data.load_mvtec_layout(mvtec_tree)
        assert len(samples) == 4
        assert sum(s.label for s in samples) == 2
        assert [s.defect for s in samples] == ["crack", "crack", "good", "good"]

    def test_resize_keeps_mask_binary(self, mvtec_tree):
        for s in data.load_mvtec_layout(mvtec_tree, size=32):
            assert s.image.shape == (32, 32)
            assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_missing_mask_names_path(self, mvtec_tree):
        (mvtec_tree / "bottle" / "ground_truth" / "crack" / "001_mask.png").unlink()
        with pytest.raises(MissingMask, match="001_mask.png"):
            data.load_mvtec_layout(mvtec_tree)

    def test_round_trip_through_disk(self, tmp_path):
        samples = data.generate(SMALL)["test"]
        data.write_split(samples, tmp_path)
        loaded = {s.id: s for s in data.load_mvtec_layout(tmp_path)}
        for s in samples:
            np.testing.assert_array_equal(loaded[s.id].image, s.image)
            np.testing.assert_array_equal(loaded[s.id].mask, s.mask)
            assert loaded[s.id].label == s.label

    def test_empty_and_missing_roots(self, tmp_path):
        with pytest.raises(EmptyDataset):
            data.load_mvtec_layout(tmp_path)
        with pytest.raises(IoError):
            data.load_mvtec_layout(tmp_path / "nope")

    def test_unreadable_image(self, tmp_path):
        bad = tmp_path / "x" / "test" / "good" / "a.png"
        bad.parent.mkdir(parents=True)
        bad.write_bytes(b"not a png")
        with pytest.raises(UnreadableImage):
            data.load_mvtec_layout(tmp_path)


class TestPng:
    def test_mask_round_trip_exact(self, tmp_path, rng):
        mask = (rng.random((17, 23)) > 0.6).astype(np.float32)
        data.save_png(tmp_path / "m.png", mask)
        back = data.read_png(tmp_path / "m.png")
        np.testing.assert_array_equal(back > 127, mask > 0.5)
        assert set(np.unique(back)) <= {0, 255}

    def test_eight_bit_values_round_trip(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(9, 9)) / 255.0
        data.save_png(tmp_path / "i.png", img)
        np.testing.assert_array_equal(data.read_png(tmp_path / "i.png") / 255.0, img)
