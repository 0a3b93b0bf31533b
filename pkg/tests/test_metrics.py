import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vip2clip import metrics
from vip2clip.errors import NoPositives, NoRegions, ShapeMismatch, SingleClass

import oracles


def random_instance(rng, n=None, ties=False):
    n = n or int(rng.integers(4, 60))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 6, size=n).astype(float) if ties else rng.random(n)
    return scores, labels


def random_maps(rng, n_images=3, size=16):
    maps, masks = [], []
    for _ in range(n_images):
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            y, x = rng.integers(0, size - 4, size=2)
            h, w = rng.integers(1, 5, size=2)
            mask[y:y + h, x:x + w] = 1
        maps.append(rng.random((size, size)) + 0.5 * mask)
        masks.append(mask)
    return maps, masks


class TestAuroc:
    def test_perfect(self):
        assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
        assert metrics.auroc([0, 1], [0, 1]) == 1.0

    def test_all_tied_is_half(self):
        assert metrics.auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_against_pair_count(self, rng):
        for i in range(100):
            s, y = random_instance(rng, ties=i % 2 == 0)
            assert metrics.auroc(s, y) == pytest.approx(oracles.auroc_pairs(s, y), abs=1e-12)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=30), st.randoms())
    def test_label_flip_symmetry(self, scores, r):
        labels = [r.randint(0, 1) for _ in scores]
        labels[0], labels[1] = 0, 1
        flipped = [1 - y for y in labels]
        assert metrics.auroc(scores, labels) + metrics.auroc(scores, flipped) == pytest.approx(1.0, abs=1e-9)

    # integer scores keep the transform strictly monotone in floating point
    @given(st.lists(st.integers(-40, 40), min_size=2, max_size=30), st.randoms())
    def test_monotone_invariance(self, scores, r):
        labels = [r.randint(0, 1) for _ in scores]
        labels[0], labels[1] = 0, 1
        s = np.asarray(scores, dtype=float)
        assert metrics.auroc(np.exp(s / 10) + s ** 3, labels) == metrics.auroc(s, labels)

    def test_independent_labels_near_half(self, rng):
        scores, labels = rng.random(4000), rng.integers(0, 2, size=4000)
        assert abs(metrics.auroc(scores, labels) - 0.5) <= 0.03

    def test_single_class(self):
        with pytest.raises(SingleClass):
            metrics.auroc([0.1, 0.2], [1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            metrics.auroc([0.1, 0.2], [1])


class TestAveragePrecision:
    def test_hand_case(self):
        # ranks: 0.9 (pos), 0.8 (neg), 0.7 (pos): 0.5 * 1 + 0.5 * 2/3
        assert metrics.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6)

    def test_against_enumeration(self, rng):
        for i in range(100):
            s, y = random_instance(rng, ties=i % 2 == 0)
            assert metrics.average_precision(s, y) == pytest.approx(oracles.ap_enumerate(list(s), list(y)), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 5, 40])
    def test_single_positive_last(self, n):
        scores = np.linspace(1, 0, n)
        labels = np.zeros(n, dtype=int)
        labels[-1] = 1
        assert metrics.average_precision(scores, labels) == pytest.approx(1 / n)

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            metrics.average_precision([0.1, 0.2], [0, 0])


class TestF1:
    def test_against_scan(self, rng):
        for i in range(100):
            s, y = random_instance(rng, ties=i % 2 == 0)
            best, thr = metrics.f1_max(s, y)
            ref_best, ref_thr = oracles.f1_scan(list(s), list(y))
            assert best == pytest.approx(ref_best, abs=1e-12)
            assert thr == ref_thr

    def test_all_tied_predicts_everything(self):
        labels = [1, 0, 0, 1, 0, 0, 0]
        p = 2 / 7
        assert metrics.f1_max([0.3] * 7, labels)[0] == pytest.approx(2 * p / (p + 1))

    def test_separable(self):
        assert metrics.f1_max([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == (1.0, 0.8)


class TestAupro:
    def test_perfect_map(self):
        mask = np.zeros((10, 10))
        mask[2:5, 3:7] = 1
        assert metrics.aupro([mask.copy()], [mask]) == pytest.approx(1.0)

    def test_constant_map(self):
        mask = np.zeros((10, 10))
        mask[2:5, 3:7] = 1
        assert metrics.aupro([np.full((10, 10), 0.4)], [mask]) == pytest.approx(0.15)

    def test_half_the_regions_found(self):
        mask = np.zeros((20, 20))
        mask[1:4, 1:4] = 1
        mask[10:14, 10:14] = 1
        m = np.zeros((20, 20))
        m[1:4, 1:4] = 1
        # the missed region scores below every normal pixel
        m[10:14, 10:14] = -1
        assert metrics.aupro([m], [mask]) == pytest.approx(0.5)

    def test_against_naive(self, rng):
        for _ in range(100):
            maps, masks = random_maps(rng, n_images=int(rng.integers(1, 4)), size=12)
            assert metrics.aupro(maps, masks) == pytest.approx(oracles.aupro_naive(maps, masks), abs=1e-9)

    @pytest.mark.parametrize("a,b", [(2.0, 0.0), (0.5, -3.0), (10.0, 7.0)])
    def test_affine_invariance(self, rng, a, b):
        maps, masks = random_maps(rng)
        ref = metrics.aupro(maps, masks)
        assert metrics.aupro([a * m + b for m in maps], masks) == pytest.approx(ref, abs=1e-9)

    def test_no_regions(self):
        with pytest.raises(NoRegions):
            metrics.aupro([np.ones((4, 4))], [np.zeros((4, 4))])

    def test_curve_monotone(self, rng):
        maps, masks = random_maps(rng)
        fpr, pro = metrics.pro_curve(maps, masks)
        assert fpr[0] == 0.0 and pro[0] == 0.0
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(pro) >= 0)

    def test_integrate_limited_interpolates(self):
        assert metrics.integrate_limited([0, 1], [0, 1], 0.5) == pytest.approx(0.125)


class TestReport:
    def test_evaluate_and_csv(self, rng):
        maps, masks = random_maps(rng, n_images=4)
        rep = metrics.evaluate([0.1, 0.9, 0.4, 0.7], [0, 1, 0, 1], maps, masks)
        assert rep.image_auroc == 1.0
        assert rep.n_images == 4 and rep.n_abnormal == 2
        lines = rep.to_csv().splitlines()
        assert lines[0] == "metric,value" and len(lines) == 11
        assert "pixel_aupro" in rep.table()
