import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from superdti import metrics


def brute_nmse(img, ref):
    num = sum((a - b) ** 2 for a, b in zip(img.ravel(), ref.ravel()))
    den = sum(b * b for b in ref.ravel())
    return num / den


def brute_psnr(img, ref):
    d = [(a - b) ** 2 for a, b in zip(img.ravel(), ref.ravel())]
    mse = sum(d) / len(d)
    return 10 * math.log10(max(ref.ravel()) ** 2 / mse)


def brute_ssim(img, ref, L):
    """Direct 11x11 windowed sums at every valid centre."""
    r = np.arange(11) - 5
    g = np.exp(-(r ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(5, img.shape[0] - 5):
        for j in range(5, img.shape[1] - 5):
            x = img[i - 5:i + 6, j - 5:j + 6]
            y = ref[i - 5:i + 6, j - 5:j + 6]
            mx, my = np.sum(w * x), np.sum(w * y)
            vx = np.sum(w * (x - mx) ** 2)
            vy = np.sum(w * (y - my) ** 2)
            cxy = np.sum(w * (x - mx) * (y - my))
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestOracles:
    @pytest.mark.parametrize("seed", range(5))
    def test_against_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        ref = rng.uniform(0, 1, (16, 16))
        img = ref + rng.normal(0, 0.1, (16, 16))
        assert metrics.nmse(img, ref) == pytest.approx(brute_nmse(img, ref), rel=1e-12, abs=1e-12)
        assert metrics.psnr(img, ref) == pytest.approx(brute_psnr(img, ref), rel=1e-12, abs=1e-12)
        assert metrics.ssim(img, ref) == pytest.approx(brute_ssim(img, ref, ref.max()), abs=1e-9)

    def test_identity(self, rng):
        ref = rng.uniform(size=(16, 16))
        assert metrics.nmse(ref, ref) == 0.0
        assert metrics.psnr(ref, ref) == math.inf
        assert metrics.ssim(ref, ref) == 1.0


class TestNmse:
    def test_examples(self, rng):
        ref = rng.uniform(0.1, 1, (5, 5))
        assert metrics.nmse(np.zeros_like(ref), ref) == pytest.approx(1.0)
        assert metrics.nmse(2 * ref, ref) == pytest.approx(1.0)

    @given(st.floats(-3, 3))
    def test_scaling(self, a):
        ref = np.linspace(0.1, 1, 20)
        assert metrics.nmse(a * ref, ref) == pytest.approx((a - 1) ** 2, abs=1e-12)

    def test_zero_reference(self):
        with pytest.raises(ValueError):
            metrics.nmse(np.ones(4), np.zeros(4))

    def test_mask(self):
        ref = np.array([1.0, 2.0, 0.0])
        img = np.array([1.0, 2.0, 9.0])
        assert metrics.nmse(img, ref, mask=ref > 0) == 0.0


class TestPsnr:
    def test_zero_db(self):
        ref = np.array([1.0, 0.0, 0.5, 1.0])
        assert metrics.psnr(ref + 1.0, ref) == pytest.approx(0.0, abs=1e-12)

    def test_twenty_db(self):
        ref = np.linspace(0, 2, 50)
        assert metrics.psnr(ref + 0.2, ref) == pytest.approx(20.0, abs=1e-12)

    def test_decreases_with_noise(self):
        rng = np.random.default_rng(0)
        ref = rng.uniform(size=(64, 64))
        noise = rng.normal(size=ref.shape)
        vals = [metrics.psnr(ref + s * noise, ref) for s in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]


class TestSsim:
    def test_constant_closed_form(self):
        a, b = 0.3, 0.7
        L = b
        c1 = (0.01 * L) ** 2
        want = (2 * a * b + c1) / (a * a + b * b + c1)
        assert metrics.ssim(np.full((12, 12), a), np.full((12, 12), b)) == pytest.approx(want, rel=1e-12)
        assert metrics.ssim(np.full((12, 12), a), np.full((12, 12), a)) == pytest.approx(1.0, abs=1e-15)

    def test_noise_far_below_one(self, rng):
        ref = rng.uniform(size=(32, 32))
        v = metrics.ssim(ref + rng.normal(0, 2, ref.shape), ref)
        assert -1 < v < 0.5

    @given(st.integers(0, 1000))
    def test_symmetry_at_fixed_range(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 14, 14))
        assert metrics.ssim(a, b, data_range=1.0) == pytest.approx(metrics.ssim(b, a, data_range=1.0), abs=1e-14)

    def test_undersized(self):
        with pytest.raises(ValueError):
            metrics.ssim(np.ones((10, 10)), np.ones((10, 10)))

    def test_volume_slicewise(self, rng):
        ref = rng.uniform(size=(16, 16, 3))
        img = ref + rng.normal(0, 0.1, ref.shape)
        L = ref.max()
        want = np.mean([brute_ssim(img[..., z], ref[..., z], L) for z in range(3)])
        assert metrics.ssim(img, ref) == pytest.approx(want, abs=1e-9)

    def test_colormap_channel_mean(self, rng):
        ref = rng.uniform(size=(16, 16, 2, 3))
        img = ref + rng.normal(0, 0.1, ref.shape)
        L = ref.max()
        want = np.mean([metrics.ssim(img[..., c], ref[..., c], data_range=L) for c in range(3)])
        assert metrics.ssim(img, ref) == pytest.approx(want, abs=1e-14)


class TestRoiAndLesion:
    def test_roi_stats(self):
        labels = np.array([1, 1, 2, 2])
        ref = np.array([0.5, 0.5, 0.5, 0.5])
        out = metrics.roi_stats(np.array([0.55, 0.55, 0.5, 0.5]), labels, ref)
        assert out[1]["percent_error"] == pytest.approx(10.0)
        assert out[2]["percent_error"] == 0.0
        assert out[1]["mean"] == pytest.approx(0.55)

    def test_self_reference_zero(self, rng):
        labels = rng.integers(0, 4, 100)
        ref = rng.uniform(size=100)
        assert all(v["percent_error"] == 0 for v in metrics.roi_stats(ref, labels, ref).values())

    def test_empty_roi_warns(self):
        with pytest.warns(RuntimeWarning):
            out = metrics.roi_stats(np.ones(3), np.ones(3, int), np.ones(3), rois=[1, 7])
        assert list(out) == [1]

    def test_contrast_examples(self):
        les = np.array([True, False])
        bg = ~les
        assert metrics.lesion_contrast(np.array([0.1, 0.5]), les, bg)[0] == pytest.approx(-0.8)
        assert metrics.lesion_contrast(np.array([0.75, 0.5]), les, bg) == pytest.approx((0.5, 0.5))
        assert metrics.lesion_contrast(np.array([0.5, 0.5]), les, bg)[0] == 0.0

    def test_contrast_errors(self):
        with pytest.raises(ValueError):
            metrics.lesion_contrast(np.array([0.5, 0.0]), np.array([True, False]), np.array([False, True]))
        with pytest.raises(ValueError):
            metrics.lesion_contrast(np.ones(2), np.array([True, True]), np.array([False, True]))

    def test_background_ring(self):
        les = np.zeros((9, 9, 1), bool)
        les[4, 4] = True
        ring = metrics.surrounding_background(les, np.ones_like(les), width=1)
        assert ring.sum() == 8 and not ring[4, 4, 0]


class TestReport:
    def test_json_round_trip_with_inf(self, rng):
        ref = rng.uniform(size=(16, 16))
        rep = metrics.EvalReport("t", provenance={"seed": 1})
        rep.add("exact", "fa", ref, ref)
        text = rep.to_json()
        assert '"psnr": "inf"' in text
        back = metrics.EvalReport.from_json(text)
        assert back.scores["exact"]["fa"]["psnr"] == math.inf
        assert back.to_json() == text
