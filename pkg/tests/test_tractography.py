import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superdti import tractography as tg


def grid(shape):
    return np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).astype(float)


def straight_bundle(shape=(20, 20, 10), radius=3.0, fa_value=0.8):
    g = grid(shape)
    c = (np.asarray(shape[:2]) - 1) / 2
    inside = np.hypot(g[..., 0] - c[0], g[..., 1] - c[1]) <= radius
    fa = np.where(inside, fa_value, 0.0)
    v1 = np.zeros(shape + (3,))
    v1[inside] = (0, 0, 1)
    return v1, fa, inside


def two_region(angle_deg, shape=(9, 9, 12)):
    v1 = np.zeros(shape + (3,))
    v1[..., 2] = 1.0
    a = np.radians(angle_deg)
    v1[:, :, shape[2] // 2:] = (np.sin(a), 0.0, np.cos(a))
    return v1, np.full(shape, 0.8)


def random_field(seed, shape=(12, 12, 8)):
    rng = np.random.default_rng(seed)
    # smooth-ish directions so tracks have some length
    base = rng.normal(size=3)
    v1 = base + 0.6 * rng.normal(size=shape + (3,))
    v1 /= np.linalg.norm(v1, axis=-1, keepdims=True)
    fa = rng.uniform(0, 0.9, size=shape)
    return v1, fa


class TestSeeding:
    def test_all_zero(self):
        assert tg.brute_force_seed(np.zeros((4, 4, 4))).shape == (0, 3)

    def test_uniform(self):
        fa = np.zeros((5, 5, 5))
        fa.flat[:10] = 0.8
        assert len(tg.brute_force_seed(fa)) == 10

    def test_threshold_inclusive(self):
        fa = np.zeros((3, 3, 3))
        fa[1, 1, 1] = 0.2
        np.testing.assert_array_equal(tg.brute_force_seed(fa, 0.2), [[1.0, 1.0, 1.0]])


class TestStraightBundle:
    def test_one_streamline_per_seed(self):
        v1, fa, inside = straight_bundle()
        sls = tg.track_volume(v1, fa)
        assert tg.count_fibers(sls) == int(inside.sum())

    def test_segments_span_the_volume(self):
        v1, fa, _ = straight_bundle()
        for sl in tg.track_volume(v1, fa):
            p = sl.points
            np.testing.assert_allclose(p[:, :2], np.broadcast_to(sl.seed[:2], (len(p), 2)), atol=1e-9)
            assert p[0, 2] == pytest.approx(-0.5, abs=1e-5)
            assert p[-1, 2] == pytest.approx(9.5, abs=1e-5)
            assert sl.termination == ("boundary", "boundary")

    def test_physical_coordinates(self):
        v1, fa, _ = straight_bundle()
        a = tg.track_volume(v1, fa)
        b = tg.track_volume(v1, fa, spacing=(2.0, 2.0, 3.0))
        np.testing.assert_allclose(b[0].points, a[0].points * [2.0, 2.0, 3.0])

    def test_short_tracks_dropped(self):
        v1, fa, _ = straight_bundle((6, 6, 1))
        assert tg.track_volume(v1, fa) == []


class TestGates:
    def test_ninety_degrees_blocks(self):
        v1, fa = two_region(90)
        sls = tg.fact_track(v1, fa, [[4, 4, 2]])
        assert sls[0].points[:, 2].max() == pytest.approx(5.5, abs=1e-5)
        assert sls[0].termination[1] == "angle"

    def test_thirty_five_degrees_passes(self):
        v1, fa = two_region(35)
        sls = tg.fact_track(v1, fa, [[4, 4, 2]])
        assert sls[0].points[:, 2].max() > 6.5
        assert sls[0].termination[1] != "angle"

    def test_fa_gate(self):
        v1, fa, _ = straight_bundle((9, 9, 10))
        fa[:, :, 7] = 0.19
        sls = tg.fact_track(v1, fa, [[4, 4, 2]])
        assert sls[0].points[:, 2].max() == pytest.approx(6.5, abs=1e-5)
        assert sls[0].termination[1] == "low-FA"

    def test_max_length(self):
        # circular field: tracks would orbit forever
        shape = (30, 30, 3)
        g = grid(shape)
        d = g[..., :2] - 14.5
        v1 = np.stack([-d[..., 1], d[..., 0], np.zeros(shape)], -1)
        v1 /= np.maximum(np.linalg.norm(v1, axis=-1, keepdims=True), 1e-12)
        fa = np.full(shape, 0.8)
        sls = tg.fact_track(v1, fa, [[14.5 + 8, 14.5, 1]], angle_thresh=89, max_length=60)
        assert sls[0].length() <= 60 + 1e-9
        assert "max-length" in sls[0].termination


class TestInvariants:
    @settings(max_examples=10)
    @given(st.integers(0, 10_000))
    def test_threshold_monotonicity(self, seed):
        v1, fa = random_field(seed)
        seeds = tg.brute_force_seed(fa, 0.1)
        counts = [len(tg.fact_track(v1, fa, seeds, fa_thresh=t)) for t in (0.1, 0.2, 0.3, 0.4, 0.5)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))
        counts = [len(tg.fact_track(v1, fa, seeds, angle_thresh=a)) for a in (10, 20, 30, 40, 60)]
        assert all(a <= b for a, b in zip(counts, counts[1:]))

    @given(st.integers(0, 10_000))
    def test_geometry(self, seed):
        v1, fa = random_field(seed)
        shape = np.array(fa.shape)
        diag = np.sqrt(3.0)
        for sl in tg.track_volume(v1, fa):
            p = sl.points
            assert len(p) >= 2
            assert np.all(p >= -0.5 - 1e-9) and np.all(p <= shape - 0.5 + 1e-9)
            assert np.all(np.linalg.norm(np.diff(p, axis=0), axis=1) <= diag + 1e-9)
            mids = np.floor(0.5 * (p[1:] + p[:-1]) + 0.5).astype(int)
            assert np.all(fa[mids[:, 0], mids[:, 1], mids[:, 2]] >= 0.2)
            assert set(sl.termination) <= {"low-FA", "angle", "boundary", "max-length"}

    @given(st.integers(0, 10_000))
    def test_sign_flip_symmetry(self, seed):
        v1, fa = random_field(seed)
        a = tg.track_volume(v1, fa)
        b = tg.track_volume(-v1, fa)
        assert len(a) == len(b)
        for sa, sb in zip(a, b):
            np.testing.assert_allclose(sa.points, sb.points[::-1], atol=1e-9)


class TestRoi:
    def test_whole_and_empty(self):
        v1, fa, _ = straight_bundle()
        sls = tg.track_volume(v1, fa)
        assert len(tg.roi_filter(sls, np.ones(fa.shape, bool))) == len(sls)
        assert tg.roi_filter(sls, np.zeros(fa.shape, bool)) == []

    def test_single_voxel_selects_column(self):
        v1, fa, _ = straight_bundle()
        sls = tg.track_volume(v1, fa)
        roi = np.zeros(fa.shape, bool)
        roi[10, 9, 4] = True
        kept = tg.roi_filter(sls, roi)
        assert [s.seed[:2] for s in kept] == [(10, 9)] * 10

    def test_anisotropic_spacing(self):
        v1, fa, _ = straight_bundle()
        sp = (2.0, 2.0, 3.0)
        sls = tg.track_volume(v1, fa, spacing=sp)
        roi = np.zeros(fa.shape, bool)
        roi[10, 9, 4] = True
        assert len(tg.roi_filter(sls, roi, sp)) == 10


class TestColormapDirections:
    def test_oblique_bundle_recovered(self):
        shape = (40, 40, 4)
        g = grid(shape)
        v = np.array([0.6, -0.8, 0.0])
        d = g - [20, 20, 1.5]
        perp = np.linalg.norm(d - (d @ v)[..., None] * v, axis=-1)
        tube = perp <= 2.5
        fa = np.where(tube, 0.7, 0.0)
        rec = tg.directions_from_colormap(np.abs(v) * fa[..., None], fa)
        assert np.mean(np.abs(rec[tube] @ v) > 0.999) > 0.95

    def test_arc_recovered(self):
        shape = (40, 40, 4)
        g = grid(shape)
        th = np.arctan2(g[..., 1] - 20, g[..., 0] - 20)
        arc = (np.abs(np.hypot(g[..., 0] - 20, g[..., 1] - 20) - 12) <= 2) & (th < 0)
        t = np.stack([-np.sin(th), np.cos(th), 0 * th], -1)
        fa = np.where(arc, 0.7, 0.0)
        rec = tg.directions_from_colormap(np.abs(t) * fa[..., None], fa)
        assert np.all(np.abs(np.sum(rec * t, -1))[arc] > 0.95)
