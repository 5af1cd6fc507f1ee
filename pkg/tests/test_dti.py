import numpy as np
import pytest
from hypothesis import given, strategies as st

from superdti import dti, phantom as ph
from superdti.dti import GradientScheme

from conftest import random_spd


def shell(m, seed=0, b=1000.0):
    return ph.generate_scheme(m, b, 1, seed=seed, iterations=300)


def ref_fa(evals):
    """Textbook FA in extended precision."""
    lam = np.maximum(np.asarray(evals, dtype=np.longdouble), 0)
    m = lam.mean(axis=-1, keepdims=True)
    num = np.sum((lam - m) ** 2, axis=-1)
    den = np.sum(lam ** 2, axis=-1)
    return np.sqrt(1.5 * num / den).astype(np.float64)


class TestGradientScheme:
    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError):
            GradientScheme([0, 1000], [[0, 0, 0], [0.9, 0, 0]])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            GradientScheme([0, 1000, 1000], [[0, 0, 0], [1, 0, 0]])

    def test_b0_bookkeeping(self):
        s = shell(6)
        assert s.n_b0 == 1 and s.n_weighted == 6 and len(s) == 7


class TestDesignMatrix:
    def test_row_layout(self):
        g = np.array([0.6, 0.0, 0.8])
        s = GradientScheme([1000.0], [g])
        X = dti.build_design_matrix(s, check_rank=False)
        want = [1, -1000 * 0.36, 0, -1000 * 0.64, 0, -2 * 1000 * 0.48, 0]
        np.testing.assert_allclose(X[0], want, rtol=1e-15)

    def test_full_rank_matches_svd(self):
        X = dti.build_design_matrix(shell(6))
        s = np.linalg.svd(X, compute_uv=False)
        assert s[-1] > 1e-8 * s[0]

    def test_too_few_measurements(self):
        s = GradientScheme([0, 1000, 1000], [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        with pytest.raises(dti.DegenerateSchemeError):
            dti.build_design_matrix(s)

    def test_coplanar_directions_rank_deficient(self):
        ang = np.linspace(0, np.pi, 8, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang), np.zeros(8)], 1)
        s = GradientScheme(np.r_[0, np.full(8, 1000.0)], np.vstack([[0, 0, 0], dirs]))
        with pytest.raises(dti.DegenerateSchemeError):
            dti.build_design_matrix(s)
        assert dti.scheme_condition_number(s) == np.inf


class TestSignalModel:
    def test_isotropic_signal(self):
        s = shell(6)
        d = 0.8e-3
        sig = dti.predict_signal(np.array([d, d, d, 0, 0, 0]), s, 2.0)
        np.testing.assert_allclose(sig, 2.0 * np.exp(-s.bvals * d), rtol=1e-14)

    def test_quadratic_form(self, rng):
        s = shell(12)
        t = random_spd(rng)
        D = dti.to_matrix(t)
        want = np.exp(-s.bvals * np.einsum("ni,ij,nj->n", s.bvecs, D, s.bvecs))
        np.testing.assert_allclose(dti.predict_signal(t, s), want, rtol=1e-13)

    def test_non_psd_warns(self):
        with pytest.warns(RuntimeWarning):
            dti.predict_signal(np.array([1e-3, 1e-3, -1e-3, 0, 0, 0]), shell(6))


class TestFit:
    def test_noiseless_recovery(self, rng):
        s = shell(30)
        t = random_spd(rng, 50)
        sig = dti.predict_signal(t, s, rng.uniform(0.5, 2, 50))
        field, valid = dti.fit_tensor_lls(sig, s)
        assert valid.all()
        np.testing.assert_allclose(field.tensor, t, atol=1e-15, rtol=1e-9)

    def test_six_direction_exact(self, rng):
        s = shell(6)
        t = random_spd(rng, 10)
        field, _ = dti.fit_tensor_lls(dti.predict_signal(t, s), s)
        np.testing.assert_allclose(field.tensor, t, rtol=1e-8, atol=1e-16)

    def test_zero_signal_voxel_skipped(self):
        s = shell(6)
        with pytest.raises(dti.VoxelSkipped):
            dti.fit_voxel(np.zeros(7), s)
        field, valid = dti.fit_tensor_lls(np.zeros((2, 7)), s)
        assert not valid.any() and np.all(field.tensor == 0)

    def test_negative_noise_is_clamped(self):
        s = shell(6)
        sig = dti.predict_signal(np.array([1e-3, 1e-3, 1e-3, 0, 0, 0]), s)
        sig[3] = -0.5
        field = dti.fit_voxel(sig, s)
        assert np.all(np.isfinite(field.tensor))

    def test_mismatched_length(self):
        with pytest.raises(ValueError):
            dti.fit_tensor_lls(np.ones((3, 5)), shell(6))


class TestEigen:
    def test_matches_lapack(self, rng):
        t = random_spd(rng, 500)
        eig = dti.eig3_sym(t)
        w, v = np.linalg.eigh(dti.to_matrix(t))
        np.testing.assert_allclose(eig.evals, w[:, ::-1], rtol=1e-10, atol=1e-18)
        dots = np.abs(np.einsum("nij,nij->nj", eig.evecs, v[:, :, ::-1]))
        np.testing.assert_allclose(dots, 1.0, atol=1e-7)

    @given(st.integers(0, 2 ** 31 - 1))
    def test_reconstruction_and_orthonormality(self, seed):
        rng = np.random.default_rng(seed)
        t = random_spd(rng, 20, lo=-1e-3)
        eig = dti.eig3_sym(t)
        V = eig.evecs
        np.testing.assert_allclose(np.einsum("nki,nkj->nij", V, V), np.broadcast_to(np.eye(3), V.shape),
                                   atol=1e-8)
        recon = np.einsum("nik,nk,njk->nij", V, eig.evals, V)
        np.testing.assert_allclose(recon, dti.to_matrix(t), atol=1e-12 * 3e-3)
        assert np.all(np.diff(eig.evals, axis=1) <= 0)

    def test_diagonal(self):
        eig = dti.eig3_sym(np.array([1.0, 3.0, 2.0, 0, 0, 0]))
        np.testing.assert_array_equal(eig.evals, [3.0, 2.0, 1.0])
        np.testing.assert_array_equal(np.abs(eig.v1), [0, 1, 0])

    def test_isotropic(self):
        eig = dti.eig3_sym(np.array([2.0, 2.0, 2.0, 0, 0, 0]))
        np.testing.assert_array_equal(eig.evals, [2.0, 2.0, 2.0])
        assert dti.fa(eig.evals) == 0.0

    def test_repeated_eigenvalue_uses_fallback(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        mat = q @ np.diag([2.0, 1.0, 1.0]) @ q.T
        eig = dti.eig3_sym(dti.from_matrix(mat))
        np.testing.assert_allclose(eig.evals, [2, 1, 1], atol=1e-13)
        assert abs(abs(eig.v1 @ q[:, 0]) - 1) < 1e-12
        recon = eig.evecs @ np.diag(eig.evals) @ eig.evecs.T
        np.testing.assert_allclose(recon, mat, atol=1e-13)

    def test_jacobi_agrees_with_lapack(self, rng):
        t = random_spd(rng, 50)
        lam, V = dti._jacobi_eigh(dti.to_matrix(t))
        np.testing.assert_allclose(np.sort(lam, axis=1), np.linalg.eigvalsh(dti.to_matrix(t)),
                                   rtol=1e-12, atol=1e-18)

    def test_sign_convention(self, rng):
        eig = dti.eig3_sym(random_spd(rng, 100))
        idx = np.argmax(np.abs(eig.evecs), axis=1)
        big = np.take_along_axis(eig.evecs, idx[:, None, :], axis=1)
        assert np.all(big >= 0)

    def test_negative_eigenvalue_flagged(self):
        eig = dti.eig3_sym(np.array([1e-3, 1e-3, -1e-4, 0, 0, 0]))
        assert eig.negative.item()


class TestMaps:
    def test_fa_extended_precision(self, rng):
        eig = dti.eig3_sym(random_spd(rng, 200))
        np.testing.assert_allclose(dti.fa(eig.evals), ref_fa(eig.evals), rtol=1e-12)

    def test_fa_examples(self):
        assert dti.fa(np.array([1.0, 0, 0])) == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(dti.fa(np.array([1.7e-3, 0.3e-3, 0.3e-3])),
                                   ref_fa([1.7e-3, 0.3e-3, 0.3e-3]), rtol=1e-14)
        assert dti.fa(np.zeros(3)) == 0.0

    @given(st.lists(st.floats(-1e-3, 3e-3), min_size=3, max_size=3))
    def test_fa_bounded(self, lam):
        v = float(dti.fa(np.sort(np.array(lam))[::-1]))
        assert 0.0 <= v <= 1.0

    def test_md_trace(self, rng):
        t = random_spd(rng, 50)
        np.testing.assert_allclose(dti.md(dti.eig3_sym(t).evals), t[:, :3].mean(axis=1), rtol=1e-12)

    def test_colormap(self):
        np.testing.assert_allclose(dti.colormap_voxel(np.array([0, -1.0, 0]), 0.5), [0, 0.5, 0])

    def test_foreground_mask(self):
        b0 = np.zeros((10, 10, 2))
        b0[2:8, 2:8] = 1.0
        np.testing.assert_array_equal(dti.foreground_mask(b0), b0 > 0)

    def test_compute_maps_noiseless(self):
        s = shell(20)
        p = ph.generate_phantom(ph.default_phantom_spec((32, 32, 16), seed=1))
        d = ph.synthesize_dwi(p.field, s)
        maps = dti.compute_maps(d)
        np.testing.assert_array_equal(maps.mask, p.mask)
        np.testing.assert_allclose(maps.fa, p.fa, atol=1e-9)
        np.testing.assert_allclose(maps.md, p.md, atol=1e-13)
