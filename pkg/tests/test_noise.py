import io

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spde_wave.errors import IndefiniteCovariance
from spde_wave.noise import (
    PAGE_STEPS,
    Aggregator,
    IncrementCovariance,
    NoiseBlock,
    SeedSpec,
    aggregate,
    aggregate_covariance,
    cholesky3,
    increment_covariance,
    iter_blocks,
    iter_fine_chunks,
    read_blocks,
    sample_block,
    sample_blocks,
    standard_normals,
    write_blocks,
)
from spde_wave.oracle import QuadratureSpec, quadrature_covariance
from spde_wave.spectral import build_basis

PI2 = np.pi**2
FIELDS = ("var_dbeta", "cov_bz", "cov_bzh", "var_zeta", "cov_zz", "var_zeta_hat")


def hp_covariance(lam, tau, dps=50):
    """Integrals of the kernel products at high working precision."""
    with mpmath.workdps(dps):
        lam, tau = mpmath.mpf(lam), mpmath.mpf(tau)
        rl = mpmath.sqrt(lam)
        ks = lambda s: mpmath.sin((tau - s) * rl) / rl  # noqa: E731
        kc = lambda s: mpmath.cos((tau - s) * rl)  # noqa: E731
        q = lambda g: mpmath.quad(g, [0, tau])  # noqa: E731
        return {
            "cov_bz": q(ks),
            "cov_bzh": q(kc),
            "var_zeta": q(lambda s: ks(s) ** 2),
            "cov_zz": q(lambda s: ks(s) * kc(s)),
            "var_zeta_hat": q(lambda s: kc(s) ** 2),
        }


class TestClosedForms:
    def test_small_step_limit(self):
        c = increment_covariance(PI2, 1e-6)
        assert c.var_dbeta == 1e-6
        for f in FIELDS[1:]:
            if f in ("cov_bzh", "var_zeta_hat"):
                continue  # these are O(tau), like var_dbeta
            assert abs(getattr(c, f)) <= 1e-12

    def test_reference_values(self):
        c = increment_covariance(PI2, 0.1)
        assert c.var_zeta == pytest.approx(3.268e-4, rel=1e-3)
        assert c.var_zeta_hat == pytest.approx(0.0967745, rel=1e-6)
        assert c.cov_zz == pytest.approx(np.sin(0.1 * np.pi) ** 2 / (2 * PI2), rel=1e-14)
        assert c.cov_zz == pytest.approx(4.836e-3, rel=1e-3)

    def test_reference_values_against_quadrature(self):
        c = increment_covariance(PI2, 0.1)
        q = quadrature_covariance(PI2, 0.1, QuadratureSpec(100_000))
        for f in FIELDS:
            assert getattr(c, f) == pytest.approx(getattr(q, f), rel=1e-9)

    def test_cross_terms_against_quadrature(self):
        lam, tau = 4 * PI2, 0.05
        c = increment_covariance(lam, tau)
        q = quadrature_covariance(lam, tau, QuadratureSpec(100_000))
        assert c.cov_bz == pytest.approx(q.cov_bz, rel=1e-10)
        assert c.cov_bzh == pytest.approx(q.cov_bzh, rel=1e-10)

    def test_alternate_forms(self):
        lam = PI2 * np.arange(1, 50) ** 2
        tau = 0.07
        th = tau * np.sqrt(lam)
        c = increment_covariance(lam, tau)
        np.testing.assert_allclose(c.cov_zz, (1 - np.cos(2 * th)) / (4 * lam), rtol=1e-9, atol=1e-16)
        np.testing.assert_allclose(c.cov_bz, (1 - np.cos(th)) / lam, rtol=1e-9, atol=1e-16)
        np.testing.assert_allclose(c.var_zeta, (tau - np.sin(2 * th) / (2 * np.sqrt(lam))) / (2 * lam), rtol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0, 1e8), st.floats(1e-8, 2.0))
    def test_energy_identity(self, lam, tau):
        c = increment_covariance(lam, tau)
        assert c.var_zeta_hat + lam * c.var_zeta == pytest.approx(tau, rel=1e-13)
        assert c.var_zeta * c.var_zeta_hat - c.cov_zz**2 >= -1e-15

    def test_psd_on_grid(self):
        lam = np.geomspace(PI2, 1e6, 20)[:, None]
        tau = np.geomspace(1e-6, 1, 20)[None, :]
        m = increment_covariance(lam, tau).matrix()
        scale = np.sqrt(np.einsum("...ii->...i", m))
        corr = m / scale[..., :, None] / scale[..., None, :]
        assert np.linalg.eigvalsh(corr).min() >= -1e-14

    @pytest.mark.parametrize("lam,tau", [(PI2, 1e-8), (PI2, 1e-5), (1e4 * PI2, 1e-7), (PI2, 3e-5)])
    def test_small_angle_against_high_precision(self, lam, tau):
        assert tau * np.sqrt(lam) <= 1e-4
        c = increment_covariance(lam, tau)
        hp = hp_covariance(lam, tau)
        for f, v in hp.items():
            assert getattr(c, f) == pytest.approx(float(v), rel=1e-8)

    @pytest.mark.parametrize("theta", [0.3, 0.49, 0.51, 0.99, 1.01, 2.0])
    def test_series_switch_is_seamless(self, theta):
        c = increment_covariance(1.0, theta)
        assert c.var_zeta == pytest.approx(float(hp_covariance(1.0, theta)["var_zeta"]), rel=1e-13)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            increment_covariance(0.0, 0.1)
        with pytest.raises(ValueError):
            increment_covariance(PI2, -1.0)
        with pytest.raises(ValueError):
            increment_covariance(PI2, 0.0)


class TestCholesky:
    def test_diagonal(self):
        z = np.float64(0.0)
        cov = IncrementCovariance(np.float64(4.0), z, z, np.float64(9.0), z, np.float64(0.25))
        np.testing.assert_array_equal(cholesky3(cov), np.diag([2.0, 3.0, 0.5]))

    def test_reconstruction(self):
        cov = increment_covariance(PI2, 0.1)
        L = cholesky3(cov)
        m = cov.matrix()
        assert np.linalg.norm(L @ L.T - m) / np.linalg.norm(m) <= 1e-12
        assert np.all(np.triu(L, 1) == 0)

    def test_reconstruction_vectorized(self):
        lam = build_basis(4096).lam
        cov = increment_covariance(lam, 2.0**-7)
        L = cholesky3(cov)
        m = cov.matrix()
        err = np.linalg.norm(L @ np.swapaxes(L, -1, -2) - m, axis=(-2, -1)) / np.linalg.norm(m, axis=(-2, -1))
        assert err.max() <= 1e-12

    def test_degenerate_limit_clamps(self):
        cov = increment_covariance(1.0, 1e-9)
        L = cholesky3(cov)
        assert np.all(np.isfinite(L))

    def test_indefinite(self):
        z = np.float64(0.0)
        cov = IncrementCovariance(np.float64(1.0), np.float64(2.0), z, np.float64(1.0), z, np.float64(1.0))
        with pytest.raises(IndefiniteCovariance):
            cholesky3(cov)


class TestSampling:
    def test_deterministic(self):
        basis = build_basis(16)
        seed = SeedSpec(123, 4, 1024)
        a = sample_block(seed, basis, 0.01, 17)
        b = sample_block(seed, basis, 0.01, 17)
        for f in ("dbeta", "zeta", "zeta_hat"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_keys_separate_streams(self):
        base = standard_normals(SeedSpec(1, 0, 8), 4, 0, 3)
        for other in (SeedSpec(2, 0, 8), SeedSpec(1, 1, 8), SeedSpec(1, 0, 16)):
            assert not np.array_equal(base, standard_normals(other, 4, 0, 3))

    def test_random_access_matches_bulk(self):
        seed = SeedSpec(9, 2, 3)
        bulk = standard_normals(seed, 5, 0, 3 * PAGE_STEPS)
        for start, count in [(0, 1), (PAGE_STEPS - 1, 3), (PAGE_STEPS, 7), (700, 68)]:
            np.testing.assert_array_equal(standard_normals(seed, 5, start, count), bulk[start:start + count])

    def test_modes_are_prefix_stable(self):
        seed = SeedSpec(5)
        np.testing.assert_array_equal(standard_normals(seed, 3, 10, 20), standard_normals(seed, 8, 10, 20)[:, :3])

    def test_single_block_matches_bulk(self):
        basis = build_basis(12)
        seed = SeedSpec(77, 0, 64)
        db, z, zh = sample_blocks(seed, basis, 1 / 64, 0, 64)
        blk = sample_block(seed, basis, 1 / 64, 41)
        np.testing.assert_array_equal(blk.zeta, z[41])
        np.testing.assert_array_equal(blk.dbeta, db[41])
        np.testing.assert_array_equal(blk.zeta_hat, zh[41])

    def test_chunking_does_not_change_stream(self):
        basis = build_basis(8)
        seed = SeedSpec(3)
        whole = np.concatenate([c[1] for _, c in iter_fine_chunks(seed, basis, 0.01, 1000)])
        small = np.concatenate([c[1] for _, c in iter_fine_chunks(seed, basis, 0.01, 1000, max_bytes=8 * 64 * 37)])
        np.testing.assert_array_equal(whole, small)

    def test_moments(self):
        n = 1_000_000
        cov = increment_covariance(PI2, 0.1)
        L = cholesky3(cov)
        z = standard_normals(SeedSpec(2024), 1, 0, n)[:, 0, :]
        x = z @ L.T
        emp = np.cov(x.T)
        var_z = float(cov.var_zeta)
        assert abs(emp[1, 1] - var_z) <= 5 * var_z * np.sqrt(2.0 / n)
        rho = cov.cov_zz / np.sqrt(cov.var_zeta * cov.var_zeta_hat)
        rho_hat = emp[1, 2] / np.sqrt(emp[1, 1] * emp[2, 2])
        assert abs(rho_hat - rho) <= 5 * (1 - rho**2) / np.sqrt(n)
        assert abs(emp[0, 0] - 0.1) <= 5 * 0.1 * np.sqrt(2.0 / n)

    def test_raw_normals_look_standard(self):
        z = standard_normals(SeedSpec(11), 64, 0, 4096).ravel()
        n = z.size
        assert abs(z.mean()) <= 5 / np.sqrt(n)
        assert abs(z.var() - 1) <= 5 * np.sqrt(2 / n)

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            sample_blocks(SeedSpec(0), build_basis(2), 0.0, 0, 1)


class TestAggregation:
    def test_full_rotation_is_identity(self):
        basis = build_basis(1)
        tau = 2 * np.pi / basis.sqrt_lam[0]
        first = NoiseBlock(np.array([0.3]), np.array([-0.7]), np.array([1.1]), 0, 0.5)
        out = aggregate(first, NoiseBlock.zeros(1, tau), basis)
        np.testing.assert_allclose(out.zeta, first.zeta, atol=1e-15)
        np.testing.assert_allclose(out.zeta_hat, first.zeta_hat, atol=1e-15)
        assert out.dbeta[0] == 0.3 and out.tau == pytest.approx(0.5 + tau)

    def test_quarter_turn_by_hand(self):
        from spde_wave.spectral import Basis
        basis = Basis(1, np.array([1.0]), np.array([1.0]))
        first = NoiseBlock(np.array([0.0]), np.array([1.0]), np.array([0.0]), 0, 1.0)
        out = aggregate(first, NoiseBlock.zeros(1, np.pi / 2), basis)
        np.testing.assert_allclose([out.dbeta[0], out.zeta[0], out.zeta_hat[0]], [0.0, 0.0, -1.0], atol=1e-15)

    def test_two_blocks_covariance(self):
        lam = PI2 * np.arange(1, 9) ** 2
        tau = 0.037
        c1 = increment_covariance(lam, tau)
        agg = aggregate_covariance(c1, c1, lam).matrix()
        exact = increment_covariance(lam, 2 * tau).matrix()
        assert np.max(np.abs(agg - exact)) / np.max(np.abs(exact)) <= 1e-12

    @pytest.mark.parametrize("k", range(0, 11))
    def test_dyadic_split(self, k):
        lam = np.geomspace(PI2, 1e6, 20)
        tau = 0.3
        c = increment_covariance(lam, tau / 2**k)
        for _ in range(k):
            c = aggregate_covariance(c, c, lam)
        got, exact = c.matrix(), increment_covariance(lam, tau).matrix()
        rel = np.max(np.abs(got - exact), axis=(-2, -1)) / np.max(np.abs(exact), axis=(-2, -1))
        assert rel.max() <= 1e-11

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            aggregate(NoiseBlock.zeros(2, 0.1), NoiseBlock.zeros(3, 0.1), build_basis(3))

    @pytest.mark.parametrize("ratio", [1, 2, 5, 16])
    def test_streaming_equals_fold(self, ratio):
        basis = build_basis(6)
        seed = SeedSpec(42, 1, 80)
        tau = 1 / 80
        db, z, zh = sample_blocks(seed, basis, tau, 0, 80)
        agg = Aggregator(basis.lam, tau, ratio)
        streamed = []
        for lo, hi in [(0, 3), (3, 4), (4, 33), (33, 80)]:
            streamed += agg.push(db[lo:hi], z[lo:hi], zh[lo:hi])
        assert len(streamed) == 80 // ratio
        for j, blk in enumerate(streamed):
            acc = NoiseBlock(db[j * ratio], z[j * ratio], zh[j * ratio], 0, tau)
            for k in range(j * ratio + 1, (j + 1) * ratio):
                acc = aggregate(acc, NoiseBlock(db[k], z[k], zh[k], 0, tau), basis)
            np.testing.assert_allclose(blk.zeta, acc.zeta, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(blk.zeta_hat, acc.zeta_hat, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(blk.dbeta, acc.dbeta, rtol=1e-12, atol=1e-15)
            assert blk.tau == pytest.approx(tau * ratio)
            assert blk.step_index == j

    def test_iter_blocks_count(self):
        blocks = list(iter_blocks(SeedSpec(1), build_basis(4), 1 / 64, 64, 8))
        assert len(blocks) == 8 and all(b.tau == pytest.approx(1 / 8) for b in blocks)
        with pytest.raises(ValueError):
            list(iter_blocks(SeedSpec(1), build_basis(4), 1 / 64, 64, 7))


class TestDump:
    def test_roundtrip(self):
        seed = SeedSpec(2**63 + 5, 3, 128)
        blocks = list(iter_blocks(seed, build_basis(5), 1 / 128, 128, 4))
        buf = io.BytesIO()
        write_blocks(buf, blocks, seed)
        assert len(buf.getvalue()) == 56 + 32 * 3 * 5 * 8
        buf.seek(0)
        seed2, back = read_blocks(buf)
        assert seed2 == seed
        for a, b in zip(blocks, back):
            np.testing.assert_array_equal(a.zeta_hat, b.zeta_hat)
            assert b.tau == a.tau

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            read_blocks(io.BytesIO(b"\0" * 64))
