import math

import numpy as np
import pytest
from scipy import integrate, stats

from robustagg import numkit
from robustagg.errors import DimensionError, NotPositiveDefiniteError


def random_pd(rng, p, cond=100.0):
    """Random symmetric PD matrix with the requested condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    values = np.logspace(0.0, math.log10(cond), p)
    return (q * values) @ q.T


class TestSymEig:
    def test_identity(self):
        dec = numkit.sym_eig(np.eye(2))
        assert np.allclose(dec.values, [1.0, 1.0])

    def test_diagonal_sorted_descending(self):
        dec = numkit.sym_eig(np.diag([4.0, 9.0]))
        assert np.allclose(dec.values, [9.0, 4.0])

    def test_two_by_two_hand_algebra(self):
        # [[2,1],[1,2]]: characteristic polynomial (2-l)^2 - 1 = 0 -> l = 3, 1
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        dec = numkit.sym_eig(a)
        assert np.allclose(dec.values, [3.0, 1.0], atol=1e-12)
        v = dec.vectors[:, 0]
        assert np.allclose(np.abs(v), [1 / math.sqrt(2)] * 2, atol=1e-12)

    def test_characteristic_polynomial_oracle_2x2(self):
        # For symmetric [[a,b],[b,d]] roots are ((a+d) +- sqrt((a-d)^2+4b^2))/2.
        rng = np.random.default_rng(11)
        for _ in range(50):
            a, b, d = rng.standard_normal(3)
            m = np.array([[a, b], [b, d]])
            disc = math.sqrt((a - d) ** 2 + 4 * b * b)
            expected = np.array([(a + d + disc) / 2, (a + d - disc) / 2])
            dec = numkit.sym_eig(m)
            assert np.allclose(dec.values, expected, atol=1e-12)

    def test_reconstruction_and_orthogonality(self):
        rng = np.random.default_rng(3)
        for p in (1, 2, 5, 12):
            a = rng.standard_normal((p, p))
            a = (a + a.T) / 2
            dec = numkit.sym_eig(a)
            rebuilt = (dec.vectors * dec.values) @ dec.vectors.T
            norm = np.linalg.norm(a) or 1.0
            assert np.linalg.norm(rebuilt - a) <= 1e-10 * norm
            assert np.abs(dec.vectors.T @ dec.vectors - np.eye(p)).max() <= 1e-10

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            numkit.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestInvSqrt:
    def test_scaled_identity(self):
        assert np.allclose(numkit.inv_sqrt_pd(4.0 * np.eye(2)), 0.5 * np.eye(2))

    def test_diagonal(self):
        out = numkit.inv_sqrt_pd(np.diag([4.0, 9.0]))
        assert np.allclose(out, np.diag([0.5, 1.0 / 3.0]))

    def test_two_by_two_identity_product(self):
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        b = numkit.inv_sqrt_pd(a)
        assert np.abs(b @ a @ b - np.eye(2)).max() < 1e-12

    def test_random_pd_identity_within_1e8(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            p = int(rng.integers(1, 8))
            a = random_pd(rng, p, cond=10 ** rng.uniform(0, 6))
            b = numkit.inv_sqrt_pd(a)
            err = np.linalg.norm(b @ a @ b - np.eye(p))
            assert err <= 1e-8

    def test_not_pd_names_eigenvalue(self):
        with pytest.raises(NotPositiveDefiniteError) as excinfo:
            numkit.inv_sqrt_pd(np.diag([1.0, -3.0]))
        assert excinfo.value.eigenvalue == pytest.approx(-3.0)


class TestVech:
    def test_examples(self):
        assert numkit.vech(np.array([[1.0, 2.0], [2.0, 3.0]])).tolist() == [1, 2, 3]
        assert numkit.vech(np.eye(3)).tolist() == [1, 0, 0, 1, 0, 1]
        assert numkit.vech(np.ones((3, 3))).tolist() == [1] * 6

    def test_inverse_examples(self):
        assert np.array_equal(
            numkit.vech_inv([1.0, 2.0, 3.0], 2), np.array([[1.0, 2.0], [2.0, 3.0]])
        )
        assert np.array_equal(numkit.vech_inv([5.0], 1), np.array([[5.0]]))
        assert np.array_equal(numkit.vech_inv([1, 0, 0, 1, 0, 1], 3), np.eye(3))

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(5)
        for p in range(1, 11):
            a = rng.standard_normal((p, p))
            a = (a + a.T) / 2
            assert np.array_equal(numkit.vech_inv(numkit.vech(a), p), a)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            numkit.vech_inv([1.0, 2.0], 2)


class TestPdProject:
    def test_already_pd_untouched(self):
        assert np.array_equal(numkit.pd_project(np.eye(2), 1e-5), np.eye(2))

    def test_clips_negative(self):
        out = numkit.pd_project(np.diag([1.0, -1.0]), 1e-5)
        assert np.allclose(out, np.diag([1.0, 1e-5]))

    def test_clips_zero(self):
        out = numkit.pd_project(np.diag([0.0, 2.0]), 1e-5)
        assert np.allclose(out, np.diag([1e-5, 2.0]))

    def test_min_eigenvalue_floor_random(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            p = int(rng.integers(1, 7))
            a = rng.standard_normal((p, p))
            out = numkit.pd_project((a + a.T) / 2, 1e-5)
            assert numkit.min_eigenvalue(out) >= 1e-5 - 1e-12

    def test_symmetrizes_first(self):
        a = np.array([[1.0, 0.5], [0.1, 1.0]])
        out = numkit.pd_project(a, 1e-5)
        assert np.array_equal(out, out.T)
        assert out[0, 1] == pytest.approx(0.3)


class TestStdNormal:
    def test_at_zero(self):
        pdf, cdf = numkit.std_normal(0.0)
        assert pdf == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=1e-16)
        assert cdf == 0.5

    def test_tail_limit(self):
        _, cdf = numkit.std_normal(8.0)
        assert cdf >= 1 - 1e-15

    def test_against_quadrature_oracle(self):
        # Independent oracle: integrate the density numerically up to u.
        def phi(t):
            return math.exp(-t * t / 2) / math.sqrt(2 * math.pi)

        for u in (1.345, -0.7, 2.5):
            oracle, err = integrate.quad(phi, -10.0, u, epsabs=1e-13)
            assert err < 1e-9
            _, cdf = numkit.std_normal(u)
            assert cdf == pytest.approx(oracle, abs=1e-11)
        # Frozen value from the quadrature oracle at 1.345.
        assert numkit.std_normal(1.345)[1] == pytest.approx(0.91068738, abs=5e-7)

    def test_symmetry_property(self):
        rng = np.random.default_rng(17)
        for u in rng.uniform(-8, 8, size=200):
            _, c1 = numkit.std_normal(u)
            _, c2 = numkit.std_normal(-u)
            assert abs(c1 + c2 - 1.0) <= 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            numkit.std_normal(float("nan"))


class TestChi2Quantile:
    def test_dof2_analytic(self):
        # P(chi2_2 > t) = exp(-t/2), so t = -2 ln(alpha).
        assert numkit.chi2_quantile(2, 0.05) == pytest.approx(
            -2.0 * math.log(0.05), abs=1e-9
        )

    def test_alpha_near_one_limit(self):
        assert numkit.chi2_quantile(2, 1 - 1e-12) == pytest.approx(0.0, abs=1e-9)

    def test_dof23_monte_carlo_oracle(self):
        # Oracle 1: empirical tail frequency of chi-squared draws.
        t = numkit.chi2_quantile(23, 0.05)
        rng = np.random.default_rng(29)
        draws = rng.chisquare(23, size=1_000_000)
        freq = float((draws > t).mean())
        assert freq == pytest.approx(0.05, abs=1e-3)
        # Oracle 2: scipy's independent inverse survival function.
        assert t == pytest.approx(stats.chi2.isf(0.05, 23), abs=1e-9)
        assert t == pytest.approx(35.17, abs=0.01)

    def test_survival_round_trip(self):
        for dof in (1, 2, 5, 23, 100):
            for alpha in (0.9, 0.5, 0.1, 0.05, 0.001):
                t = numkit.chi2_quantile(dof, alpha)
                assert stats.chi2.sf(t, dof) == pytest.approx(alpha, rel=1e-9)

    def test_strictly_decreasing_in_alpha(self):
        grid = [0.001, 0.01, 0.05, 0.1, 0.3, 0.5, 0.8, 0.99]
        values = [numkit.chi2_quantile(5, a) for a in grid]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            numkit.chi2_quantile(2, 0.0)
        with pytest.raises(ValueError):
            numkit.chi2_quantile(2, 1.0)
        with pytest.raises(ValueError):
            numkit.chi2_quantile(0, 0.5)
