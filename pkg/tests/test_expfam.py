import numpy as np
import pytest
from scipy.special import digamma

from lrvb import expfam as ef
from lrvb.errors import DomainError
from lrvb.expfam import ExpFamBlock, Family
from lrvb.util import fd_jacobian, vech


def random_natural(family, rng):
    fam = ef.FAMILIES[family]
    if family is Family.GAUSSIAN_UNIVARIATE:
        return fam.natural_from_standard(rng.normal(), rng.uniform(0.2, 3.0))
    if family is Family.GAMMA:
        return fam.natural_from_standard(rng.uniform(0.5, 6.0), rng.uniform(0.3, 5.0))
    if family is Family.INVERSE_GAMMA:
        return fam.natural_from_standard(rng.uniform(0.8, 6.0), rng.uniform(0.3, 5.0))
    if family is Family.GAUSSIAN_MULTIVARIATE:
        a = rng.normal(size=(2, 2))
        return fam.natural_from_standard(rng.normal(size=2), a @ a.T + 2.0 * np.eye(2))
    a = rng.normal(size=(2, 2))
    return fam.natural_from_standard(rng.uniform(3.5, 15.0),
                                     (a @ a.T + 2.0 * np.eye(2)) / 5.0)


class TestMeanFromNatural:
    def test_standard_normal(self):
        blk = ExpFamBlock.from_standard(Family.GAUSSIAN_UNIVARIATE, 0.0, 1.0)
        assert np.allclose(blk.mean, [0.0, 1.0], atol=1e-14)

    def test_gaussian_mean_two_var_four(self):
        # natural (0.5, -0.125); second moment is mu^2 + var = 8
        blk = ExpFamBlock.from_natural(Family.GAUSSIAN_UNIVARIATE, [0.5, -0.125])
        assert np.allclose(blk.mean, [2.0, 8.0], rtol=1e-12)

    def test_gaussian_second_moment_monte_carlo(self):
        blk = ExpFamBlock.from_natural(Family.GAUSSIAN_UNIVARIATE, [0.5, -0.125])
        draws = ef.sample_block(blk, 10 ** 6, np.random.default_rng(0))
        stats = ef.block_suff_stats(blk, draws)
        se = stats.std(axis=0) / np.sqrt(draws.size)
        assert np.all(np.abs(stats.mean(axis=0) - blk.mean) < 3.0 * se)

    def test_wishart_identity_mean(self):
        blk = ExpFamBlock.from_standard(Family.WISHART, 5.0, np.eye(2) / 5.0)
        assert np.allclose(ef.mean_from_natural(blk)[:3], [1.0, 0.0, 1.0], rtol=1e-12)

    def test_out_of_domain_raises(self):
        with pytest.raises(DomainError):
            ExpFamBlock.from_natural(Family.GAUSSIAN_UNIVARIATE, [0.0, 0.5])


class TestRoundTrips:
    @pytest.mark.parametrize("family", list(Family))
    def test_natural_mean_round_trip(self, family):
        rng = np.random.default_rng(101)
        for _ in range(100):
            eta = random_natural(family, rng)
            blk = ExpFamBlock.from_natural(family, eta)
            back = ef.natural_from_mean(blk)
            assert np.max(np.abs(back - eta)) < 1e-10 * max(1.0, np.max(np.abs(eta)))


class TestSuffStatCovariance:
    def test_standard_normal(self):
        blk = ExpFamBlock.from_standard(Family.GAUSSIAN_UNIVARIATE, 0.0, 1.0)
        assert np.allclose(ef.suff_stat_covariance(blk), [[1, 0], [0, 2]], atol=1e-14)

    def test_shifted_normal_fourth_moment(self):
        blk = ExpFamBlock.from_standard(Family.GAUSSIAN_UNIVARIATE, 1.0, 1.0)
        assert np.allclose(ef.suff_stat_covariance(blk), [[1, 2], [2, 6]], atol=1e-12)

    def test_exponential_trigamma(self):
        blk = ExpFamBlock.from_standard(Family.GAMMA, 1.0, 1.0)
        expect = [[1.0, 1.0], [1.0, np.pi ** 2 / 6.0]]
        assert np.allclose(ef.suff_stat_covariance(blk), expect, rtol=1e-12)

    @pytest.mark.parametrize("family", list(Family))
    def test_equals_jacobian_of_mean_map(self, family):
        # the covariance is the log-partition Hessian, i.e. d mean / d natural
        rng = np.random.default_rng(77)
        fam = ef.FAMILIES[family]
        for _ in range(10):
            eta = random_natural(family, rng)
            jac = fd_jacobian(lambda e: fam.mean_from_natural(np.asarray(e)), eta,
                              rel_step=1e-6)
            cov = fam.suff_stat_cov(eta)
            scale = max(np.max(np.abs(cov)), 1.0)
            assert np.max(np.abs(jac - cov)) / scale < 1e-6
            assert np.allclose(cov, cov.T)
            assert np.min(np.linalg.eigvalsh(cov)) > -1e-10 * scale


class TestEntropy:
    def test_standard_normal(self):
        blk = ExpFamBlock.from_standard(Family.GAUSSIAN_UNIVARIATE, 0.0, 1.0)
        assert np.isclose(ef.entropy(blk), 0.5 * np.log(2.0 * np.pi * np.e), rtol=1e-12)

    def test_scaled_normal(self):
        blk = ExpFamBlock.from_standard(Family.GAUSSIAN_UNIVARIATE, 0.0, 4.0)
        expect = 0.5 * np.log(2.0 * np.pi * np.e) + np.log(2.0)
        assert np.isclose(ef.entropy(blk), expect, rtol=1e-12)

    def test_unit_exponential(self):
        blk = ExpFamBlock.from_standard(Family.GAMMA, 1.0, 1.0)
        assert np.isclose(ef.entropy(blk), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("family", list(Family))
    def test_matches_sampled_log_density(self, family):
        rng = np.random.default_rng(5)
        blk = ExpFamBlock.from_natural(family, random_natural(family, rng))
        draws = ef.sample_block(blk, 4000, np.random.default_rng(8))
        vals = np.array([-ef.block_log_density(blk, draws[i]) for i in range(4000)])
        se = vals.std() / np.sqrt(vals.size)
        assert abs(vals.mean() - ef.entropy(blk)) < 4.0 * se


class TestWishartExpectations:
    def test_identity_mean_precision(self):
        w = ef.wishart_expectations(5.0, np.eye(2) / 5.0)
        assert np.allclose(w.mean_precision, np.eye(2), rtol=1e-12)

    def test_logdet_closed_form(self):
        w = ef.wishart_expectations(5.0, np.eye(2) / 5.0)
        expect = digamma(2.5) + digamma(2.0) + np.log(1.0 / 25.0) + 2.0 * np.log(2.0)
        assert np.isclose(w.logdet, expect, rtol=1e-12)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(12)
        dof, scale = 7.0, np.array([[0.4, 0.1], [0.1, 0.3]])
        w = ef.wishart_expectations(dof, scale)
        blk = ExpFamBlock.from_standard(Family.WISHART, dof, scale)
        draws = ef.sample_block(blk, 10 ** 5, rng)
        inv = np.linalg.inv(draws)
        diag = inv[:, [0, 1], [0, 1]]
        for mc, exact in [
            (ef.block_suff_stats(blk, draws)[:, :3], vech(w.mean_precision)),
            (np.log(diag), w.log_sigma_diag),
            (np.sqrt(diag), w.sqrt_sigma_diag),
            (1.0 / diag, w.inv_sigma_diag),
        ]:
            se = mc.std(axis=0) / np.sqrt(mc.shape[0])
            assert np.all(np.abs(mc.mean(axis=0) - exact) < 3.0 * se)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            ef.wishart_expectations(2.5, np.eye(2))
        with pytest.raises(DomainError):
            ef.wishart_expectations(5.0, -np.eye(2))


class TestInvGammaSqrt:
    def test_gamma_ratio_value(self):
        assert np.isclose(ef.invgamma_sqrt_expectation(1.5, 1.0),
                          2.0 / np.sqrt(np.pi), rtol=1e-12)

    def test_scale_factor(self):
        assert np.isclose(ef.invgamma_sqrt_expectation(1.5, 4.0),
                          4.0 / np.sqrt(np.pi), rtol=1e-12)

    def test_monte_carlo(self):
        rng = np.random.default_rng(4)
        shape, scale = 2.3, 1.7
        draws = scale / rng.gamma(shape, 1.0, size=10 ** 6)
        vals = np.sqrt(draws)
        se = vals.std() / np.sqrt(vals.size)
        assert abs(vals.mean() - ef.invgamma_sqrt_expectation(shape, scale)) < 3.0 * se

    def test_shape_domain(self):
        with pytest.raises(DomainError):
            ef.invgamma_sqrt_expectation(0.4, 1.0)
