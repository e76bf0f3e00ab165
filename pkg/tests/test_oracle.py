import numpy as np
import pytest
import scipy.stats as st

from lrvb import oracle
from lrvb.errors import (DegenerateChain, DomainError, NotConjugate,
                         QuadratureFailure)
from lrvb.models import normal_normal_model
from lrvb.oracle import McmcConfig


class TestQuadratureExpectation:
    def test_gaussian_mean(self):
        dens = lambda x: st.norm.pdf(x, 2.0, 2.0)
        val, err = oracle.quadrature_expectation(dens, lambda x: x, (-np.inf, np.inf))
        assert abs(val - 2.0) < 1e-9 and err <= 1e-8

    def test_standard_normal_second_moment(self):
        dens = lambda x: st.norm.pdf(x)
        val, _ = oracle.quadrature_expectation(dens, lambda x: x ** 2, (-np.inf, np.inf))
        assert abs(val - 1.0) < 1e-9

    def test_contaminated_prior_normalizer(self):
        eps = 0.1
        dens = lambda x: (1 - eps) * st.norm.pdf(x) + eps * st.norm.pdf(x, 3.0, 0.5)
        val, _ = oracle.quadrature_expectation(dens, lambda x: 1.0, (-np.inf, np.inf))
        assert abs(val - 1.0) < 1e-9

    def test_two_dimensional(self):
        dens = lambda x: st.norm.pdf(x[0]) * st.norm.pdf(x[1], 1.0, 0.5)
        val, _ = oracle.quadrature_expectation(dens, lambda x: x[0] + x[1],
                                               ((-8, 8), (-4, 6)), tol=1e-6)
        assert abs(val - 1.0) < 1e-6

    @pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
    def test_failure_raises(self):
        # wildly oscillatory integrand starves the error target
        dens = lambda x: st.norm.pdf(x)
        with pytest.raises(QuadratureFailure):
            oracle.quadrature_expectation(dens, lambda x: np.sin(3e7 * x * x),
                                          (-np.inf, np.inf), tol=1e-12)


class TestExactConjugatePosterior:
    def test_normal_normal_update(self, nn_model):
        post = oracle.exact_conjugate_posterior(nn_model)
        assert np.allclose(post.mean, [0.8, 0.8 ** 2 + 0.2], rtol=1e-12)

    def test_zero_observations_returns_prior(self):
        model = normal_normal_model(np.array([]), 1.0, ("moment", 0.3, 2.0))
        post = oracle.exact_conjugate_posterior(model)
        assert np.allclose(post.mean, [0.3, 0.3 ** 2 + 2.0], rtol=1e-12)

    def test_normal_invgamma_matches_quadrature(self, nig_model):
        post = oracle.exact_conjugate_posterior(nig_model)
        quad = oracle.quadrature_posterior_mean(nig_model)
        assert np.max(np.abs(post.mean - quad)) < 1e-4 * max(1, np.max(np.abs(post.mean)))

    def test_hierarchical_not_conjugate(self, micro_model):
        with pytest.raises(NotConjugate):
            oracle.exact_conjugate_posterior(micro_model)


class TestMetropolis:
    def _logpost(self, model):
        layout = model.layout

        def f(zv):
            values, lj = layout.values_from_sampler(zv)
            return (model.log_lik_values(values)
                    + model.log_prior_values(values, model.hyperparams) + lj)
        return f

    def test_standard_normal_target(self):
        cfg = McmcConfig(chain_length=40_000, burn_in=5_000, seed=11)
        res = oracle.metropolis_sample(lambda z: -0.5 * float(z @ z),
                                       np.zeros(1), cfg)
        assert abs(res.means[0]) < 3.0 * res.standard_errors[0]
        assert 0.2 < res.acceptance_rate < 0.7

    def test_matches_conjugate_posterior(self, nn_model):
        cfg = McmcConfig(chain_length=40_000, burn_in=5_000, seed=7)
        res = oracle.metropolis_sample(self._logpost(nn_model), np.zeros(1), cfg)
        stats = nn_model.layout.suff_stats_of_sampler_matrix(res.draws)
        se, _ = oracle.batch_means_se(stats)
        post = oracle.exact_conjugate_posterior(nn_model)
        assert np.all(np.abs(stats.mean(axis=0) - post.mean) < 3.0 * se)

    def test_seeded_runs_identical(self, nn_model):
        cfg = McmcConfig(chain_length=4_000, burn_in=500, seed=5)
        a = oracle.metropolis_sample(self._logpost(nn_model), np.zeros(1), cfg)
        b = oracle.metropolis_sample(self._logpost(nn_model), np.zeros(1), cfg)
        assert np.array_equal(a.draws, b.draws)
        assert a.acceptance_rate == b.acceptance_rate

    def test_degenerate_chain_detected(self):
        cfg = McmcConfig(chain_length=2_000, burn_in=100, step_scales=1e9, seed=0)
        target = lambda z: -0.5 * float(z @ z)
        with pytest.raises(DegenerateChain):
            oracle.metropolis_sample(target, np.zeros(2), cfg, adapt_sweeps=0)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            McmcConfig(chain_length=10, burn_in=20, seed=0)
        with pytest.raises(DomainError):
            McmcConfig(chain_length=10, burn_in=2, step_scales=-1.0, seed=0)

    def test_nonfinite_init_rejected(self):
        cfg = McmcConfig(chain_length=100, burn_in=10, seed=0)
        with pytest.raises(DomainError):
            oracle.metropolis_sample(lambda z: -np.inf, np.zeros(1), cfg)


class TestPerturbAndRerun:
    def test_quadrature_engine_exact_for_gaussian(self, nn_model):
        res = oracle.perturb_and_rerun(nn_model, {"prior_nat_1": 1.0},
                                       engine="quadrature")
        assert abs(res.slope - 1.0) < 1e-3
        assert np.all(res.mc_standard_errors > 0)

    def test_vb_engine_exact_derivative(self, nn_model):
        res = oracle.perturb_and_rerun(nn_model, {"prior_nat_2": 1.0}, engine="vb")
        assert abs(res.slope - 1.0) < 1e-4

    def test_mcmc_engine_couples_chains(self, nn_model):
        res = oracle.perturb_and_rerun(
            nn_model, {"prior_nat_1": 1.0}, engine="mcmc", step=0.3,
            mcmc_config=McmcConfig(chain_length=30_000, burn_in=5_000, seed=3))
        assert res.correlation > 0.95
        assert np.all(np.abs(res.actual_deltas - res.predicted_deltas)
                      < 5.0 * res.mc_standard_errors + 1e-3)

    def test_result_alignment(self, nn_model):
        res = oracle.perturb_and_rerun(nn_model, {"prior_nat_1": 1.0}, engine="vb")
        assert res.names == tuple(nn_model.layout.coord_names())
        assert (res.predicted_deltas.shape == res.actual_deltas.shape
                == res.mc_standard_errors.shape)
        sub = res.restricted(["theta"])
        assert sub.names == ("theta",)
        assert sub.predicted_deltas[0] == res.predicted_deltas[0]

    def test_unknown_engine(self, nn_model):
        with pytest.raises(DomainError):
            oracle.perturb_and_rerun(nn_model, {"prior_nat_1": 1.0}, engine="exact")
