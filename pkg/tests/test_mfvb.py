import numpy as np
import pytest

from lrvb import mfvb, oracle
from lrvb.errors import DomainError, NonConvergence
from lrvb.mfvb import FitOptions, Hyperparams
from lrvb.models import normal_normal_model
from lrvb.util import fd_jacobian

from conftest import NN_DATA


class TestElbo:
    def test_equals_log_evidence_at_exact_posterior(self, nn_model, nn_fit):
        # single full-family block: the fit is the exact posterior, so the
        # objective at the optimum is the log marginal likelihood
        sol, _ = nn_fit
        post = oracle.exact_conjugate_posterior(nn_model)
        assert abs(sol.elbo - post.log_evidence) < 1e-9

    def test_optimality(self, nn_model, nn_fit):
        sol, _ = nn_fit
        rng = np.random.default_rng(2)
        for _ in range(25):
            m = sol.mean + np.array([0.3, 0.8]) * rng.uniform(-0.5, 0.5, size=2)
            try:
                val = mfvb.elbo(nn_model, m)
            except DomainError:
                continue
            assert val <= sol.elbo + 1e-12

    def test_constant_prior_shift(self, nn_model):
        # shifting the prior by a constant shifts the objective by exactly
        # that constant and leaves the optimizer path unchanged
        shift = 3.7
        from dataclasses import replace
        base_prior = nn_model.expected_log_prior
        shifted = replace(
            nn_model,
            expected_log_prior=lambda m, a: base_prior(m, a) + shift)
        m0 = nn_model.default_init(nn_model.hyperparams)
        assert np.isclose(mfvb.elbo(shifted, m0) - mfvb.elbo(nn_model, m0), shift)
        s1 = mfvb.fit(nn_model)
        s2 = mfvb.fit(shifted)
        assert np.array_equal(s1.mean, s2.mean)
        assert np.isclose(s2.elbo - s1.elbo, shift)

    def test_out_of_domain_mean(self, nn_model):
        with pytest.raises(DomainError):
            mfvb.elbo(nn_model, np.array([1.0, 0.5]))  # E[x^2] < E[x]^2


class TestFit:
    def test_conjugate_posterior_recovered(self, nn_model, nn_fit):
        sol, _ = nn_fit
        lam_n = 1.0 + NN_DATA.size
        mu_n = NN_DATA.sum() / lam_n
        exact = np.array([mu_n, mu_n ** 2 + 1.0 / lam_n])
        assert np.max(np.abs(sol.mean - exact)) < 1e-8

    def test_mean_field_gaussian_fixed_point(self):
        # exact means; marginal variances are the inverse precision diagonal
        from lrvb.models import gaussian_target_model
        prec = np.array([[1.0, -0.5, 0.2], [-0.5, 1.5, -0.3], [0.2, -0.3, 2.0]])
        h = prec @ np.array([0.5, -0.2, 0.1])
        sol = mfvb.fit(gaussian_target_model(h, prec))
        mu = np.linalg.solve(prec, h)
        assert np.max(np.abs(sol.mean[0::2] - mu)) < 1e-8
        marg_var = sol.mean[1::2] - sol.mean[0::2] ** 2
        assert np.max(np.abs(marg_var - 1.0 / np.diag(prec))) < 1e-8

    def test_gradient_matches_finite_differences(self, nig_model, nig_fit):
        sol, _ = nig_fit
        m = sol.mean + np.array([0.03, 0.2, 0.05, 0.04])
        grad = mfvb.elbo_grad_mean(nig_model, m)
        fd = fd_jacobian(lambda x: np.array([mfvb.elbo(nig_model, x)]), m,
                         rel_step=1e-6)[0]
        assert np.max(np.abs(grad - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-5

    def test_gradient_norm_at_optimum(self, nn_fit):
        sol, _ = nn_fit
        assert sol.converged
        assert sol.grad_norm <= 1e-11

    def test_deterministic(self, micro_model):
        s1 = mfvb.fit(micro_model)
        s2 = mfvb.fit(micro_model)
        assert np.array_equal(s1.mean, s2.mean)
        assert s1.iterations == s2.iterations
        assert s1.elbo_trace == s2.elbo_trace

    def test_elbo_trace_non_decreasing(self, micro_model):
        sol = mfvb.fit(micro_model)
        trace = np.array(sol.elbo_trace)
        slack = 1e-9 * max(1.0, np.max(np.abs(trace)))
        assert np.all(np.diff(trace) >= -slack)
        assert sol.converged

    def test_non_convergence_raises(self, nn_model):
        with pytest.raises(NonConvergence) as info:
            mfvb.fit(nn_model, opts=FitOptions(tol=1e-30, max_iter=3, polish_iter=0))
        assert info.value.solution is not None

    def test_hierarchical_converges_from_prior_init(self, micro_model):
        sol = mfvb.fit(micro_model)
        assert sol.converged and np.isfinite(sol.elbo)


class TestHyperparams:
    def test_round_trip_and_updates(self):
        hp = Hyperparams({"a": 1.0, "b": -2.0})
        assert hp.names == ("a", "b")
        assert np.array_equal(hp.as_vector(), [1.0, -2.0])
        hp2 = hp.with_updates(b=5.0)
        assert hp2["b"] == 5.0 and hp["b"] == -2.0
        hp3 = hp.perturbed({"a": 2.0}, 0.5)
        assert hp3["a"] == 2.0

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            Hyperparams({"a": 1.0}).with_updates(zzz=2.0)
