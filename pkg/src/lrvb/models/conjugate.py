"""Conjugate and Gaussian test models with closed-form posteriors.

These fixtures keep every objective term exact, including normalizing
constants, so the fitted objective can be compared against closed-form
or quadrature evidence.
"""

import numpy as np

from ..errors import DomainError
from ..expfam import FAMILIES, Family
from ..mfvb import BlockDef, Hyperparams, Layout, ModelSpec

_GU = FAMILIES[Family.GAUSSIAN_UNIVARIATE]
_IG = FAMILIES[Family.INVERSE_GAMMA]

LOG_2PI = np.log(2.0 * np.pi)


def normal_normal_model(data, noise_var, prior_natural):
    """Scalar Gaussian location with known noise variance.

    The prior is parameterized by its natural coordinates
    ``(prior_nat_1, prior_nat_2)`` multiplying the statistics (x, x^2),
    so hyperparameter sensitivities reduce to covariance entries.
    ``prior_natural`` may also be given as moment-form ``("moment", mean,
    variance)``.
    """
    if isinstance(prior_natural, tuple) and prior_natural and prior_natural[0] == "moment":
        _, mu0, var0 = prior_natural
        prior_natural = _GU.natural_from_standard(mu0, var0)
    a = np.asarray(prior_natural, dtype=float)
    if a.shape != (2,) or a[1] >= 0:
        raise DomainError(f"prior natural parameters {a} out of domain")
    x = np.asarray(data, dtype=float)
    n, sx, sxx = x.size, float(np.sum(x)), float(np.sum(x ** 2))
    if noise_var <= 0:
        raise DomainError(f"noise variance must be positive, got {noise_var}")

    layout = Layout([BlockDef("theta", Family.GAUSSIAN_UNIVARIATE, labels=("theta",))])
    hyper = Hyperparams({"prior_nat_1": a[0], "prior_nat_2": a[1]})

    lik_coeff = np.array([sx / noise_var, -0.5 * n / noise_var])
    lik_const = -0.5 * n * LOG_2PI - 0.5 * n * np.log(noise_var) - 0.5 * sxx / noise_var

    def expected_log_lik(m):
        return float(lik_coeff @ m) + lik_const

    def grad_log_lik(m):
        return lik_coeff.copy()

    def _nat(alpha):
        eta = np.array([alpha["prior_nat_1"], alpha["prior_nat_2"]])
        if eta[1] >= 0:
            raise DomainError(f"prior natural parameters {eta} out of domain")
        return eta

    def expected_log_prior(m, alpha):
        eta = _nat(alpha)
        return float(eta @ m) - _GU.log_partition(eta)

    def grad_log_prior(m, alpha):
        return _nat(alpha)

    def prior_alpha_grad(m, alpha, direction):
        out = np.zeros(2)
        out[0] = direction.get("prior_nat_1", 0.0)
        out[1] = direction.get("prior_nat_2", 0.0)
        return out

    def prior_block_logpdf(block, point, alpha):
        if block not in ("theta", 0):
            raise KeyError(block)
        return float(_GU.log_density(point, _nat(alpha)))

    def log_lik_values(values):
        th = float(np.asarray(values["theta"]).reshape(-1)[0])
        return lik_const + lik_coeff[0] * th + lik_coeff[1] * th ** 2

    def log_prior_values(values, alpha):
        th = float(np.asarray(values["theta"]).reshape(-1)[0])
        eta = _nat(alpha)
        return eta[0] * th + eta[1] * th ** 2 - _GU.log_partition(eta)

    def default_init(alpha):
        return _GU.mean_from_natural(_nat(alpha))

    return ModelSpec(
        name="normal_normal", layout=layout, hyperparams=hyper,
        expected_log_lik=expected_log_lik, grad_log_lik=grad_log_lik,
        expected_log_prior=expected_log_prior, grad_log_prior=grad_log_prior,
        default_init=default_init, data={"x": x, "noise_var": float(noise_var)},
        prior_alpha_grad=prior_alpha_grad,
        prior_block_logpdf={"theta": prior_block_logpdf},
        log_lik_values=log_lik_values, log_prior_values=log_prior_values)


def normal_invgamma_model(data, prior_loc, prior_obs, prior_shape, prior_rate):
    """Gaussian with unknown mean and variance, normal-inverse-gamma prior.

    theta | v ~ N(prior_loc, v / prior_obs), v ~ InverseGamma(prior_shape,
    prior_rate).  The variational factors q(theta) q(v) couple through the
    likelihood, so the objective Hessian is nonzero off the diagonal.
    """
    x = np.asarray(data, dtype=float)
    n, sx, sxx = x.size, float(np.sum(x)), float(np.sum(x ** 2))
    if prior_obs <= 0 or prior_shape <= 0 or prior_rate <= 0:
        raise DomainError("prior_obs, prior_shape, prior_rate must be positive")

    layout = Layout([
        BlockDef("theta", Family.GAUSSIAN_UNIVARIATE, labels=("theta",)),
        BlockDef("noise_var", Family.INVERSE_GAMMA, labels=("v",)),
    ])
    hyper = Hyperparams({"prior_loc": prior_loc, "prior_obs": prior_obs,
                         "prior_shape": prior_shape, "prior_rate": prior_rate})
    # coordinates: m = (E[th], E[th^2], E[1/v], E[log v])

    def expected_log_lik(m):
        quad = sxx - 2.0 * sx * m[0] + n * m[1]
        return -0.5 * n * LOG_2PI - 0.5 * n * m[3] - 0.5 * m[2] * quad

    def grad_log_lik(m):
        quad = sxx - 2.0 * sx * m[0] + n * m[1]
        return np.array([m[2] * sx, -0.5 * n * m[2], -0.5 * quad, -0.5 * n])

    def expected_log_prior(m, alpha):
        mu0, k0 = alpha["prior_loc"], alpha["prior_obs"]
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        if k0 <= 0 or a0 <= 0 or b0 <= 0:
            raise DomainError("hyperparameters left the prior domain")
        quad = m[1] - 2.0 * mu0 * m[0] + mu0 ** 2
        loc = -0.5 * LOG_2PI + 0.5 * np.log(k0) - 0.5 * m[3] - 0.5 * k0 * m[2] * quad
        from scipy.special import gammaln
        scale = a0 * np.log(b0) - gammaln(a0) - (a0 + 1.0) * m[3] - b0 * m[2]
        return loc + scale

    def grad_log_prior(m, alpha):
        mu0, k0 = alpha["prior_loc"], alpha["prior_obs"]
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        quad = m[1] - 2.0 * mu0 * m[0] + mu0 ** 2
        return np.array([
            k0 * m[2] * mu0,
            -0.5 * k0 * m[2],
            -0.5 * k0 * quad - b0,
            -0.5 - (a0 + 1.0),
        ])

    def prior_alpha_grad(m, alpha, direction):
        mu0, k0 = alpha["prior_loc"], alpha["prior_obs"]
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        out = np.zeros(4)
        d = direction.get("prior_loc", 0.0)
        if d:
            # d/d mu0 of expected log prior = k0 E[1/v] (m1 - mu0)
            out += d * np.array([k0 * m[2], 0.0, k0 * (m[0] - mu0), 0.0])
        d = direction.get("prior_obs", 0.0)
        if d:
            quad = m[1] - 2.0 * mu0 * m[0] + mu0 ** 2
            out += d * np.array([m[2] * mu0, -0.5 * m[2], -0.5 * quad, 0.0])
        d = direction.get("prior_shape", 0.0)
        if d:
            out += d * np.array([0.0, 0.0, 0.0, -1.0])
        d = direction.get("prior_rate", 0.0)
        if d:
            out += d * np.array([0.0, 0.0, -1.0, 0.0])
        return out

    def prior_block_logpdf(block, point, alpha):
        if block not in ("noise_var", 1):
            raise KeyError(f"prior does not factor across block {block!r}")
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        return float(_IG.log_density(point, _IG.natural_from_standard(a0, b0)))

    def log_lik_values(values):
        th = float(np.asarray(values["theta"]).reshape(-1)[0])
        v = float(np.asarray(values["noise_var"]).reshape(-1)[0])
        quad = sxx - 2.0 * sx * th + n * th ** 2
        return -0.5 * n * LOG_2PI - 0.5 * n * np.log(v) - 0.5 * quad / v

    def log_prior_values(values, alpha):
        mu0, k0 = alpha["prior_loc"], alpha["prior_obs"]
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        th = float(np.asarray(values["theta"]).reshape(-1)[0])
        v = float(np.asarray(values["noise_var"]).reshape(-1)[0])
        from scipy.special import gammaln
        loc = (-0.5 * LOG_2PI + 0.5 * np.log(k0) - 0.5 * np.log(v)
               - 0.5 * k0 * (th - mu0) ** 2 / v)
        scale = (a0 * np.log(b0) - gammaln(a0)
                 - (a0 + 1.0) * np.log(v) - b0 / v)
        return loc + scale

    def default_init(alpha):
        a0, b0 = alpha["prior_shape"], alpha["prior_rate"]
        v0 = b0 / max(a0 - 1.0, 0.5)
        m_theta = _GU.mean_from_standard(alpha["prior_loc"], v0 / alpha["prior_obs"])
        m_v = _IG.mean_from_standard(a0, b0)
        return np.concatenate([m_theta, m_v])

    return ModelSpec(
        name="normal_invgamma", layout=layout, hyperparams=hyper,
        expected_log_lik=expected_log_lik, grad_log_lik=grad_log_lik,
        expected_log_prior=expected_log_prior, grad_log_prior=grad_log_prior,
        default_init=default_init, data={"x": x},
        prior_alpha_grad=prior_alpha_grad,
        prior_block_logpdf={"noise_var": prior_block_logpdf},
        log_lik_values=log_lik_values, log_prior_values=log_prior_values)


def gaussian_target_model(nat_loc, info):
    """d-dimensional Gaussian target with fixed precision, factorized fit.

    The exact distribution is N(info^-1 nat_loc, info^-1); the variational
    family is a product of scalar Gaussians, so the fitted marginal
    variances are 1/info_ii while the corrected covariance recovers the
    full inverse.  Hyperparameters are the natural coordinates: the linear
    term ``nat_loc_i`` and the precision entries ``info_ij``.
    """
    nat_loc = np.asarray(nat_loc, dtype=float)
    info = np.asarray(info, dtype=float)
    d = nat_loc.size
    if info.shape != (d, d) or not np.allclose(info, info.T):
        raise DomainError("precision matrix must be square and symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError as exc:
        raise DomainError("precision matrix must be positive definite") from exc

    layout = Layout([BlockDef(f"theta_{i+1}", Family.GAUSSIAN_UNIVARIATE,
                              labels=(f"theta_{i+1}",)) for i in range(d)])
    entries = {f"nat_loc_{i+1}": nat_loc[i] for i in range(d)}
    for i in range(d):
        for j in range(i + 1):
            entries[f"info_{i+1}{j+1}"] = info[i, j]
    hyper = Hyperparams(entries)
    loc_idx = np.arange(d) * 2       # E[theta_i]
    sq_idx = loc_idx + 1             # E[theta_i^2]

    def _unpack(alpha):
        h = np.array([alpha[f"nat_loc_{i+1}"] for i in range(d)])
        lam = np.zeros((d, d))
        for i in range(d):
            for j in range(i + 1):
                lam[i, j] = lam[j, i] = alpha[f"info_{i+1}{j+1}"]
        return h, lam

    def expected_log_lik(m):
        return 0.0

    def grad_log_lik(m):
        return np.zeros(2 * d)

    def expected_log_prior(m, alpha):
        h, lam = _unpack(alpha)
        sign, logdet = np.linalg.slogdet(lam)
        if sign <= 0:
            raise DomainError("precision hyperparameters left the PD cone")
        mu = m[loc_idx]
        quad = float(np.diag(lam) @ m[sq_idx])
        quad += float(mu @ (lam - np.diag(np.diag(lam))) @ mu)
        return float(h @ mu) - 0.5 * quad + 0.5 * logdet - 0.5 * d * LOG_2PI

    def grad_log_prior(m, alpha):
        h, lam = _unpack(alpha)
        mu = m[loc_idx]
        g = np.zeros(2 * d)
        off = lam - np.diag(np.diag(lam))
        g[loc_idx] = h - off @ mu
        g[sq_idx] = -0.5 * np.diag(lam)
        return g

    def prior_alpha_grad(m, alpha, direction):
        mu = m[loc_idx]
        out = np.zeros(2 * d)
        for i in range(d):
            c = direction.get(f"nat_loc_{i+1}", 0.0)
            if c:
                out[loc_idx[i]] += c
        for i in range(d):
            for j in range(i + 1):
                c = direction.get(f"info_{i+1}{j+1}", 0.0)
                if not c:
                    continue
                if i == j:
                    out[sq_idx[i]] += -0.5 * c
                else:
                    # term -lam_ij mu_i mu_j in the objective
                    out[loc_idx[i]] += -c * mu[j]
                    out[loc_idx[j]] += -c * mu[i]
        return out

    def log_lik_values(values):
        return 0.0

    def log_prior_values(values, alpha):
        h, lam = _unpack(alpha)
        th = np.array([float(np.asarray(values[f"theta_{i+1}"]).reshape(-1)[0])
                       for i in range(d)])
        sign, logdet = np.linalg.slogdet(lam)
        return float(h @ th) - 0.5 * float(th @ lam @ th) + 0.5 * logdet - 0.5 * d * LOG_2PI

    def default_init(alpha):
        h, lam = _unpack(alpha)
        cov = np.linalg.inv(lam)
        mu = cov @ h
        m = np.empty(2 * d)
        m[loc_idx] = mu
        m[sq_idx] = mu ** 2 + np.diag(cov)
        return m

    prior_pdfs = {}
    if np.allclose(info, np.diag(np.diag(info))):
        def _make(i):
            def pdf(block, point, alpha):
                hh, ll = _unpack(alpha)
                eta = np.array([hh[i], -0.5 * ll[i, i]])
                return float(_GU.log_density(point, eta))
            return pdf
        prior_pdfs = {f"theta_{i+1}": _make(i) for i in range(d)}

    return ModelSpec(
        name="gaussian_target", layout=layout, hyperparams=hyper,
        expected_log_lik=expected_log_lik, grad_log_lik=grad_log_lik,
        expected_log_prior=expected_log_prior, grad_log_prior=grad_log_prior,
        default_init=default_init, data=None,
        prior_alpha_grad=prior_alpha_grad, prior_block_logpdf=prior_pdfs,
        log_lik_values=log_lik_values, log_prior_values=log_prior_values)
