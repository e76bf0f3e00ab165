"""Local prior-robustness measures at a converged fit.

Four measures, all priced through one factorized linear-response solve:

* hyperparameter sensitivity -- derivative of every posterior mean with
  respect to a direction in hyperparameter space;
* contamination sensitivity -- derivative under mixing a block's prior
  with a contaminating distribution at weight eps;
* influence function -- the contamination derivative for a point mass,
  as a closed form in the fitted density ratio;
* worst-case perturbation -- the extremal contaminating density of unit
  p-norm size and the bound it attains.

Grid and batch evaluations reuse the system's LU factors and are safe to
run concurrently against one LrvbSystem; set LRVB_THREADS to cap the
worker threads used for large influence grids.

Conventions.  The influence-function column carries the displacement of
the perturbed block's plain location statistics (Gaussian blocks), with
the block's higher-order moment coordinates zeroed, so the influence of
a point mass at the fitted mean is identically zero; Dirac contamination
delegates to the same construction.  Density contaminations and the
worst-case machinery integrate the full statistic displacement, which is
the exact fixed-point derivative.
"""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .errors import (DimensionMismatch, DomainError, NonDifferentiablePrior,
                     NormalizationFailure, QuadratureFailure, ZeroPriorDensity)
from .expfam import FAMILIES, Family
from .oracle import block_quad_bounds, quadrature_expectation

MIN_PRIOR_DENSITY_LOG = np.log(1e-300)
CONTAMINATION_REL_TOL = 1e-6
ALPHA_FD_REL_STEP = 1e-6


# ---------------------------------------------------------------------------
# query types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContaminationSpec:
    """One epsilon-contamination direction for a single block's prior.

    ``contaminant`` is ("dirac", point) or ("density", logpdf callable).
    The derivative is taken at eps = 0.  Requires the prior and the
    variational distribution to factor across the chosen block, and for
    density contaminants that the density integrates to one (checked by
    quadrature to 1e-4).
    """

    block: Union[str, int]
    contaminant: tuple
    epsilon: float = 0.0

    def validated(self, model):
        layout = model.layout
        idx = self.block if isinstance(self.block, int) else layout.block_index(self.block)
        name = layout.blocks[idx].name
        if name not in model.prior_block_logpdf:
            raise DomainError(
                f"prior does not factor across block {name!r}; "
                f"factorized blocks: {sorted(model.prior_block_logpdf)}")
        kind, payload = self.contaminant
        if kind not in ("dirac", "density"):
            raise DomainError(f"unknown contaminant kind {kind!r}")
        if kind == "density":
            bounds = _density_bounds(model, idx)
            total, _ = quadrature_expectation(
                lambda x: np.exp(payload(x)), lambda x: 1.0, bounds, tol=1e-4)
            if abs(total - 1.0) > 1e-4:
                raise DomainError(
                    f"contaminant density integrates to {total:.6f}, not 1")
        return idx


@dataclass(frozen=True)
class SensitivityQuery:
    """Named (target, direction) pair for report assembly.

    ``target`` is a mean-coordinate name or an explicit gradient vector of
    the tracked quantity with respect to the means; ``direction`` is a
    {hyperparameter: coefficient} dict or a ContaminationSpec.
    """

    quantity: str
    target: Union[str, np.ndarray]
    direction: Union[dict, ContaminationSpec]
    direction_label: str = ""

    def label(self):
        if self.direction_label:
            return self.direction_label
        if isinstance(self.direction, ContaminationSpec):
            return f"contamination[{self.direction.block}]"
        return "+".join(f"{v:g}*{k}" for k, v in self.direction.items())


@dataclass(frozen=True)
class ReportEntry:
    quantity: str
    direction: str
    value: Optional[float]
    normalized: Optional[float]
    error: Optional[str] = None


@dataclass(frozen=True)
class SensitivityReport:
    entries: tuple
    model_hash: str
    solution_hash: str


@dataclass(frozen=True)
class WorstCaseResult:
    """Extremal unit-size prior perturbation for one block and target."""

    a_values: Callable
    p_norm: float
    worst_density: Callable
    attained_derivative: float


# ---------------------------------------------------------------------------
# hyperparameter sensitivity
# ---------------------------------------------------------------------------


def prior_direction_gradient(model, m, direction, alpha=None,
                             rel_step=ALPHA_FD_REL_STEP):
    """d/dm of the directional alpha-derivative of the expected log prior.

    Uses the model's analytic cross-derivative when available, otherwise
    central finite differences of the prior gradient over alpha.
    """
    alpha = model.resolve_alpha(alpha)
    m = np.asarray(m, dtype=float)
    if model.prior_alpha_grad is not None:
        return np.asarray(model.prior_alpha_grad(m, alpha, dict(direction)),
                          dtype=float)
    scale = max([abs(alpha[k]) for k in direction] + [1.0])
    size = max(abs(v) for v in direction.values())
    h = rel_step * scale / size
    try:
        gp = model.grad_log_prior(m, alpha.perturbed(direction, h))
        gm = model.grad_log_prior(m, alpha.perturbed(direction, -h))
    except DomainError as exc:
        raise NonDifferentiablePrior(
            f"prior gradient failed under perturbation {direction}: {exc}") from exc
    return (np.asarray(gp) - np.asarray(gm)) / (2.0 * h)


def hyperparam_sensitivity(model, sol, sys, direction, alpha=None):
    """Derivative of every posterior mean along a hyperparameter direction."""
    grad_f = prior_direction_gradient(model, sol.mean, direction, alpha)
    if grad_f.shape != (sys.dim,):
        raise DimensionMismatch(f"direction gradient has shape {grad_f.shape}")
    return sys.sigma_hat @ grad_f


# ---------------------------------------------------------------------------
# influence functions and contamination
# ---------------------------------------------------------------------------


def _block_setup(model, sys, block, alpha):
    layout = model.layout
    idx = block if isinstance(block, int) else layout.block_index(block)
    bdef = layout.blocks[idx]
    sl = layout.slice_of(idx)
    mb = sys.mean[sl]
    fam = FAMILIES[bdef.family]
    eta = fam.natural_from_mean(np.asarray(mb, dtype=float), bdef.var_dim)
    return idx, bdef, sl, mb, fam, eta


def _log_ratio(model, fam, eta, bdef, point, alpha):
    name = bdef.name
    log_p = model.prior_block_logpdf[name](name, point, alpha)
    if log_p < MIN_PRIOR_DENSITY_LOG:
        raise ZeroPriorDensity(
            f"prior density underflows at {point!r} (log density {log_p:.1f})")
    log_q = float(fam.log_density(point, eta))
    return log_q - log_p


def influence_function(model, sol, sys, block, point, alpha=None):
    """Response of all posterior means to a point mass added to one
    block's prior.

    Returns q(point)/p(point) times the solve of (I - VH) against the
    location displacement of the block (see module docstring for the
    convention on higher-order coordinates).
    """
    alpha = model.resolve_alpha(alpha)
    rhs = _influence_rhs(model, sys, block, np.atleast_2d(point), alpha)
    return sys.solve_identity_minus_vh(rhs[:, 0])


def _influence_rhs(model, sys, block, points, alpha):
    """Stacked influence right-hand sides, one column per grid point."""
    idx, bdef, sl, mb, fam, eta = _block_setup(model, sys, block, alpha)
    layout = model.layout
    if bdef.family is Family.GAUSSIAN_UNIVARIATE:
        points = np.asarray(points, dtype=float).reshape(-1, 1)
    elif bdef.family is Family.GAUSSIAN_MULTIVARIATE:
        points = np.asarray(points, dtype=float).reshape(-1, bdef.var_dim)
    else:
        raise DomainError(
            f"influence points are defined for Gaussian blocks, not {bdef.family}")
    loc = layout.location_indices(idx)
    rhs = np.zeros((layout.dim, points.shape[0]))
    for col, pt in enumerate(points):
        val = pt[0] if bdef.family is Family.GAUSSIAN_UNIVARIATE else pt
        ratio = np.exp(_log_ratio(model, fam, eta, bdef, val, alpha))
        rhs[loc, col] = ratio * (pt - sys.mean[loc])
    return rhs


def influence_grid(model, sol, sys, block, points, alpha=None, max_threads=None):
    """Influence vectors over many points through one shared factorization.

    Returns an array of shape (n_points, dim).  Column batches may be
    solved in parallel; LRVB_THREADS (or ``max_threads``) caps the pool.
    """
    alpha = model.resolve_alpha(alpha)
    rhs = _influence_rhs(model, sys, block, points, alpha)
    if max_threads is None:
        max_threads = int(os.environ.get("LRVB_THREADS", "1"))
    n = rhs.shape[1]
    if max_threads <= 1 or n < 64:
        return sys.solve_identity_minus_vh(rhs).T
    chunks = np.array_split(np.arange(n), max_threads)
    out = np.empty((sys.dim, n))
    with ThreadPoolExecutor(max_workers=max_threads) as pool:
        futures = {pool.submit(sys.solve_identity_minus_vh, rhs[:, c]): c
                   for c in chunks if c.size}
        for fut, c in futures.items():
            out[:, c] = fut.result()
    return out.T


def contamination_sensitivity(model, sol, sys, spec, target, alpha=None):
    """Derivative of a tracked quantity under epsilon-contamination.

    ``target`` is the gradient of the quantity with respect to the means
    (or a mean-coordinate name).  Dirac contaminants reduce to the
    influence function; density contaminants integrate the full statistic
    displacement against the density ratio.
    """
    alpha = model.resolve_alpha(alpha)
    grad_h = resolve_target(model.layout, target)
    idx = spec.validated(model)
    kind, payload = spec.contaminant
    if kind == "dirac":
        vec = influence_function(model, sol, sys, idx, payload, alpha)
        return float(grad_h @ vec)
    rhs = _density_contamination_rhs(model, sys, idx, payload, alpha)
    return float(grad_h @ sys.solve_identity_minus_vh(rhs))


def _density_bounds(model, idx):
    bdef = model.layout.blocks[idx]
    if bdef.family in (Family.GAUSSIAN_MULTIVARIATE, Family.WISHART):
        raise DomainError("density contamination supports scalar blocks; "
                          "use weighted point masses for matrix blocks")
    return block_quad_bounds(bdef.family)


def _density_contamination_rhs(model, sys, idx, pc_logpdf, alpha):
    """E_q[(s(x) - m) p_c(x)/p(x)] over the contaminated block."""
    _, bdef, sl, mb, fam, eta = _block_setup(model, sys, idx, alpha)
    bounds = _density_bounds(model, idx)
    name = bdef.name

    def qdens(x):
        return np.exp(fam.log_density(x, eta))

    def ratio(x):
        return np.exp(pc_logpdf(x) - model.prior_block_logpdf[name](name, x, alpha))

    rhs = np.zeros(sys.dim)
    coords = np.arange(sl.start, sl.stop)
    for j, c in enumerate(coords):
        def integrand(x, j=j):
            return (fam.suff_stats(x)[0, j] - mb[j]) * ratio(x)
        val, err = quadrature_expectation(qdens, integrand, bounds, tol=1e-9)
        if err > max(CONTAMINATION_REL_TOL * abs(val), 1e-9):
            raise QuadratureFailure(
                f"contamination integral error {err:.3g} too large for value {val:.3g}")
        rhs[c] = val
    return rhs


# ---------------------------------------------------------------------------
# worst-case perturbations
# ---------------------------------------------------------------------------


def worst_case_perturbation(model, sol, sys, block, target, p_norm, alpha=None):
    """Extremal prior perturbation of unit p-norm size for one block.

    The response functional is a(x) = row (s(x) - m) q(x)/p(x) with row
    the target gradient pushed through (I - VH)^-1.  The extremal density
    profile is p(x) |a(x)|^(1/(p-1)) normalized to unit perturbation
    size; the attained derivative is the conjugate-norm of a, which
    bounds every unit-size perturbation's derivative.
    """
    alpha = model.resolve_alpha(alpha)
    if not (1.0 < p_norm < np.inf):
        raise DomainError(f"p_norm must lie in (1, inf), got {p_norm}")
    grad_h = resolve_target(model.layout, target)
    idx, bdef, sl, mb, fam, eta = _block_setup(model, sys, block, alpha)
    if bdef.family is Family.GAUSSIAN_MULTIVARIATE or bdef.family is Family.WISHART:
        raise DomainError("worst-case perturbations support scalar blocks")
    row = sys.solve_transpose(grad_h)[sl]
    name = bdef.name

    def a_values(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        stats = fam.suff_stats(x)
        log_p = np.array([model.prior_block_logpdf[name](name, xi, alpha) for xi in x])
        log_q = np.array([float(fam.log_density(xi, eta)) for xi in x])
        disp = (stats - mb) @ row
        out = disp * np.exp(log_q - log_p)
        return out if out.size > 1 else float(out[0])

    q_conj = p_norm / (p_norm - 1.0)
    bounds = block_quad_bounds(bdef.family)

    def prior_dens(x):
        return np.exp(model.prior_block_logpdf[name](name, x, alpha))

    try:
        norm_q, _ = quadrature_expectation(
            prior_dens, lambda x: abs(a_values(x)) ** q_conj, bounds, tol=1e-9)
    except QuadratureFailure as exc:
        raise NormalizationFailure(str(exc)) from exc
    if not np.isfinite(norm_q) or norm_q <= 0:
        raise NormalizationFailure(
            f"conjugate-norm integral is {norm_q}; extremal density undefined")
    attained = norm_q ** (1.0 / q_conj)
    size_norm = norm_q ** (1.0 / p_norm)

    def worst_density(x):
        return prior_dens(x) * np.abs(a_values(x)) ** (1.0 / (p_norm - 1.0)) / size_norm

    return WorstCaseResult(a_values=a_values, p_norm=float(p_norm),
                           worst_density=worst_density,
                           attained_derivative=float(attained))


def perturbation_derivative(model, sol, sys, block, target, pc_over_p, alpha=None):
    """Derivative under a signed perturbation given as a ratio p_c/p.

    Integrates a(x) (p_c/p)(x) against the prior; used to test the
    worst-case bound against arbitrary unit-size perturbations.
    """
    alpha = model.resolve_alpha(alpha)
    grad_h = resolve_target(model.layout, target)
    idx, bdef, sl, mb, fam, eta = _block_setup(model, sys, block, alpha)
    row = sys.solve_transpose(grad_h)[sl]
    name = bdef.name
    bounds = block_quad_bounds(bdef.family)

    def prior_dens(x):
        return np.exp(model.prior_block_logpdf[name](name, x, alpha))

    def a_of(x):
        stats = fam.suff_stats(x)[0]
        lr = (float(fam.log_density(x, eta))
              - model.prior_block_logpdf[name](name, x, alpha))
        return float((stats - mb) @ row) * np.exp(lr)

    val, _ = quadrature_expectation(prior_dens, lambda x: a_of(x) * pc_over_p(x),
                                    bounds, tol=1e-8)
    return float(val)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def resolve_target(layout, target):
    """Mean-coordinate name or explicit gradient -> gradient vector."""
    if isinstance(target, str):
        grad = np.zeros(layout.dim)
        grad[layout.coord_index(target)] = 1.0
        return grad
    grad = np.asarray(target, dtype=float)
    if grad.shape != (layout.dim,):
        raise DimensionMismatch(
            f"target gradient has shape {grad.shape}, expected ({layout.dim},)")
    return grad


def make_report(queries, model, sol, sys, alpha=None):
    """Evaluate queries into a report with per-posterior-sd normalization.

    Per-query failures become error entries instead of aborting the
    batch; a zero-variance target is reported as an error, not a division
    by zero.
    """
    alpha = model.resolve_alpha(alpha)
    entries = []
    for query in queries:
        try:
            grad_h = resolve_target(model.layout, query.target)
            if isinstance(query.direction, ContaminationSpec):
                value = contamination_sensitivity(model, sol, sys,
                                                  query.direction, grad_h, alpha)
            else:
                full = hyperparam_sensitivity(model, sol, sys, query.direction, alpha)
                value = float(grad_h @ full)
            variance = float(grad_h @ sys.sigma_hat @ grad_h)
            if variance <= 0:
                raise DomainError(
                    f"quantity {query.quantity!r} has nonpositive posterior "
                    f"variance {variance:.3g}")
            entries.append(ReportEntry(
                quantity=query.quantity, direction=query.label(),
                value=value, normalized=value / np.sqrt(variance)))
        except Exception as exc:  # keep batch going, tag the failing entry
            entries.append(ReportEntry(
                quantity=query.quantity, direction=query.label(),
                value=None, normalized=None,
                error=f"{type(exc).__name__}: {exc}"))
    return SensitivityReport(entries=tuple(entries),
                             model_hash=model_fingerprint(model, alpha),
                             solution_hash=solution_fingerprint(sol))


def model_fingerprint(model, alpha=None):
    alpha = model.resolve_alpha(alpha)
    blob = (model.name + "|" + ",".join(model.layout.coord_names()) + "|"
            + ",".join(f"{k}={v!r}" for k, v in alpha.items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def solution_fingerprint(sol):
    return hashlib.sha256(np.asarray(sol.mean, dtype=float).tobytes()).hexdigest()[:16]
