"""Mean-field variational fits over products of exponential-family blocks.

A model is specified by its block layout, a hyperparameter record, and
closed-form maps from the stacked mean-parameter vector ``m`` to the
expected log likelihood and expected log prior (plus their gradients in
``m``).  The fit maximizes ``expected_log_lik + expected_log_prior +
entropy`` over ``m``; the stationarity condition is ``natural(m) =
grad_L(m)``.

Optimization runs in unconstrained per-block coordinates (means stay
untouched, positive scalars are log-transformed, positive-definite
matrices are Cholesky-parameterized), so every iterate is automatically
inside the product of block domains.  A quasi-Newton pass is followed by
damped Newton polishing to push the gradient norm to the requested
tolerance; the downstream covariance correction needs a tight optimum.

ModelSpec and VbSolution are immutable after construction; fits of
distinct models may run concurrently.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np
import scipy.linalg
import scipy.optimize

from . import expfam
from .errors import DomainError, DomainViolation, NonConvergence
from .expfam import FAMILIES, Family
from .util import unvech, vech_dim


@dataclass(frozen=True)
class BlockDef:
    """Name, family, and underlying-variable dimension of one factor."""

    name: str
    family: Family
    var_dim: int = 1
    labels: tuple = ()

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", (self.name,))

    @property
    def stat_dim(self):
        return FAMILIES[self.family].stat_dim(self.var_dim)


class Layout:
    """Stacked coordinate bookkeeping for an ordered list of blocks."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate block names in {names}")
        self._index = {b.name: i for i, b in enumerate(self.blocks)}
        offsets = np.cumsum([0] + [b.stat_dim for b in self.blocks])
        self.offsets = offsets
        self.dim = int(offsets[-1])

    def __iter__(self):
        return iter(self.blocks)

    def block_index(self, name):
        return self._index[name]

    def slice_of(self, block):
        i = block if isinstance(block, int) else self._index[block]
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def split(self, m):
        return [np.asarray(m)[self.slice_of(i)] for i in range(len(self.blocks))]

    def coord_names(self):
        names = []
        for b in self.blocks:
            lab = b.labels
            if b.family in (Family.GAUSSIAN_UNIVARIATE, Family.GAUSSIAN_MULTIVARIATE):
                names.extend(lab)
                rows, cols = np.tril_indices(b.var_dim)
                names.extend(f"{lab[i]}*{lab[j]}" for i, j in zip(rows, cols))
            elif b.family is Family.GAMMA:
                names.extend([lab[0], f"log({lab[0]})"])
            elif b.family is Family.INVERSE_GAMMA:
                names.extend([f"1/{lab[0]}", f"log({lab[0]})"])
            else:  # Wishart
                rows, cols = np.tril_indices(b.var_dim)
                names.extend(f"{b.name}[{i},{j}]" for i, j in zip(rows, cols))
                names.append(f"logdet({b.name})")
        return names

    def location_indices(self, block=None):
        """Indices of plain location statistics (Gaussian blocks only)."""
        idx = []
        items = self.blocks if block is None else (
            self.blocks[block if isinstance(block, int) else self._index[block]],)
        for b in items:
            off = self.offsets[self._index[b.name]]
            if b.family is Family.GAUSSIAN_UNIVARIATE:
                idx.append(off)
            elif b.family is Family.GAUSSIAN_MULTIVARIATE:
                idx.extend(off + np.arange(b.var_dim))
        return np.asarray(idx, dtype=int)

    def coord_index(self, name):
        return self.coord_names().index(name)

    # --- domain checks and dual coordinates -------------------------------

    def check_mean(self, m):
        m = np.asarray(m, dtype=float)
        if m.shape != (self.dim,):
            raise DomainError(f"mean vector has shape {m.shape}, expected ({self.dim},)")
        for b, mb in zip(self.blocks, self.split(m)):
            FAMILIES[b.family].check_mean(mb, b.var_dim)

    def natural_vector(self, m):
        """Per-block natural parameters stacked to match the mean layout."""
        out = np.empty(self.dim)
        for i, (b, mb) in enumerate(zip(self.blocks, self.split(m))):
            out[self.slice_of(i)] = FAMILIES[b.family].natural_from_mean(mb, b.var_dim)
        return out

    def entropy(self, m):
        total = 0.0
        for b, mb in zip(self.blocks, self.split(m)):
            blk = expfam.ExpFamBlock.from_mean(b.family, mb)
            total += expfam.entropy(blk)
        return total

    def suff_stat_cov(self, m):
        """Block-diagonal covariance of the sufficient statistics at m."""
        out = np.zeros((self.dim, self.dim))
        for i, (b, mb) in enumerate(zip(self.blocks, self.split(m))):
            fam = FAMILIES[b.family]
            eta = fam.natural_from_mean(mb, b.var_dim)
            sl = self.slice_of(i)
            out[sl, sl] = fam.suff_stat_cov(eta)
        return out

    # --- unconstrained fit coordinates ------------------------------------
    # Every family's unconstrained vector has the same length as its
    # statistic vector, so z and m share offsets.

    def unconstrained_from_mean(self, m):
        z = np.empty(self.dim)
        for i, (b, mb) in enumerate(zip(self.blocks, self.split(m))):
            fam = FAMILIES[b.family]
            params = fam.standard_from_mean(np.asarray(mb, dtype=float))
            z[self.slice_of(i)] = fam.unconstrained_from_standard(*params)
        return z

    def mean_from_unconstrained(self, z):
        m = np.empty(self.dim)
        for i, b in enumerate(self.blocks):
            fam = FAMILIES[b.family]
            params = fam.standard_from_unconstrained(z[self.slice_of(i)])
            m[self.slice_of(i)] = fam.mean_from_standard(*params)
        return m

    def natural_from_unconstrained(self, z):
        eta = np.empty(self.dim)
        for i, b in enumerate(self.blocks):
            fam = FAMILIES[b.family]
            params = fam.standard_from_unconstrained(z[self.slice_of(i)])
            eta[self.slice_of(i)] = fam.natural_from_standard(*params)
        return eta

    def entropy_from_unconstrained(self, z):
        total = 0.0
        for i, b in enumerate(self.blocks):
            fam = FAMILIES[b.family]
            params = fam.standard_from_unconstrained(z[self.slice_of(i)])
            eta = fam.natural_from_standard(*params)
            m = fam.mean_from_standard(*params)
            total += fam.log_partition(eta) - float(eta @ m)
        return total

    def mean_jacobian(self, z):
        """Block-diagonal d mean / d unconstrained."""
        jac = np.zeros((self.dim, self.dim))
        for i, b in enumerate(self.blocks):
            sl = self.slice_of(i)
            jac[sl, sl] = FAMILIES[b.family].mean_jacobian_unconstrained(z[sl])
        return jac

    # --- underlying-variable (sampler/oracle) coordinates -----------------
    # The per-block unconstrained value vector also has one coordinate per
    # scalar degree of freedom: identity for Gaussians, log for positive
    # scalars, log-Cholesky for matrices.

    def value_dims(self):
        dims = []
        for b in self.blocks:
            if b.family is Family.GAUSSIAN_UNIVARIATE:
                dims.append(1)
            elif b.family is Family.GAUSSIAN_MULTIVARIATE:
                dims.append(b.var_dim)
            elif b.family is Family.WISHART:
                dims.append(vech_dim(b.var_dim))
            else:
                dims.append(1)
        return dims

    def value_dim(self):
        return sum(self.value_dims())

    def values_from_sampler(self, zv):
        """Map an unconstrained sampler vector to per-block variable values.

        Returns (values dict, total log-Jacobian of the transform).
        """
        values = {}
        logjac = 0.0
        pos = 0
        for b, d in zip(self.blocks, self.value_dims()):
            x, lj = FAMILIES[b.family].value_from_unconstrained(zv[pos:pos + d])
            if b.family is Family.GAUSSIAN_UNIVARIATE or (
                    b.family in (Family.GAMMA, Family.INVERSE_GAMMA)):
                x = float(np.asarray(x).reshape(-1)[0])
            values[b.name] = x
            logjac += lj
            pos += d
        return values, logjac

    def sampler_from_values(self, values):
        parts = []
        for b in self.blocks:
            parts.append(np.atleast_1d(
                FAMILIES[b.family].unconstrained_from_value(values[b.name])))
        return np.concatenate(parts)

    def suff_stats_of_values(self, values):
        """Stacked sufficient statistics of one draw, in mean layout."""
        out = np.empty(self.dim)
        for i, b in enumerate(self.blocks):
            stats = FAMILIES[b.family].suff_stats(values[b.name])
            out[self.slice_of(i)] = stats[0]
        return out

    def representative_values(self, m):
        """Central per-block variable values, e.g. to seed a sampler."""
        values = {}
        for b, mb in zip(self.blocks, self.split(m)):
            fam = FAMILIES[b.family]
            if b.family is Family.GAUSSIAN_UNIVARIATE:
                values[b.name] = float(mb[0])
            elif b.family is Family.GAUSSIAN_MULTIVARIATE:
                values[b.name] = np.asarray(mb[:b.var_dim], dtype=float)
            elif b.family in (Family.GAMMA, Family.INVERSE_GAMMA):
                shape, rate = fam.standard_from_mean(np.asarray(mb, dtype=float))
                if b.family is Family.GAMMA:
                    values[b.name] = shape / rate
                else:
                    values[b.name] = rate / max(shape - 1.0, 0.5)
            else:
                values[b.name] = unvech(mb[:-1], b.var_dim)  # E[X]
        return values

    def suff_stats_of_sampler_matrix(self, zmat):
        """Vectorized sufficient statistics for rows of sampler draws."""
        zmat = np.asarray(zmat, dtype=float)
        n = zmat.shape[0]
        out = np.empty((n, self.dim))
        pos = 0
        for i, (b, d) in enumerate(zip(self.blocks, self.value_dims())):
            sl = self.slice_of(i)
            z = zmat[:, pos:pos + d]
            if b.family is Family.GAUSSIAN_UNIVARIATE:
                out[:, sl] = np.column_stack([z[:, 0], z[:, 0] ** 2])
            elif b.family is Family.GAUSSIAN_MULTIVARIATE:
                rows, cols = np.tril_indices(b.var_dim)
                out[:, sl] = np.column_stack([z, z[:, rows] * z[:, cols]])
            elif b.family in (Family.GAMMA, Family.INVERSE_GAMMA):
                first = np.exp(z[:, 0]) if b.family is Family.GAMMA else np.exp(-z[:, 0])
                out[:, sl] = np.column_stack([first, z[:, 0]])
            else:  # Wishart: log-Cholesky coordinates
                k = b.var_dim
                chol = np.zeros((n, k, k))
                logdet = np.zeros(n)
                idx = 0
                for r in range(k):
                    for c in range(r + 1):
                        if r == c:
                            chol[:, r, c] = np.exp(z[:, idx])
                            logdet += 2.0 * z[:, idx]
                        else:
                            chol[:, r, c] = z[:, idx]
                        idx += 1
                mats = np.einsum("nij,nkj->nik", chol, chol)
                rows, cols = np.tril_indices(k)
                out[:, sl] = np.column_stack([mats[:, rows, cols], logdet])
            pos += d
        return out


class Hyperparams(Mapping):
    """Ordered record of scalar hyperparameters, addressable by name."""

    def __init__(self, entries):
        self._entries = dict(entries)
        for k, v in self._entries.items():
            self._entries[k] = float(v)

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    @property
    def names(self):
        return tuple(self._entries)

    def as_vector(self):
        return np.array(list(self._entries.values()))

    def with_updates(self, **updates):
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise KeyError(f"unknown hyperparameters {sorted(unknown)}; "
                           f"valid keys: {sorted(self._entries)}")
        merged = dict(self._entries)
        merged.update(updates)
        return Hyperparams(merged)

    def perturbed(self, direction, t):
        """Shift by t along a {name: coefficient} direction."""
        updates = {k: self._entries[k] + t * v for k, v in direction.items()}
        return self.with_updates(**updates)

    def __repr__(self):
        inner = ", ".join(f"{k}={v:g}" for k, v in self._entries.items())
        return f"Hyperparams({inner})"


@dataclass(frozen=True)
class ModelSpec:
    """Blocks plus differentiable expected log likelihood and log prior.

    ``expected_log_lik(m)`` and ``expected_log_prior(m, alpha)`` must be
    deterministic closed forms of the mean vector; their gradients are
    exact, which is what lets the fit reach tight tolerances and keeps
    the downstream Hessian noise-free.

    Optional hooks:

    * ``prior_alpha_grad(m, alpha, direction)`` -- analytic
      d/dm [d expected_log_prior / d alpha . direction]; when absent the
      robustness module falls back to differencing ``grad_log_prior``
      over alpha.
    * ``prior_block_logpdf`` -- per-block marginal prior log density for
      the blocks across which the prior factorizes (required by
      influence-function and contamination queries on that block).
    * ``log_lik_values`` / ``log_prior_values`` -- pointwise log
      likelihood and prior over a dict of per-block variable values; used
      by the MCMC and quadrature oracles, never by the fit itself.
    """

    name: str
    layout: Layout
    hyperparams: Hyperparams
    expected_log_lik: Callable
    grad_log_lik: Callable
    expected_log_prior: Callable
    grad_log_prior: Callable
    default_init: Callable
    data: Any = None
    prior_alpha_grad: Optional[Callable] = None
    prior_block_logpdf: Mapping = field(default_factory=dict)
    log_lik_values: Optional[Callable] = None
    log_prior_values: Optional[Callable] = None
    # optional factory alpha -> (sampler vector -> log posterior + Jacobian);
    # a hand-vectorized equivalent of the generic pointwise path for hot
    # sampling loops.  Must match the generic path exactly.
    sampler_log_posterior: Optional[Callable] = None

    def resolve_alpha(self, alpha):
        return self.hyperparams if alpha is None else alpha


def elbo(model, m, alpha=None):
    """Expected log joint plus entropy at mean vector m."""
    alpha = model.resolve_alpha(alpha)
    model.layout.check_mean(m)
    m = np.asarray(m, dtype=float)
    value = (model.expected_log_lik(m) + model.expected_log_prior(m, alpha)
             + model.layout.entropy(m))
    if not np.isfinite(value):
        raise DomainError(f"objective not finite at the given mean vector ({value})")
    return float(value)


def elbo_grad_mean(model, m, alpha=None):
    """Gradient of the objective in mean coordinates: grad_L(m) - natural(m)."""
    alpha = model.resolve_alpha(alpha)
    m = np.asarray(m, dtype=float)
    return (model.grad_log_lik(m) + model.grad_log_prior(m, alpha)
            - model.layout.natural_vector(m))


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8          # max-abs gradient in unconstrained coordinates
    max_iter: int = 10_000
    polish_iter: int = 60      # damped Newton steps after quasi-Newton stage


@dataclass(frozen=True)
class VbSolution:
    """Converged mean parameters with fit diagnostics."""

    mean: np.ndarray
    elbo: float
    iterations: int
    converged: bool
    grad_norm: float
    elbo_trace: tuple = ()


def fit(model, init=None, opts=None, alpha=None):
    """Maximize the objective; returns a VbSolution or raises NonConvergence.

    Deterministic for fixed (model, init, opts).  Accepted steps never
    decrease the objective; the per-step values are kept in
    ``elbo_trace``.
    """
    opts = opts or FitOptions()
    alpha = model.resolve_alpha(alpha)
    layout = model.layout
    m0 = np.asarray(init if init is not None else model.default_init(alpha), dtype=float)
    layout.check_mean(m0)
    z0 = layout.unconstrained_from_mean(m0)

    def value_grad(z):
        try:
            with np.errstate(all="ignore"):
                m = layout.mean_from_unconstrained(z)
                val = (model.expected_log_lik(m)
                       + model.expected_log_prior(m, alpha)
                       + layout.entropy_from_unconstrained(z))
                if not np.isfinite(val):
                    return np.inf, np.zeros_like(z)
                gm = (model.grad_log_lik(m) + model.grad_log_prior(m, alpha)
                      - layout.natural_from_unconstrained(z))
                gz = layout.mean_jacobian(z).T @ gm
                if not np.all(np.isfinite(gz)):
                    return np.inf, np.zeros_like(z)
                return -val, -gz
        except (DomainError, np.linalg.LinAlgError, OverflowError):
            return np.inf, np.zeros_like(z)

    trace = []

    def record(zk):
        trace.append(-value_grad(zk)[0])

    record(z0)
    res = scipy.optimize.minimize(
        value_grad, z0, jac=True, method="L-BFGS-B", callback=record,
        options={"maxiter": opts.max_iter, "ftol": 1e-14, "gtol": opts.tol / 10.0,
                 "maxcor": 30, "maxls": 60})
    z = res.x
    iterations = int(res.nit)

    # Damped Newton polish: quasi-Newton alone rarely reaches 1e-8.
    fz, gz = value_grad(z)
    for _ in range(opts.polish_iter):
        gnorm = np.max(np.abs(gz))
        if gnorm <= opts.tol:
            break
        hess = _fd_grad_jacobian(lambda zz: value_grad(zz)[1], z)
        hess = (hess + hess.T) / 2.0
        step = _newton_direction(hess, gz)
        accepted = False
        scale = 1.0
        # Near the optimum the objective change drops below float
        # resolution, so a step also counts when it shrinks the gradient
        # without measurably moving the objective.
        float_floor = 1e-12 * max(1.0, abs(fz))
        for _ in range(40):
            z_new = z + scale * step
            f_new, g_new = value_grad(z_new)
            better_f = f_new < fz
            flat_better_g = (f_new <= fz + float_floor
                             and np.max(np.abs(g_new)) < 0.9 * gnorm)
            if better_f or flat_better_g:
                z, fz, gz = z_new, f_new, g_new
                trace.append(-fz)
                accepted = True
                break
            scale /= 2.0
        iterations += 1
        if not accepted:
            if gnorm <= 1e3 * opts.tol:
                break  # stuck at rounding floor near the optimum
            raise DomainViolation(
                f"backtracking failed at gradient norm {gnorm:.3g}")

    if not np.isfinite(fz):
        raise DomainViolation("objective is not finite at the final iterate")
    grad_norm = float(np.max(np.abs(gz)))
    converged = grad_norm <= opts.tol
    mean = layout.mean_from_unconstrained(z)
    solution = VbSolution(mean=mean, elbo=float(-fz), iterations=iterations,
                          converged=converged, grad_norm=grad_norm,
                          elbo_trace=tuple(trace))
    if not converged:
        raise NonConvergence(
            f"gradient norm {grad_norm:.3g} above tol {opts.tol:g} "
            f"after {iterations} iterations", solution=solution)
    return solution


def _fd_grad_jacobian(grad, z, rel_step=1e-6):
    n = z.size
    jac = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(abs(z[j]), 1.0)
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        jac[:, j] = (grad(zp) - grad(zm)) / (2.0 * h)
    return jac


def _newton_direction(hess, grad):
    n = hess.shape[0]
    damping = 0.0
    for _ in range(12):
        try:
            step = scipy.linalg.solve(hess + damping * np.eye(n), -grad,
                                      assume_a="sym")
            if np.all(np.isfinite(step)) and step @ (-grad) > 0:
                return step
        except scipy.linalg.LinAlgError:
            pass
        damping = max(2.0 * damping, 1e-8 * max(np.max(np.abs(hess)), 1.0))
    return -grad  # fall back to steepest descent
