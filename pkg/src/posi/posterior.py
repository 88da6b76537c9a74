"""Surrogate selection-informed log-posterior, its exact gradient, and a
Monte Carlo oracle for the exact adjustment factor.

Evaluating the posterior at a coefficient vector beta solves a small convex
inner problem for the mode gamma* of the selected block sizes,

    gamma* = argmin 0.5 (g - m)' S^{-1} (g - m) + barr(g),   m = P beta + q,

with the smooth positivity barrier barr(g) = sum log(1 + 1/g). The envelope
identity makes the outer gradient exact despite gamma* being implicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjust import AdjustmentParams, jacobian_grad, log_jacobian
from .model import ConfigError, NumericalError

INNER_TOL = 1e-9


def barrier_value(gamma) -> float:
    return float(np.sum(np.log1p(1.0 / gamma)))


def barrier_grad(gamma) -> np.ndarray:
    return -1.0 / (gamma * gamma + gamma)


def barrier_hess_diag(gamma) -> np.ndarray:
    return (2.0 * gamma + 1.0) / (gamma * gamma + gamma) ** 2


def _barrier_selfcheck():
    h = 1e-6
    for g in (0.1, 1.0, 7.0):
        fd_g = (barrier_value(np.array([g + h])) - barrier_value(np.array([g - h]))) / (2 * h)
        fd_h = (barrier_grad(np.array([g + h])) - barrier_grad(np.array([g - h])))[0] / (2 * h)
        if abs(fd_g - barrier_grad(np.array([g]))[0]) > 1e-5 * max(1.0, abs(fd_g)):
            raise AssertionError("barrier gradient disagrees with finite differences")
        if abs(fd_h - barrier_hess_diag(np.array([g]))[0]) > 1e-4 * max(1.0, abs(fd_h)):
            raise AssertionError("barrier curvature disagrees with finite differences")


_barrier_selfcheck()


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        try:
            chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("prior covariance must be positive definite") from exc
        prec = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(len(self.mean))))
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "_logdet", 2.0 * np.sum(np.log(np.diag(chol))))

    def logpdf(self, beta) -> float:
        d = beta - self.mean
        return float(-0.5 * d @ self.precision @ d
                     - 0.5 * self._logdet - 0.5 * len(d) * np.log(2 * np.pi))

    def grad(self, beta) -> np.ndarray:
        return -self.precision @ (beta - self.mean)


@dataclass(frozen=True)
class PosteriorSpec:
    """Frozen inputs of one posterior: adjustment matrices, prior, observed refit.

    adjusted=False is a test hook that drops every selection term, leaving the
    unadjusted Gaussian posterior for the refit estimate.
    """

    params: AdjustmentParams
    beta_hat: np.ndarray
    prior: GaussianPrior | None = None
    adjusted: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beta_hat", np.asarray(self.beta_hat, dtype=float))
        p = self.params
        object.__setattr__(self, "mode_prec", _inv_pd(p.mode_cov, "inner covariance"))
        object.__setattr__(self, "refit_prec", _inv_pd(p.refit_cov, "refit covariance"))
        object.__setattr__(self, "model_prec", _inv_pd(p.model_cov, "model covariance"))

    @property
    def dim(self) -> int:
        return len(self.beta_hat)


def _inv_pd(mat, what):
    try:
        chol = np.linalg.cholesky(0.5 * (mat + mat.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(mat.shape[0])))
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True)
class InnerSolution:
    gamma_star: np.ndarray
    newton_iters: int
    kkt_residual: float
    hess_at_opt: np.ndarray


def solve_inner(beta, spec: PosteriorSpec, init: np.ndarray | None = None) -> InnerSolution:
    """Damped-Newton solve of the barrier-penalized inner problem at beta.

    Steps are halved until the iterate stays positive and satisfies an Armijo
    decrease; stationarity is pushed below 1e-9 in the max norm.
    """
    p = spec.params
    prec = spec.mode_prec
    m_vec = p.mode_slope @ np.asarray(beta, dtype=float) + p.mode_off
    if init is not None and np.all(init > 0):
        gamma = np.asarray(init, dtype=float).copy()
    else:
        gamma = np.maximum(m_vec, 1.0)

    def value(g):
        d = g - m_vec
        return 0.5 * d @ prec @ d + np.sum(np.log1p(1.0 / g))

    iters = 0
    resid = np.inf
    for iters in range(1, 101):
        grad = prec @ (gamma - m_vec) + barrier_grad(gamma)
        resid = float(np.max(np.abs(grad)))
        if resid <= INNER_TOL:
            break
        hess = prec + np.diag(barrier_hess_diag(gamma))
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("inner Newton system is singular") from exc
        f0 = value(gamma)
        slope = grad @ step
        noise = 64.0 * np.finfo(float).eps * (1.0 + abs(f0))
        alpha = 1.0
        while True:
            cand = gamma + alpha * step
            if np.all(cand > 0):
                # near the optimum the predicted decrease sinks below fp
                # noise; take the feasible Newton step outright there
                if -slope * alpha < noise:
                    break
                if value(cand) <= f0 + 1e-4 * alpha * slope + noise:
                    break
            alpha *= 0.5
            if alpha < 1e-16:
                raise NumericalError(
                    f"inner line search stalled at residual {resid:.3e} "
                    "(ill-conditioned inner covariance)")
        gamma = cand
    else:
        raise NumericalError(f"inner Newton failed; residual {resid:.3e}")
    hess = spec.mode_prec + np.diag(barrier_hess_diag(gamma))
    return InnerSolution(gamma_star=gamma, newton_iters=iters,
                         kkt_residual=resid, hess_at_opt=hess)


def log_posterior(beta, spec: PosteriorSpec, inner: InnerSolution | None = None) -> float:
    """Log surrogate posterior at beta, up to a beta-free constant."""
    beta = np.asarray(beta, dtype=float)
    p = spec.params
    val = spec.prior.logpdf(beta) if spec.prior is not None else 0.0
    if not spec.adjusted:
        d = spec.beta_hat - beta
        return float(val - 0.5 * d @ spec.model_prec @ d)
    d = spec.beta_hat - p.refit_slope @ beta - p.refit_off
    val -= 0.5 * d @ spec.refit_prec @ d
    if inner is None:
        inner = solve_inner(beta, spec)
    m_vec = p.mode_slope @ beta + p.mode_off
    dd = inner.gamma_star - m_vec
    val += 0.5 * dd @ spec.mode_prec @ dd
    val += barrier_value(inner.gamma_star)
    val -= log_jacobian(inner.gamma_star, p)
    return float(val)


def grad_log_posterior(beta, spec: PosteriorSpec,
                       inner: InnerSolution | None = None) -> np.ndarray:
    """Exact gradient of log_posterior in beta (gamma* dependence included)."""
    beta = np.asarray(beta, dtype=float)
    p = spec.params
    grad = spec.prior.grad(beta) if spec.prior is not None else np.zeros_like(beta)
    if not spec.adjusted:
        return grad + spec.model_prec @ (spec.beta_hat - beta)
    grad = grad + p.refit_slope.T @ (
        spec.refit_prec @ (spec.beta_hat - p.refit_slope @ beta - p.refit_off))
    if inner is None:
        inner = solve_inner(beta, spec)
    m_vec = p.mode_slope @ beta + p.mode_off
    jstar = jacobian_grad(inner.gamma_star, p)
    shift = np.linalg.solve(inner.hess_at_opt, jstar)
    grad = grad + p.mode_slope.T @ (
        spec.mode_prec @ (m_vec - inner.gamma_star - shift))
    return grad


@dataclass(frozen=True)
class McAdjustment:
    value: float     # log selection-probability estimate (up to a constant)
    stderr: float
    ess: float


def mc_gaussian_pieces(beta, params: AdjustmentParams):
    """Exact Gaussian part of the adjustment integrand at beta.

    The integrand N(bh; beta, S) * exp(-0.5 ||A bh + B g + c||^2_{W^-1}) is an
    unnormalized Gaussian in x = (bh, g); completing the square here (without
    the bar reparameterization) gives the sampling law and the log of the
    Gaussian mass, so only the Jacobian and the positivity indicator remain
    for Monte Carlo averaging.
    """
    beta = np.asarray(beta, dtype=float)
    A, B, c = params.refit_map, params.size_map, params.offset
    si = _inv_pd(params.model_cov, "model covariance")
    oi = _inv_pd(params.noise_cov, "randomization covariance")
    ne, m = A.shape[1], B.shape[1]
    prec = np.zeros((ne + m, ne + m))
    prec[:ne, :ne] = si + A.T @ oi @ A
    prec[:ne, ne:] = A.T @ oi @ B
    prec[ne:, :ne] = B.T @ oi @ A
    prec[ne:, ne:] = B.T @ oi @ B
    lin = np.concatenate([si @ beta - A.T @ oi @ c, -B.T @ oi @ c])
    try:
        chol = np.linalg.cholesky(0.5 * (prec + prec.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("joint adjustment precision is not positive definite") from exc
    mu = np.linalg.solve(chol.T, np.linalg.solve(chol, lin))
    sign, logdet_s = np.linalg.slogdet(params.model_cov)
    log_mass = (-0.5 * (beta @ si @ beta + c @ oi @ c)
                - 0.5 * ne * np.log(2 * np.pi) - 0.5 * logdet_s
                + 0.5 * lin @ mu
                + 0.5 * (ne + m) * np.log(2 * np.pi) - np.sum(np.log(np.diag(chol))))
    return mu, chol, log_mass


def batched_log_jacobian(gam, params: AdjustmentParams):
    """log_jacobian over rows of gam; rows touching the boundary get -inf."""
    k = gam.shape[0]
    ok = np.all(gam > 0, axis=1)
    out = np.full(k, -np.inf)
    reps = params.jac_sizes
    if reps.sum() == 0:
        out[ok] = 0.0
        return out
    sub = gam[ok]
    K = np.zeros((len(sub), int(reps.sum()), int(reps.sum())))
    K[:] = params.jac_quad
    idx = np.arange(int(reps.sum()))
    K[:, idx, idx] += np.repeat(sub, reps, axis=1)
    _, logj = np.linalg.slogdet(K)
    out[ok] = logj
    return out


def adjustment_mc_oracle(beta, spec: PosteriorSpec, draws: int, seed: int,
                         chunk: int = 200_000) -> McAdjustment:
    """Monte Carlo estimate of the log adjustment factor at beta.

    Samples (bh, g) exactly from the Gaussian part of the integrand, so the
    weights reduce to the Jacobian times the positivity indicator. Desk-scale
    validation only: the number of active groups must be at most 4.
    """
    p = spec.params
    if p.n_active > 4:
        raise ConfigError("the Monte Carlo oracle is limited to at most 4 active groups")
    rng = np.random.default_rng(seed)
    mu, chol, log_mass = mc_gaussian_pieces(beta, p)
    ne = p.refit_map.shape[1]

    lead = -np.inf
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < draws:
        k = min(chunk, draws - done)
        z = rng.standard_normal((k, len(mu)))
        x = mu + np.linalg.solve(chol.T, z.T).T
        logw = batched_log_jacobian(x[:, ne:], p)
        finite = logw[np.isfinite(logw)]
        if len(finite):
            m = float(np.max(finite))
            if m > lead:
                total *= np.exp(lead - m)
                total_sq *= np.exp(2.0 * (lead - m))
                lead = m
            w = np.exp(logw - lead, where=np.isfinite(logw), out=np.zeros(k))
            total += float(np.sum(w))
            total_sq += float(np.sum(w * w))
        done += k
    if total <= 0:
        raise NumericalError("no draw satisfied the positivity constraint")
    ess = total ** 2 / total_sq
    if ess < 100:
        raise NumericalError(f"effective sample size {ess:.1f} < 100; increase draws")
    mean_w = total / draws
    var_w = max(total_sq / draws - mean_w ** 2, 0.0)
    stderr = float(np.sqrt(var_w / draws) / mean_w)
    return McAdjustment(value=float(np.log(mean_w) + lead + log_mass),
                        stderr=stderr, ess=float(ess))
