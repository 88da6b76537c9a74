"""Independent cross-checks of the core numerics.

Each oracle recomputes its expected value by a route that does not share code
with the path under test: scalar bisection and dense grids for the inner
solver, central finite differences for gradients, stacked-matrix determinants
for the Jacobian, Gaussian quadrature for the Monte Carlo adjustment, and an
exactly known Gaussian target for the Langevin kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from scipy import integrate, stats

from .adjust import build_adjustment, jacobian_grad, log_jacobian, orthonormal_completion
from .groupsolve import freeze_selection, solve
from .model import Dataset, GroupStructure
from .posterior import (
    PosteriorSpec,
    adjustment_mc_oracle,
    grad_log_posterior,
    log_posterior,
    solve_inner,
)
from .sampler import ChainConfig, run_chain


@dataclass(frozen=True)
class OracleResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str


def _toy(seed, variant="disjoint", n=40, sizes=(2, 3, 2), snr=3.0, tau2=1.0):
    rng = np.random.default_rng(seed)
    p = sum(sizes)
    X = rng.normal(size=(n, p))
    groups, start = [], 0
    for s in sizes:
        groups.append(np.arange(start, start + s))
        start += s
    beta = np.zeros(p)
    beta[groups[0]] = snr * rng.choice([-1.0, 1.0], size=sizes[0])
    y = X @ beta + rng.normal(size=n)
    weights = np.sqrt(2.0 * np.log(p)) * np.sqrt(np.array(sizes, dtype=float))
    kw = {}
    if variant == "sparse":
        kw["l1_weight"] = 0.5
    if variant == "overlapping":
        kw["ridge"] = 1e-4
    gs = GroupStructure(variant, tuple(groups), weights, p=p, **kw)
    dim = p if variant != "overlapping" else sum(len(g) for g in gs.groups)
    omega = np.sqrt(tau2) * rng.normal(size=dim)
    ds = Dataset(y=y, X=X, sigma=1.0)
    rec = freeze_selection(ds, gs, omega, solve(ds, gs, omega))
    params = build_adjustment(ds, gs, rec, tau2 * np.eye(dim))
    return ds, gs, rec, params


def _scalar_spec(mode_cov=1.0):
    params = SimpleNamespace(
        mode_cov=np.array([[mode_cov]]), mode_slope=np.array([[1.0]]),
        mode_off=np.zeros(1), refit_cov=np.eye(1), refit_slope=np.eye(1),
        refit_off=np.zeros(1), model_cov=np.eye(1), jac_quad=np.zeros((0, 0)),
        jac_sizes=np.array([0]), jac_slices=(slice(0, 0),),
        penalties=np.array([1.0]), n_active=1)
    return PosteriorSpec(params=params, beta_hat=np.zeros(1))


def oracle_inner() -> OracleResult:
    spec = _scalar_spec()
    worst = 0.0
    # positive mean: bisection on the stationarity equation
    got = solve_inner(np.array([5.0]), spec).gamma_star[0]
    lo, hi = 1e-12, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (mid - 5.0) - 1.0 / (mid * mid + mid) < 0:
            lo = mid
        else:
            hi = mid
    worst = max(worst, abs(got - 0.5 * (lo + hi)))
    # infeasible mean: two-stage dense grid
    got = solve_inner(np.array([-3.0]), spec).gamma_star[0]
    grid = np.linspace(1e-6, 10.0, 1_000_001)
    vals = 0.5 * (grid + 3.0) ** 2 + np.log1p(1.0 / grid)
    top = grid[np.argmin(vals)]
    step = grid[1] - grid[0]
    fine = np.linspace(max(top - 2 * step, 1e-9), top + 2 * step, 200_001)
    vals = 0.5 * (fine + 3.0) ** 2 + np.log1p(1.0 / fine)
    worst = max(worst, abs(got - fine[np.argmin(vals)]))
    return OracleResult("inner", worst, 1e-6, worst < 1e-6,
                        "barrier Newton vs bisection/grid search")


def oracle_gradient() -> OracleResult:
    worst = 0.0
    for variant, seed in (("disjoint", 31), ("sparse", 44)):
        _, _, rec, params = _toy(seed, variant=variant)
        spec = PosteriorSpec(params=params, beta_hat=rec.beta_hat)
        rng = np.random.default_rng(seed)
        h = 1e-6
        for _ in range(20):
            beta = rec.beta_hat + 0.5 * rng.normal(size=spec.dim)
            grad = grad_log_posterior(beta, spec)
            for k in range(spec.dim):
                e = np.zeros(spec.dim)
                e[k] = h
                fd = (log_posterior(beta + e, spec)
                      - log_posterior(beta - e, spec)) / (2 * h)
                worst = max(worst, abs(fd - grad[k]) / max(abs(grad[k]), 1.0))
    return OracleResult("gradient", worst, 1e-5, worst < 1e-5,
                        "posterior gradient vs central differences")


def _jac_stub(units, gram, penalties):
    sizes = np.array([len(u) for u in units])
    comps = [orthonormal_completion(u) for u in units]
    completion = np.zeros((sizes.sum(), (sizes - 1).sum()))
    slices, r0, c0 = [], 0, 0
    for u, comp in zip(units, comps):
        completion[r0:r0 + len(u), c0:c0 + len(u) - 1] = comp
        slices.append(slice(c0, c0 + len(u) - 1))
        r0 += len(u)
        c0 += len(u) - 1
    gram_inv = np.linalg.inv(gram)
    lam = np.sqrt(np.repeat(penalties, sizes - 1))
    quad = completion.T @ gram_inv @ completion
    sym = lam[:, None] * quad * lam[None, :]
    return SimpleNamespace(jac_quad=0.5 * (sym + sym.T), jac_sizes=sizes - 1,
                           jac_slices=tuple(slices),
                           penalties=np.asarray(penalties, dtype=float),
                           n_active=len(units), completion=completion,
                           group_sizes=sizes)


def oracle_jacobian_product() -> OracleResult:
    rng = np.random.default_rng(3)
    units = []
    for s in (2, 3):
        u = rng.normal(size=s)
        units.append(u / np.linalg.norm(u))
    stub = _jac_stub(units, np.eye(5), [1.0, 1.0])
    gamma = np.array([2.0, 3.0])
    worst = abs(log_jacobian(gamma, stub) - np.log(48.0))
    grad = jacobian_grad(gamma, stub)
    worst = max(worst, float(np.max(np.abs(grad - [1.0 / 3.0, 0.5]))))
    return OracleResult("jacobian-product", worst, 1e-10, worst < 1e-10,
                        "unit-gram closed-form product (2+1)(3+1)^2 and its gradient")


def oracle_jacobian_stacked() -> OracleResult:
    rng = np.random.default_rng(8)
    M = rng.normal(size=(30, 5))
    gram = M.T @ M
    units = []
    for s in (2, 3):
        u = rng.normal(size=s)
        units.append(u / np.linalg.norm(u))
    stub = _jac_stub(units, gram, [1.3, 0.7])
    U = np.zeros((5, 2))
    U[:2, 0] = units[0]
    U[2:, 1] = units[1]
    worst = 0.0
    for gamma in ([0.5, 2.0], [3.0, 0.2]):
        gamma = np.array(gamma)
        gfull = np.repeat(gamma, stub.group_sizes)
        lfull = np.repeat(stub.penalties, stub.group_sizes)
        left = (gram * gfull[None, :] + np.diag(lfull)) @ stub.completion
        _, logdet = np.linalg.slogdet(np.hstack([left, gram @ U]))
        _, logdetg = np.linalg.slogdet(gram)
        worst = max(worst, abs(log_jacobian(gamma, stub) - (logdet - logdetg)))
    return OracleResult("jacobian-stacked", worst, 1e-8, worst < 1e-8,
                        "reduced determinant vs full stacked derivative matrix")


def oracle_jacobian_basis() -> OracleResult:
    rng = np.random.default_rng(9)
    M = rng.normal(size=(30, 5))
    gram = M.T @ M
    units = []
    for s in (2, 3):
        u = rng.normal(size=s)
        units.append(u / np.linalg.norm(u))
    stub = _jac_stub(units, gram, [1.0, 2.0])
    rotated = _jac_stub(units, gram, [1.0, 2.0])
    r0 = 0
    for k, s in enumerate(stub.group_sizes):
        q, _ = np.linalg.qr(rng.normal(size=(s - 1, s - 1)))
        rotated.completion[r0:r0 + s, stub.jac_slices[k]] = \
            stub.completion[r0:r0 + s, stub.jac_slices[k]] @ q
        r0 += s
    lam = np.sqrt(np.repeat(stub.penalties, stub.group_sizes - 1))
    quad = rotated.completion.T @ np.linalg.inv(gram) @ rotated.completion
    sym = lam[:, None] * quad * lam[None, :]
    rotated.jac_quad = 0.5 * (sym + sym.T)
    worst = 0.0
    for gamma in ([1.0, 1.0], [0.2, 5.0]):
        gamma = np.array(gamma)
        worst = max(worst, abs(log_jacobian(gamma, stub) - log_jacobian(gamma, rotated)))
    return OracleResult("jacobian-basis", worst, 1e-10, worst < 1e-10,
                        "determinant invariance under completion rotations")


def oracle_factorization() -> OracleResult:
    _, _, rec, params = _toy(1, sizes=(2, 3, 2))
    rng = np.random.default_rng(5)
    beta = rng.normal(size=params.n_model)
    noise_prec = np.linalg.inv(params.noise_cov)
    model_prec = np.linalg.inv(params.model_cov)
    refit_prec = np.linalg.inv(params.refit_cov)
    size_prec = np.linalg.inv(params.size_cov)
    ratios = []
    for _ in range(10):
        bh = rec.beta_hat + rng.normal(size=params.n_model)
        gam = np.abs(rng.normal(size=rec.n_active)) + 0.1
        r = params.refit_map @ bh + params.size_map @ gam + params.offset
        lhs = (-0.5 * (bh - beta) @ model_prec @ (bh - beta) - 0.5 * r @ noise_prec @ r)
        d1 = bh - params.refit_slope @ beta - params.refit_off
        d2 = gam - params.size_slope @ bh - params.size_off
        rhs = -0.5 * d1 @ refit_prec @ d1 - 0.5 * d2 @ size_prec @ d2
        ratios.append(lhs - rhs)
    worst = float(np.max(ratios) - np.min(ratios))
    return OracleResult("factorization", worst, 1e-8, worst < 1e-8,
                        "two-factor Gaussian split vs joint density, log-ratio spread")


def oracle_mc_adjustment() -> OracleResult:
    rng = np.random.default_rng(7)
    n = 80
    x = rng.normal(size=(n, 1))
    x /= np.linalg.norm(x) / np.sqrt(n)
    y = x[:, 0] * 1.5 + rng.normal(size=n)
    ds = Dataset(y=y, X=x, sigma=1.0)
    gs = GroupStructure("disjoint", (np.array([0]),), np.array([6.0]), p=1)
    omega = rng.normal(size=1)
    rec = freeze_selection(ds, gs, omega, solve(ds, gs, omega))
    params = build_adjustment(ds, gs, rec, np.eye(1))
    spec = PosteriorSpec(params=params, beta_hat=rec.beta_hat)
    a = params.refit_map[0, 0]
    bmat = params.size_map[0, 0]
    c = params.offset[0]
    tau2 = params.noise_cov[0, 0]
    sig2 = params.model_cov[0, 0]
    beta = rec.beta_hat + 0.3

    def integrand(bh):
        u = a * bh + c
        inner = (np.sqrt(2 * np.pi * tau2) / abs(bmat)
                 * stats.norm.sf(np.sign(bmat) * u / np.sqrt(tau2)))
        return stats.norm.pdf(bh, loc=beta[0], scale=np.sqrt(sig2)) * inner

    exact, quad_err = integrate.quad(integrand, beta[0] - 12 * np.sqrt(sig2),
                                     beta[0] + 12 * np.sqrt(sig2), limit=200)
    est = adjustment_mc_oracle(beta, spec, draws=400_000, seed=11)
    zscore = abs(est.value - np.log(exact)) / max(est.stderr, 1e-12)
    return OracleResult("mc-adjustment", zscore, 3.0, zscore < 3.0 or
                        abs(est.value - np.log(exact)) < quad_err,
                        "importance sampling vs 1-D Gaussian tail quadrature (z units)")


def oracle_langevin() -> OracleResult:
    _, _, rec, params = _toy(13, sizes=(2, 2))
    spec = PosteriorSpec(params=params, beta_hat=rec.beta_hat, adjusted=False)
    cov = params.model_cov
    cfg = ChainConfig(draws=10_000, burn_in=0, eta=0.05, seed=7, preconditioner=cov)
    chain = run_chain(spec, cfg)
    n_batches = 25
    batches = chain.draws[: (len(chain.draws) // n_batches) * n_batches]
    batches = batches.reshape(n_batches, -1, chain.dim)
    worst = 0.0
    for j in range(chain.dim):
        bm = batches[:, :, j].mean(axis=1)
        se_mean = bm.std(ddof=1) / np.sqrt(n_batches)
        worst = max(worst, abs(chain.draws[:, j].mean() - spec.beta_hat[j]) / se_mean)
        bs = batches[:, :, j].std(axis=1, ddof=1)
        se_sd = bs.std(ddof=1) / np.sqrt(n_batches)
        worst = max(worst, abs(chain.draws[:, j].std(ddof=1) - np.sqrt(cov[j, j])) / se_sd)
    return OracleResult("langevin", worst, 3.0, worst < 3.0,
                        "chain moments vs exact Gaussian target (z units)")


ORACLES = (
    oracle_inner,
    oracle_gradient,
    oracle_jacobian_product,
    oracle_jacobian_stacked,
    oracle_jacobian_basis,
    oracle_factorization,
    oracle_mc_adjustment,
    oracle_langevin,
)


def run_oracles(only: str | None = None) -> list:
    """Run all oracles (or the name-prefix subset); never swallows a failure."""
    results = []
    for fn in ORACLES:
        name = fn.__name__.replace("oracle_", "").replace("_", "-")
        if only is not None and not name.startswith(only):
            continue
        results.append(fn())
    return results
