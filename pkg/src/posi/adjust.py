"""Derived matrices of the selection-informed posterior.

Everything flows from the stationarity identity at the frozen selection,

    omega = A @ beta_hat + B @ gamma + c,

where A carries the refit estimate, B the selected block sizes, and c the
ancillary projection plus the frozen subgradients. Conditioning on the
selection then turns the Gaussian randomization density into a pair of
Gaussian factors (the "bar" reparameterization) plus a Jacobian in gamma.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .groupsolve import SolveOptions, _SolveSpace, prepare_options
from .model import ConfigError, Dataset, GroupStructure, NumericalError, SelectionRecord


def _sym_inv(mat, what):
    """Invert a symmetric PD matrix through Cholesky; loud failure otherwise."""
    mat = np.asarray(mat, dtype=float)
    if np.max(np.abs(mat - mat.T)) > 1e-10 * max(1.0, np.max(np.abs(mat))):
        raise NumericalError(f"{what} is not symmetric")
    try:
        chol = np.linalg.cholesky(0.5 * (mat + mat.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(mat.shape[0])))
    return 0.5 * (inv + inv.T)


def _gauss_logpdf(x, mean, cov):
    d = x - mean
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, d)
    return -0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * len(d) * np.log(2 * np.pi)


@dataclass(frozen=True)
class AdjustmentParams:
    """All derived matrices of the surrogate posterior for one frozen selection."""

    refit_map: np.ndarray     # A: multiplies the refit estimate
    size_map: np.ndarray      # B: multiplies the block sizes
    offset: np.ndarray        # c
    noise_cov: np.ndarray     # randomization covariance in the solve space
    model_cov: np.ndarray     # covariance of the refit estimate
    size_cov: np.ndarray      # conditional covariance of gamma given beta_hat
    size_slope: np.ndarray
    size_off: np.ndarray
    refit_cov: np.ndarray     # covariance of the transformed beta_hat factor
    refit_slope: np.ndarray
    refit_off: np.ndarray
    mode_cov: np.ndarray      # covariance in the inner mode problem
    mode_slope: np.ndarray
    mode_off: np.ndarray
    completion: np.ndarray    # block-diagonal orthonormal completions
    gram_inv: np.ndarray      # inverse gram entering the Jacobian
    jac_quad: np.ndarray      # symmetrized completion quadratic (penalty absorbed)
    jac_sizes: np.ndarray     # completion dimension per active group
    jac_slices: tuple         # index run per active group in the completion space
    penalties: np.ndarray     # penalty weight per active group
    group_sizes: np.ndarray   # solve-space block dimension per active group

    @property
    def n_active(self) -> int:
        return len(self.penalties)

    @property
    def n_model(self) -> int:
        return self.refit_map.shape[1]


def selection_maps(record: SelectionRecord, dataset: Dataset, groups: GroupStructure,
                   opts: SolveOptions | None = None):
    """Assemble (A, B, c) so that omega = A @ beta_hat + B @ gamma + c exactly."""
    if record.n_active == 0:
        raise ConfigError("empty selection has no stationarity decomposition")
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    X_model = dataset.X[:, record.model_cols]
    A = -sp.M.T @ X_model

    m = record.n_active
    U = np.zeros((len(record.solve_cols), m))
    pos = 0
    for k, u in enumerate(record.unit_blocks):
        U[pos:pos + len(u), k] = u
        pos += len(u)
    B = sp.gram[:, record.solve_cols] @ U
    if groups.variant == "overlapping":
        B[record.solve_cols, :] += groups.ridge * U

    c = -record.resid_stat.astype(float).copy()
    pos = 0
    for k, gid in enumerate(record.active_groups):
        block = sp.blocks[gid]
        u_full = np.zeros(len(block))
        if groups.variant == "sparse":
            u_full[record.within_support[gid]] = record.unit_blocks[k]
        else:
            u_full[:] = record.unit_blocks[k]
        c[block] += groups.weights[gid] * u_full
    for gid, z in record.inactive_sub.items():
        c[sp.blocks[gid]] += groups.weights[gid] * z
    if groups.variant == "sparse":
        c += groups.l1_weight * record.l1_signs

    recon = A @ record.beta_hat + B @ record.gamma + c
    gap = np.max(np.abs(recon - record.omega))
    if gap > 1e-8:
        raise NumericalError(f"stationarity reconstruction off by {gap:.3e}")
    return A, B, c


def bar_parameters(A, B, c, sigma_e, omega_cov):
    """Split the joint Gaussian factor into beta_hat and gamma factors.

    Returns (size_cov, size_slope, size_off, refit_cov, refit_slope, refit_off):
    the density identity

        N(beta_hat; beta, sigma_e) * exp(-0.5 ||A beta_hat + B gamma + c||^2_{cov^-1})
          = K(beta) * N(beta_hat; refit_slope beta + refit_off, refit_cov)
                    * N(gamma; size_slope beta_hat + size_off, size_cov)

    holds with K free of beta_hat and gamma.
    """
    noise_prec = _sym_inv(omega_cov, "randomization covariance")
    BtOi = B.T @ noise_prec
    inner = BtOi @ B
    try:
        chol = np.linalg.cholesky(0.5 * (inner + inner.T))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("B' Omega^{-1} B is singular (B not full column rank)") from exc
    size_cov = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(inner.shape[0])))
    size_cov = 0.5 * (size_cov + size_cov.T)
    size_slope = -size_cov @ BtOi @ A
    size_off = -size_cov @ BtOi @ c

    model_prec = _sym_inv(sigma_e, "refit covariance")
    refit_prec = model_prec - size_slope.T @ inner @ size_slope + A.T @ noise_prec @ A
    refit_cov = _sym_inv(refit_prec, "transformed refit precision")
    refit_slope = refit_cov @ model_prec
    refit_off = refit_cov @ (size_slope.T @ inner @ size_off - A.T @ noise_prec @ c)
    return size_cov, size_slope, size_off, refit_cov, refit_slope, refit_off


def conditional_parameters(size_cov, size_slope, size_off, refit_cov, refit_slope, refit_off):
    """Marginal parameters of gamma as an affine-Gaussian function of beta."""
    mode_cov = size_cov + size_slope @ refit_cov @ size_slope.T
    mode_cov = 0.5 * (mode_cov + mode_cov.T)
    try:
        np.linalg.cholesky(mode_cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("marginal size covariance is not positive definite") from exc
    return mode_cov, size_slope @ refit_slope, size_slope @ refit_off + size_off


def orthonormal_completion(u: np.ndarray, d: int | None = None) -> np.ndarray:
    """Deterministic orthonormal basis of the hyperplane orthogonal to u.

    Householder construction with the reflection sign chosen away from
    cancellation; a unit vector in R^1 gets an empty (1, 0) completion.
    """
    u = np.asarray(u, dtype=float).ravel()
    if d is not None and len(u) != d:
        raise ConfigError(f"direction has length {len(u)}, expected {d}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise ConfigError("completion requires a unit vector")
    d = len(u)
    if d == 1:
        return np.zeros((1, 0))
    s = 1.0 if u[0] >= 0 else -1.0
    w = u.copy()
    w[0] += s
    H = np.eye(d) - (2.0 / (w @ w)) * np.outer(w, w)
    return H[:, 1:]


def _inner_matrix(gamma, params):
    gamma = np.asarray(gamma, dtype=float).ravel()
    if len(gamma) != params.n_active:
        raise ConfigError("gamma length does not match the number of active groups")
    if np.any(gamma <= 0):
        raise ConfigError("block sizes must be positive")
    reps = params.jac_sizes
    if reps.sum() == 0:
        return None
    diag = np.repeat(gamma, reps)
    return np.diag(diag) + params.jac_quad


def log_jacobian(gamma, params: AdjustmentParams) -> float:
    """Log determinant of the change-of-variables factor at block sizes gamma.

    Constant (zero) when every active group is atomic.
    """
    K = _inner_matrix(gamma, params)
    if K is None:
        return 0.0
    try:
        chol = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Jacobian matrix is not positive definite") from exc
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def jacobian_grad(gamma_star, params: AdjustmentParams) -> np.ndarray:
    """Exact gradient of log_jacobian with respect to the block sizes."""
    K = _inner_matrix(gamma_star, params)
    if K is None:
        return np.zeros(params.n_active)
    try:
        chol = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Jacobian matrix is not positive definite") from exc
    inv_diag = np.diag(np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(K.shape[0]))))
    out = np.array([np.sum(inv_diag[sl]) for sl in params.jac_slices])
    if os.environ.get("POSI_TEST_FLIP_JACOBIAN"):
        out = -out  # fault injection for the verification suite
    return out


def build_adjustment(dataset: Dataset, groups: GroupStructure, record: SelectionRecord,
                     noise_cov, opts: SolveOptions | None = None,
                     verify: bool = True) -> AdjustmentParams:
    """Derive every matrix of the surrogate posterior for a frozen selection."""
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    if hasattr(noise_cov, "covariance"):
        noise_cov = noise_cov.covariance(sp.q)
    noise_cov = np.asarray(noise_cov, dtype=float)
    if noise_cov.shape != (sp.q, sp.q):
        raise ConfigError(f"randomization covariance must be {sp.q}x{sp.q}")

    A, B, c = selection_maps(record, dataset, groups, opts)
    bars = bar_parameters(A, B, c, record.model_cov, noise_cov)
    mode_cov, mode_slope, mode_off = conditional_parameters(*bars)
    size_cov, size_slope, size_off, refit_cov, refit_slope, refit_off = bars

    sizes = np.array([len(u) for u in record.unit_blocks])
    comps = [orthonormal_completion(u) for u in record.unit_blocks]
    total = sizes.sum()
    completion = np.zeros((total, int((sizes - 1).sum())))
    slices, r0, c0 = [], 0, 0
    for u, comp in zip(record.unit_blocks, comps):
        d = len(u)
        completion[r0:r0 + d, c0:c0 + d - 1] = comp
        slices.append(slice(c0, c0 + d - 1))
        r0 += d
        c0 += d - 1

    gram = sp.gram[np.ix_(record.solve_cols, record.solve_cols)]
    if groups.variant == "overlapping":
        gram = gram + groups.ridge * np.eye(gram.shape[0])
    gram_inv = _sym_inv(gram, "selected-block gram")
    penalties = np.array([groups.weights[g] for g in record.active_groups])
    lam_cols = np.sqrt(np.repeat(penalties, sizes - 1))
    quad = completion.T @ gram_inv @ completion
    jac_quad = lam_cols[:, None] * quad * lam_cols[None, :]
    jac_quad = 0.5 * (jac_quad + jac_quad.T)

    params = AdjustmentParams(
        refit_map=A, size_map=B, offset=c,
        noise_cov=noise_cov, model_cov=record.model_cov,
        size_cov=size_cov, size_slope=size_slope, size_off=size_off,
        refit_cov=refit_cov, refit_slope=refit_slope, refit_off=refit_off,
        mode_cov=mode_cov, mode_slope=mode_slope, mode_off=mode_off,
        completion=completion, gram_inv=gram_inv,
        jac_quad=jac_quad, jac_sizes=sizes - 1, jac_slices=tuple(slices),
        penalties=penalties, group_sizes=sizes,
    )
    if verify:
        _verify_factorization(params, record)
    return params


def _verify_factorization(params, record, n_points: int = 4, rtol: float = 1e-6):
    """The two-factor Gaussian split must match the joint density up to a
    beta-only constant; checked at a few deterministic points on every build."""
    rng = np.random.default_rng(0)
    beta_ref = record.beta_hat
    chol_model = np.linalg.cholesky(params.model_cov)
    noise_prec = _sym_inv(params.noise_cov, "randomization covariance")
    diffs = []
    for _ in range(n_points):
        bh = record.beta_hat + chol_model @ rng.standard_normal(len(record.beta_hat))
        gam = record.gamma * np.exp(0.3 * rng.standard_normal(record.n_active))
        r = params.refit_map @ bh + params.size_map @ gam + params.offset
        lhs = _gauss_logpdf(bh, beta_ref, params.model_cov) - 0.5 * r @ noise_prec @ r
        rhs = _gauss_logpdf(bh, params.refit_slope @ beta_ref + params.refit_off,
                            params.refit_cov)
        rhs += _gauss_logpdf(gam, params.size_slope @ bh + params.size_off, params.size_cov)
        diffs.append(lhs - rhs)
    spread = np.max(diffs) - np.min(diffs)
    if spread > rtol * max(1.0, float(np.max(np.abs(diffs)))):
        raise NumericalError(f"density factorization drifts by {spread:.3e}")
