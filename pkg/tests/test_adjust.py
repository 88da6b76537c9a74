import types

import numpy as np
import pytest
from conftest import identity_instance, random_instance

from posi.adjust import (
    bar_parameters,
    build_adjustment,
    conditional_parameters,
    jacobian_grad,
    log_jacobian,
    orthonormal_completion,
    selection_maps,
)
from posi.groupsolve import freeze_selection, solve
from posi.model import ConfigError, EmptySelectionError


def frozen(seed=0, variant="disjoint", tau2=1.0, **kw):
    ds, gs, omega = random_instance(seed, variant=variant, **kw)
    b = solve(ds, gs, omega)
    rec = freeze_selection(ds, gs, omega, b)
    params = build_adjustment(ds, gs, rec, tau2 * np.eye(len(omega)))
    return ds, gs, rec, params


def identity_frozen():
    ds, gs, omega = identity_instance()
    b = solve(ds, gs, omega)
    rec = freeze_selection(ds, gs, omega, b)
    return ds, gs, rec


def test_identity_selection_maps():
    ds, gs, rec = identity_frozen()
    A, B, c = selection_maps(rec, ds, gs)
    u = rec.unit_blocks[0]
    assert np.allclose(A, -np.eye(2), atol=1e-12)
    assert np.allclose(B[:, 0], u, atol=1e-12)
    # N_E = 0 for the saturated identity design, so c is the subgradient alone
    assert np.allclose(c, u, atol=1e-12)
    recon = A @ rec.beta_hat + B @ rec.gamma + c
    assert np.max(np.abs(recon - rec.omega)) < 1e-10


def test_atomic_size_map_is_signed_gram():
    # all-atomic groups: B = X' X_E diag(signs)
    ds, gs, omega = random_instance(4, sizes=(1, 1, 1), snr=4.0)
    b = solve(ds, gs, omega)
    rec = freeze_selection(ds, gs, omega, b)
    A, B, c = selection_maps(rec, ds, gs)
    signs = np.array([u[0] for u in rec.unit_blocks])
    expect = ds.X.T @ ds.X[:, rec.model_cols] @ np.diag(signs)
    assert np.allclose(B, expect, atol=1e-10)


def test_overlap_ridge_enters_size_map():
    ds, gs, rec, params = frozen(3, variant="overlapping", sizes=(2, 3, 2), snr=3.0)
    sol_cols = rec.solve_cols
    U = np.zeros((len(sol_cols), rec.n_active))
    pos = 0
    for k, u in enumerate(rec.unit_blocks):
        U[pos:pos + len(u), k] = u
        pos += len(u)
    Xs = np.hstack([ds.X[:, g] for g in gs.groups])
    plain = (Xs.T @ Xs)[:, sol_cols] @ U
    diff = params.size_map - plain
    assert np.allclose(diff[sol_cols, :], gs.ridge * U, atol=1e-12)


def test_bar_parameters_factorization_identity():
    ds, gs, rec, params = frozen(1, sizes=(2, 3, 2), snr=3.0)
    rng = np.random.default_rng(5)
    beta = rng.normal(size=params.n_model)
    noise_prec = np.linalg.inv(params.noise_cov)
    model_prec = np.linalg.inv(params.model_cov)

    def log_lhs(bh, gam):
        r = params.refit_map @ bh + params.size_map @ gam + params.offset
        return (-0.5 * (bh - beta) @ model_prec @ (bh - beta)
                - 0.5 * r @ noise_prec @ r)

    def log_rhs(bh, gam):
        d1 = bh - params.refit_slope @ beta - params.refit_off
        d2 = gam - params.size_slope @ bh - params.size_off
        return (-0.5 * d1 @ np.linalg.inv(params.refit_cov) @ d1
                - 0.5 * d2 @ np.linalg.inv(params.size_cov) @ d2)

    ratios = []
    for _ in range(10):
        bh = rec.beta_hat + rng.normal(size=params.n_model)
        gam = np.abs(rng.normal(size=rec.n_active)) + 0.1
        ratios.append(log_lhs(bh, gam) - log_rhs(bh, gam))
    assert np.max(ratios) - np.min(ratios) < 1e-8


def test_bar_parameters_two_dim_closed_form():
    ds, gs, rec = identity_frozen()
    A, B, c = selection_maps(rec, ds, gs)
    bars = bar_parameters(A, B, c, rec.model_cov, np.eye(2))
    size_cov, size_slope, size_off, refit_cov, refit_slope, refit_off = bars
    u = rec.unit_blocks[0]
    core = np.linalg.inv(2.0 * np.eye(2) - np.outer(u, u))
    assert abs(size_cov[0, 0] - 1.0) < 1e-12
    assert np.allclose(size_slope, u[None, :], atol=1e-12)
    assert abs(size_off[0] + 1.0) < 1e-12
    assert np.allclose(refit_cov, core, atol=1e-12)
    assert np.allclose(refit_off, 0.0, atol=1e-12)
    mode_cov, mode_slope, mode_off = conditional_parameters(*bars)
    assert abs(mode_cov[0, 0] - (1.0 + u @ core @ u)) < 1e-12
    assert np.allclose(mode_slope, u @ core, atol=1e-12)
    assert abs(mode_off[0] + 1.0) < 1e-12


def test_diffuse_randomization_limit():
    # the refit covariance approaches the unadjusted one at rate 1/tau^2, so
    # growing tau^2 by 100 from an already-diffuse base shrinks the gap >= 10x
    ds, gs, rec, params1 = frozen(2, sizes=(2, 2, 2), snr=3.0, tau2=100.0)
    params2 = build_adjustment(ds, gs, rec, 10000.0 * np.eye(len(rec.omega)))
    gap1 = np.max(np.abs(params1.refit_cov - rec.model_cov))
    gap2 = np.max(np.abs(params2.refit_cov - rec.model_cov))
    assert gap2 * 10.0 <= gap1


def test_conditional_zero_slope():
    size_cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    refit_cov = np.eye(3)
    mode_cov, mode_slope, mode_off = conditional_parameters(
        size_cov, np.zeros((2, 3)), np.array([0.5, -0.5]),
        refit_cov, np.eye(3), np.zeros(3))
    assert np.allclose(mode_cov, size_cov)
    assert np.allclose(mode_slope, 0.0)
    assert np.allclose(mode_off, [0.5, -0.5])


def test_conditional_covariance_monte_carlo():
    ds, gs, rec, params = frozen(6, sizes=(2, 3, 2), snr=3.0)
    rng = np.random.default_rng(0)
    n_draw = 10 ** 5
    beta = rec.beta_hat
    mean_bh = params.refit_slope @ beta + params.refit_off
    bh = rng.multivariate_normal(mean_bh, params.refit_cov, size=n_draw)
    noise = rng.multivariate_normal(np.zeros(rec.n_active), params.size_cov, size=n_draw)
    gam = bh @ params.size_slope.T + params.size_off + noise
    emp = np.cov(gam.T)
    rel = np.linalg.norm(emp - params.mode_cov) / np.linalg.norm(params.mode_cov)
    assert rel < 0.05


def test_orthonormal_completion_cases():
    comp = orthonormal_completion(np.array([1.0, 0.0, 0.0]))
    span = comp @ comp.T
    assert np.allclose(span, np.diag([0.0, 1.0, 1.0]), atol=1e-12)
    assert orthonormal_completion(np.array([1.0])).shape == (1, 0)
    rng = np.random.default_rng(2)
    u = rng.normal(size=5)
    u /= np.linalg.norm(u)
    comp = orthonormal_completion(u)
    Q = np.column_stack([u, comp])
    assert np.max(np.abs(Q.T @ Q - np.eye(5))) < 1e-12
    with pytest.raises(ConfigError):
        orthonormal_completion(np.array([1.0, 1.0]))


def jac_stub(unit_blocks, gram, penalties):
    """Build the Jacobian pieces directly (independent of build_adjustment)."""
    sizes = np.array([len(u) for u in unit_blocks])
    comps = [orthonormal_completion(u) for u in unit_blocks]
    total, red = sizes.sum(), (sizes - 1).sum()
    completion = np.zeros((total, red))
    slices, r0, c0 = [], 0, 0
    for u, cmp_ in zip(unit_blocks, comps):
        completion[r0:r0 + len(u), c0:c0 + len(u) - 1] = cmp_
        slices.append(slice(c0, c0 + len(u) - 1))
        r0 += len(u)
        c0 += len(u) - 1
    gram_inv = np.linalg.inv(gram)
    lam = np.sqrt(np.repeat(penalties, sizes - 1))
    quad = completion.T @ gram_inv @ completion
    jac_quad = 0.5 * (lam[:, None] * quad * lam[None, :]
                      + (lam[:, None] * quad * lam[None, :]).T)
    return types.SimpleNamespace(
        jac_quad=jac_quad, jac_sizes=sizes - 1, jac_slices=tuple(slices),
        penalties=np.asarray(penalties, dtype=float), n_active=len(unit_blocks),
        completion=completion, gram_inv=gram_inv, group_sizes=sizes)


def rand_units(rng, sizes):
    out = []
    for s in sizes:
        u = rng.normal(size=s)
        out.append(u / np.linalg.norm(u))
    return out


def test_log_jacobian_atomic_groups():
    stub = jac_stub([np.array([1.0]), np.array([-1.0])], np.eye(2), [1.0, 2.0])
    for g in ([1.0, 1.0], [0.3, 7.0]):
        assert log_jacobian(np.array(g), stub) == 0.0
        assert np.allclose(jacobian_grad(np.array(g), stub), 0.0)


def test_log_jacobian_orthogonal_product():
    rng = np.random.default_rng(3)
    units = rand_units(rng, (2, 3))
    stub = jac_stub(units, np.eye(5), [1.0, 1.0])
    # (2+1)^1 * (3+1)^2 = 48 for unit-gram designs
    assert abs(log_jacobian(np.array([2.0, 3.0]), stub) - np.log(48.0)) < 1e-12
    grad = jacobian_grad(np.array([2.0, 3.0]), stub)
    assert np.allclose(grad, [1.0 / 3.0, 2.0 / 4.0], atol=1e-12)


def stacked_logdet(gamma, stub, gram):
    """Independent oracle: log |det| of the full stacked derivative matrix,
    normalized by the gamma-free factor |det gram|."""
    sizes = stub.group_sizes
    U = np.zeros((sizes.sum(), len(sizes)))
    r0 = 0
    units = []
    for k, s in enumerate(sizes):
        block = stub.completion[r0:r0 + s, stub.jac_slices[k]]
        # recover the unit vector as the orthogonal complement of the completion
        q, _ = np.linalg.qr(np.eye(s) - block @ block.T)
        u = q[:, 0]
        units.append(u)
        U[r0:r0 + s, k] = u
        r0 += s
    gamma_full = np.repeat(gamma, sizes)
    lam_full = np.repeat(stub.penalties, sizes)
    left = (gram * gamma_full[None, :] + np.diag(lam_full)) @ stub.completion
    right = gram @ U
    stacked = np.hstack([left, right])
    sign, logdet = np.linalg.slogdet(stacked)
    signg, logdetg = np.linalg.slogdet(gram)
    return logdet - logdetg


def test_log_jacobian_matches_stacked_determinant():
    rng = np.random.default_rng(8)
    M = rng.normal(size=(30, 5))
    gram = M.T @ M
    units = rand_units(rng, (2, 3))
    stub = jac_stub(units, gram, [1.3, 0.7])

    # rebuild the stacked matrix with the very same unit vectors
    sizes = stub.group_sizes
    U = np.zeros((5, 2))
    U[:2, 0] = units[0]
    U[2:, 1] = units[1]
    for gamma in ([0.5, 2.0], [3.0, 0.2]):
        gamma = np.array(gamma)
        gamma_full = np.repeat(gamma, sizes)
        lam_full = np.repeat(stub.penalties, sizes)
        left = (gram * gamma_full[None, :] + np.diag(lam_full)) @ stub.completion
        stacked = np.hstack([left, gram @ U])
        _, logdet = np.linalg.slogdet(stacked)
        _, logdetg = np.linalg.slogdet(gram)
        assert abs(log_jacobian(gamma, stub) - (logdet - logdetg)) < 1e-8


def test_jacobian_basis_invariance():
    rng = np.random.default_rng(9)
    M = rng.normal(size=(30, 5))
    gram = M.T @ M
    units = rand_units(rng, (2, 3))
    stub = jac_stub(units, gram, [1.0, 2.0])
    rotated = jac_stub(units, gram, [1.0, 2.0])
    # rotate each completion block by a random orthogonal matrix
    r0 = 0
    for k, s in enumerate(stub.group_sizes):
        q, _ = np.linalg.qr(rng.normal(size=(s - 1, s - 1)))
        rotated.completion[r0:r0 + s, stub.jac_slices[k]] = \
            stub.completion[r0:r0 + s, stub.jac_slices[k]] @ q
        r0 += s
    lam = np.sqrt(np.repeat(stub.penalties, stub.group_sizes - 1))
    quad = rotated.completion.T @ stub.gram_inv @ rotated.completion
    rotated.jac_quad = 0.5 * ((lam[:, None] * quad * lam[None, :])
                              + (lam[:, None] * quad * lam[None, :]).T)
    for gamma in ([1.0, 1.0], [0.2, 5.0]):
        gamma = np.array(gamma)
        assert abs(log_jacobian(gamma, stub) - log_jacobian(gamma, rotated)) < 1e-10


def test_jacobian_positive_definite_for_positive_gamma():
    rng = np.random.default_rng(10)
    M = rng.normal(size=(40, 7))
    gram = M.T @ M
    units = rand_units(rng, (3, 2, 2))
    stub = jac_stub(units, gram, [0.5, 1.5, 2.5])
    for _ in range(100):
        gamma = np.abs(rng.normal(size=3)) * 10 ** rng.uniform(-3, 2)
        gamma = np.maximum(gamma, 1e-6)
        log_jacobian(gamma, stub)  # raises if the inner matrix is not PD


def test_jacobian_grad_finite_differences():
    rng = np.random.default_rng(11)
    M = rng.normal(size=(40, 7))
    gram = M.T @ M
    units = rand_units(rng, (3, 2, 2))
    stub = jac_stub(units, gram, [0.5, 1.5, 2.5])
    gamma = np.array([1.2, 0.7, 3.0])
    grad = jacobian_grad(gamma, stub)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (log_jacobian(gamma + e, stub) - log_jacobian(gamma - e, stub)) / (2 * h)
        assert abs(fd - grad[k]) / max(abs(grad[k]), 1e-12) < 1e-5


def test_gamma_validation():
    stub = jac_stub([np.array([0.6, 0.8])], np.eye(2), [1.0])
    with pytest.raises(ConfigError):
        log_jacobian(np.array([-1.0]), stub)
    with pytest.raises(ConfigError):
        log_jacobian(np.array([1.0, 1.0]), stub)


@pytest.mark.parametrize("variant", ["disjoint", "overlapping", "standardized", "sparse"])
def test_build_adjustment_all_variants(variant):
    built = 0
    for seed in range(8):
        try:
            ds, gs, rec, params = frozen(seed + 60, variant=variant,
                                         sizes=(2, 3, 2), snr=3.0)
        except EmptySelectionError:
            continue
        built += 1
        recon = params.refit_map @ rec.beta_hat + params.size_map @ rec.gamma + params.offset
        assert np.max(np.abs(recon - rec.omega)) < 1e-8
        # mode_cov is the two-factor composition by construction
        comp = params.size_cov + params.size_slope @ params.refit_cov @ params.size_slope.T
        assert np.max(np.abs(params.mode_cov - comp)) < 1e-10
        assert np.max(np.abs(params.completion.T @ params.completion
                             - np.eye(params.completion.shape[1]))) < 1e-12
    assert built > 0
