"""Randomized group-sparse solvers, stationarity checks, and selection freezing.

The solver minimizes

    0.5 * ||y - M b||^2 + sum_g w_g ||b_g||_2 + l1 * ||b||_1
        + 0.5 * ridge * ||b||^2 - omega' b

over the variant's solve space: M is X for the disjoint and sparse variants,
the duplicated-column design for the overlapping variant, and the per-group
orthonormalized design for the standardized variant. Blocks are updated
cyclically with exact block minimization (composed soft-threshold proximal
steps for the sparse variant), followed by an active-set Newton polish so the
stationarity residual reaches solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import (
    ConfigError,
    Dataset,
    EmptySelectionError,
    GroupStructure,
    NumericalError,
    SelectionRecord,
    effective_sigma,
)


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 10000
    tol: float = 1e-8
    aug_map: np.ndarray | None = None  # overlapping: solve column -> original column
    wg: tuple | None = None            # standardized: orthonormal factor per group
    rg: tuple | None = None            # standardized: invertible factor per group

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1:
            raise ConfigError("need tol > 0 and max_iters >= 1")


ACTIVE_MARGIN = 10.0  # a block is selected iff its norm exceeds ACTIVE_MARGIN * tol


def standardize_groups(dataset: Dataset, groups: GroupStructure,
                       opts: SolveOptions | None = None) -> SolveOptions:
    """Factor each group block X_g = W_g R_g with orthonormal W_g.

    Signs are fixed so diag(R_g) > 0, making the factorization deterministic.
    """
    opts = opts or SolveOptions()
    wg, rg = [], []
    for gid, g in enumerate(groups.groups):
        Xg = dataset.X[:, g]
        Q, R = np.linalg.qr(Xg)
        d = np.diag(R)
        if np.min(np.abs(d)) <= 1e-10 * max(1.0, np.max(np.abs(d))):
            raise NumericalError(f"group {gid + 1} block is rank deficient")
        s = np.sign(d)
        wg.append(Q * s)
        rg.append(s[:, None] * R)
    return replace(opts, wg=tuple(wg), rg=tuple(rg))


def augment_for_overlap(dataset: Dataset, groups: GroupStructure):
    """Duplicate shared columns so every group owns a private block.

    Returns the augmented dataset (p* = sum of group sizes columns) and the
    map from augmented column to original column.
    """
    colmap = np.concatenate([np.asarray(g) for g in groups.groups])
    Xstar = dataset.X[:, colmap]
    aug = Dataset(y=dataset.y, X=Xstar, sigma=dataset.sigma)
    return aug, colmap


def prepare_options(dataset: Dataset, groups: GroupStructure,
                    opts: SolveOptions | None = None) -> SolveOptions:
    """Fill in variant-specific solve data missing from opts."""
    opts = opts or SolveOptions()
    if groups.variant == "standardized" and opts.wg is None:
        opts = standardize_groups(dataset, groups, opts)
    if groups.variant == "overlapping" and opts.aug_map is None:
        _, colmap = augment_for_overlap(dataset, groups)
        opts = replace(opts, aug_map=colmap)
    return opts


class _SolveSpace:
    """Design, blocks, and penalties in the coordinates the solver works in."""

    def __init__(self, dataset, groups, opts):
        self.variant = groups.variant
        self.weights = np.asarray(groups.weights, dtype=float)
        self.l1 = groups.l1_weight
        self.ridge = groups.ridge
        if groups.variant == "overlapping":
            self.M = dataset.X[:, opts.aug_map]
            sizes = groups.sizes()
            offs = np.concatenate([[0], np.cumsum(sizes)])
            self.blocks = [np.arange(offs[i], offs[i + 1]) for i in range(len(sizes))]
            self.colmap = np.asarray(opts.aug_map)
        elif groups.variant == "standardized":
            self.M = np.hstack(opts.wg)
            sizes = groups.sizes()
            offs = np.concatenate([[0], np.cumsum(sizes)])
            blocks = [np.arange(offs[i], offs[i + 1]) for i in range(len(sizes))]
            # theta coordinates follow the stacking order of W; remap so that
            # block slots line up with the group's column order
            self.blocks = blocks
            self.colmap = np.concatenate([np.asarray(g) for g in groups.groups])
        else:
            self.M = dataset.X
            self.blocks = [np.asarray(g) for g in groups.groups]
            self.colmap = np.arange(dataset.p)
        self.q = self.M.shape[1]
        self.y = dataset.y
        self.gram = self.M.T @ self.M
        self.mty = self.M.T @ dataset.y
        self._eig = {}

    def block_eig(self, gid):
        if gid not in self._eig:
            g = self.blocks[gid]
            Q = self.gram[np.ix_(g, g)] + self.ridge * np.eye(len(g))
            d, V = np.linalg.eigh(Q)
            if d[0] <= 0:
                raise NumericalError(f"group {gid + 1} block is not positive definite")
            self._eig[gid] = (d, V)
        return self._eig[gid]


def _block_min(d, V, u, w):
    """Exact minimizer of 0.5 b'Qb - u'b + w ||b|| for Q = V diag(d) V'."""
    unorm = np.linalg.norm(u)
    if unorm <= w:
        return np.zeros_like(u)
    ut = V.T @ u
    dmax, dmin = d[-1], d[0]
    if dmax - dmin <= 1e-14 * dmax:
        t = (unorm - w) / dmax
        return (t / unorm) * u
    ut2 = ut ** 2
    t = (unorm - w) / dmax  # f(t) >= 1 here; Newton walks up to the root
    for _ in range(100):
        den = t * d + w
        f = np.sum(ut2 / den ** 2)
        if abs(f - 1.0) < 1e-14:
            break
        fp = -2.0 * np.sum(ut2 * d / den ** 3)
        step = (f - 1.0) / fp
        t_new = t - step
        if not np.isfinite(t_new) or t_new <= 0:
            t_new = 0.5 * (t + (unorm - w) / dmin)
        if abs(t_new - t) < 1e-16 * (1.0 + t):
            t = t_new
            break
        t = t_new
    return V @ (ut / (d + w / t))


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _block_soft(x, thr):
    nx = np.linalg.norm(x)
    if nx <= thr:
        return np.zeros_like(x)
    return (1.0 - thr / nx) * x


def objective(dataset: Dataset, groups: GroupStructure, omega: np.ndarray,
              solution: np.ndarray, opts: SolveOptions | None = None) -> float:
    """Objective value of the randomized problem at a solve-space point."""
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    return _objective(sp, np.asarray(solution, dtype=float), np.asarray(omega, dtype=float))


def _objective(sp, b, omega):
    resid = sp.y - sp.M @ b
    val = 0.5 * resid @ resid - omega @ b + 0.5 * sp.ridge * (b @ b)
    for gid, g in enumerate(sp.blocks):
        val += sp.weights[gid] * np.linalg.norm(b[g])
    if sp.l1 > 0:
        val += sp.l1 * np.sum(np.abs(b))
    return val


def solve(dataset: Dataset, groups: GroupStructure, omega: np.ndarray,
          opts: SolveOptions | None = None) -> np.ndarray:
    """Solve the randomized problem; returns the solve-space solution vector."""
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    omega = np.asarray(omega, dtype=float).ravel()
    if len(omega) != sp.q:
        raise ConfigError(
            f"randomization has length {len(omega)} but the solve space has {sp.q} columns")
    v = sp.mty + omega
    b = np.zeros(sp.q)
    r = np.zeros(sp.q)  # gram @ b, maintained incrementally
    tol = opts.tol
    stage_tol = max(tol, 1e-6)
    prev_obj = _objective(sp, b, omega)
    sweeps = 0
    while sweeps < opts.max_iters:
        delta = 0.0
        for gid, g in enumerate(sp.blocks):
            bg = b[g]
            if sp.l1 > 0:
                d, _ = sp.block_eig(gid)
                lip = d[-1]
                grad = r[g] - v[g]
                z = _soft(bg - grad / lip, sp.l1 / lip)
                bg_new = _block_soft(z, sp.weights[gid] / lip)
            else:
                d, V = sp.block_eig(gid)
                u = v[g] - r[g] + sp.gram[np.ix_(g, g)] @ bg
                bg_new = _block_min(d, V, u, sp.weights[gid])
            diff = bg_new - bg
            if np.any(diff):
                r += sp.gram[:, g] @ diff
                b[g] = bg_new
                delta = max(delta, np.max(np.abs(diff)))
        sweeps += 1
        obj = 0.5 * (sp.y @ sp.y) - sp.mty @ b + 0.5 * (b @ r) - omega @ b \
            + 0.5 * sp.ridge * (b @ b)
        for gid, g in enumerate(sp.blocks):
            obj += sp.weights[gid] * np.linalg.norm(b[g])
        if sp.l1 > 0:
            obj += sp.l1 * np.sum(np.abs(b))
        if obj > prev_obj + 1e-10 * (1.0 + abs(prev_obj)):
            raise NumericalError(
                f"objective increased during sweep {sweeps}: {prev_obj} -> {obj}")
        prev_obj = obj
        if delta < stage_tol:
            resid = _stationarity(sp, b, omega)
            if resid <= tol:
                return b
            b_pol = _polish(sp, b, omega, tol)
            if b_pol is not None:
                obj_pol = _objective(sp, b_pol, omega)
                if obj_pol <= prev_obj + 1e-10 * (1.0 + abs(prev_obj)) \
                        and _stationarity(sp, b_pol, omega) <= tol:
                    return b_pol
            stage_tol = max(stage_tol * 1e-2, 1e-15)
    resid = _stationarity(sp, b, omega)
    if resid <= tol:
        return b
    raise NumericalError(
        f"solver did not converge in {opts.max_iters} sweeps; KKT residual {resid:.3e}")


def _polish(sp, b, omega, tol):
    """Newton on the smooth stationarity system restricted to the active support."""
    support = []
    units = []
    for gid, g in enumerate(sp.blocks):
        bg = b[g]
        nz = np.abs(bg) > 0
        if np.linalg.norm(bg) == 0 or not np.any(nz):
            continue
        support.append(g[nz])
        units.append(gid)
    if not support:
        return None
    v = sp.mty + omega
    idx = np.concatenate(support)
    x = b[idx].copy()
    signs = np.sign(x)
    Gss = sp.gram[np.ix_(idx, idx)] + sp.ridge * np.eye(len(idx))
    offs = np.concatenate([[0], np.cumsum([len(s) for s in support])])

    def system(xv):
        F = Gss @ xv - v[idx]
        H = Gss.copy()
        for k, gid in enumerate(units):
            sl = slice(offs[k], offs[k + 1])
            bg = xv[sl]
            nrm = np.linalg.norm(bg)
            if nrm <= 0:
                return None, None
            u = bg / nrm
            F[sl] += sp.weights[gid] * u
            H[sl, sl] += (sp.weights[gid] / nrm) * (np.eye(len(bg)) - np.outer(u, u))
        if sp.l1 > 0:
            F += sp.l1 * signs
        return F, H

    F, H = system(x)
    if F is None:
        return None
    for _ in range(50):
        nrm = np.max(np.abs(F))
        if nrm <= 0.05 * tol:
            break
        try:
            step = np.linalg.solve(H, -F)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        ok = False
        for _ in range(30):
            x_new = x + alpha * step
            if sp.l1 > 0 and np.any(np.sign(x_new) != signs):
                alpha *= 0.5
                continue
            F_new, H_new = system(x_new)
            if F_new is None or np.max(np.abs(F_new)) >= nrm:
                alpha *= 0.5
                continue
            x, F, H = x_new, F_new, H_new
            ok = True
            break
        if not ok:
            return None
    out = np.zeros_like(b)
    out[idx] = x
    return out


def check_stationarity(dataset: Dataset, groups: GroupStructure, omega: np.ndarray,
                       solution: np.ndarray, opts: SolveOptions | None = None) -> float:
    """Max-norm stationarity residual at a candidate solve-space solution.

    Active blocks supply the exact subgradient; inactive blocks use the best
    feasible one (ball projection of the residual, after a coordinate-wise
    soft-threshold when an l1 term is present). Zero iff exactly stationary.
    """
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    return _stationarity(sp, np.asarray(solution, dtype=float), np.asarray(omega, dtype=float))


def _stationarity(sp, b, omega):
    # required subgradient: s = omega - M'(Mb - y) - ridge*b must lie in the
    # penalty subdifferential; the residual measures the gap coordinate-wise
    need = omega - (sp.gram @ b - sp.mty) - sp.ridge * b
    resid = np.zeros_like(b)
    for gid, g in enumerate(sp.blocks):
        bg = b[g]
        w = sp.weights[gid]
        sg = need[g]
        nrm = np.linalg.norm(bg)
        if nrm > 0:
            fixed = w * bg / nrm
            if sp.l1 > 0:
                nz = bg != 0
                fixed = fixed + sp.l1 * np.sign(bg)
                gap = sg - fixed
                gap[~nz] = _soft(sg[~nz], sp.l1)
                resid[g] = gap
            else:
                resid[g] = sg - fixed
        else:
            t = _soft(sg, sp.l1) if sp.l1 > 0 else sg
            tn = np.linalg.norm(t)
            if tn > w:
                resid[g] = (1.0 - w / tn) * t
    return float(np.max(np.abs(resid))) if len(resid) else 0.0


def _support(sp, b, thresh):
    """Active groups, polar pieces, and solve/model column sets of a solution."""
    active, gamma, units, solve_cols, within = [], [], [], [], {}
    for gid, g in enumerate(sp.blocks):
        bg = b[g]
        if np.linalg.norm(bg) <= thresh:
            continue
        if sp.l1 > 0:
            keep = np.abs(bg) > thresh
            if not np.any(keep):
                continue
            within[gid] = np.flatnonzero(keep)
            bg = bg[keep]
            cols = g[keep]
        else:
            cols = g
        nrm = np.linalg.norm(bg)
        active.append(gid)
        gamma.append(nrm)
        units.append(bg / nrm)
        solve_cols.append(cols)
    if not active:
        raise EmptySelectionError("no groups selected; nothing to infer about")
    solve_cols = np.concatenate(solve_cols)
    if sp.variant == "overlapping":
        mapped = sp.colmap[solve_cols]
        seen, model_cols = set(), []
        for c in mapped:
            if c not in seen:
                seen.add(c)
                model_cols.append(c)
        model_cols = np.asarray(model_cols, dtype=int)
    elif sp.variant == "standardized":
        model_cols = sp.colmap[solve_cols]
    else:
        model_cols = solve_cols.copy()
    return active, gamma, units, solve_cols, within, model_cols


def selected_columns(dataset: Dataset, groups: GroupStructure, solution: np.ndarray,
                     opts: SolveOptions | None = None) -> np.ndarray:
    """Original-space columns selected by a solution; raises on empty support."""
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    b = np.asarray(solution, dtype=float).ravel()
    return _support(sp, b, ACTIVE_MARGIN * opts.tol)[5]


def freeze_selection(dataset: Dataset, groups: GroupStructure, omega: np.ndarray,
                     solution: np.ndarray, opts: SolveOptions | None = None) -> SelectionRecord:
    """Extract the polar pieces, subgradients, and refit statistics of a solution."""
    opts = prepare_options(dataset, groups, opts)
    sp = _SolveSpace(dataset, groups, opts)
    b = np.asarray(solution, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    resid = _stationarity(sp, b, omega)
    if resid > opts.tol:
        raise NumericalError(
            f"cannot freeze: KKT residual {resid:.3e} exceeds tol {opts.tol:.1e}")
    sub = omega - (sp.gram @ b - sp.mty) - sp.ridge * b
    active, gamma, units, solve_cols, within, model_cols = \
        _support(sp, b, ACTIVE_MARGIN * opts.tol)

    X_E = dataset.X[:, model_cols]
    gram_E = X_E.T @ X_E
    try:
        chol = np.linalg.cholesky(gram_E)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("selected design X_E is rank deficient") from exc
    beta_hat = _chol_solve(chol, X_E.T @ dataset.y)
    sigma = effective_sigma(dataset, model_cols)
    model_cov = sigma ** 2 * _chol_solve(chol, np.eye(len(model_cols)))
    resid_stat = sp.M.T @ (dataset.y - X_E @ beta_hat)

    inactive_sub = {}
    l1_signs = None
    if sp.l1 > 0:
        l1_signs = np.zeros(sp.q)
        for gid, g in enumerate(sp.blocks):
            if gid in within:
                keep = np.zeros(len(g), dtype=bool)
                keep[within[gid]] = True
                l1_signs[g[keep]] = np.sign(b[g[keep]])
                t = sub[g[~keep]] / sp.l1
                if np.any(np.abs(t) > 1.0 + 1e-6):
                    raise NumericalError("l1 subgradient escapes the unit interval")
                l1_signs[g[~keep]] = t
            else:
                t = np.clip(sub[g] / sp.l1, -1.0, 1.0)
                l1_signs[g] = t
                inactive_sub[gid] = (sub[g] - sp.l1 * t) / sp.weights[gid]
    else:
        for gid, g in enumerate(sp.blocks):
            if gid not in active:
                inactive_sub[gid] = sub[g] / sp.weights[gid]

    return SelectionRecord(
        variant=groups.variant,
        active_groups=tuple(active),
        model_cols=model_cols,
        solve_cols=solve_cols,
        gamma=np.asarray(gamma),
        unit_blocks=tuple(units),
        inactive_sub=inactive_sub,
        beta_hat=beta_hat,
        resid_stat=resid_stat,
        model_cov=model_cov,
        sigma=sigma,
        omega=omega,
        kkt_residual=resid,
        l1_signs=l1_signs,
        within_support=within,
    )


def _chol_solve(chol, rhs):
    tmp = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, tmp)
