import numpy as np

from posi.model import Dataset, GroupStructure


def frozen_instance(seed, variant="disjoint", tau2=1.0, **kw):
    """Solve, freeze, and build adjustment matrices for one random instance."""
    from posi.adjust import build_adjustment
    from posi.groupsolve import freeze_selection, solve

    ds, gs, omega = random_instance(seed, variant=variant, tau=np.sqrt(tau2), **kw)
    b = solve(ds, gs, omega)
    rec = freeze_selection(ds, gs, omega, b)
    params = build_adjustment(ds, gs, rec, tau2 * np.eye(len(omega)))
    return ds, gs, rec, params


def identity_instance():
    """n = p = 2, identity design, one group of two, unit penalty."""
    ds = Dataset(y=np.zeros(2), X=np.eye(2), sigma=1.0)
    gs = GroupStructure("disjoint", (np.array([0, 1]),), np.array([1.0]), p=2)
    omega = np.array([1.0, -0.5])
    return ds, gs, omega


def random_instance(seed, variant="disjoint", n=40, sizes=(2, 3, 1, 2), snr=2.0,
                    rho=0.0, sigma=1.0, tau=1.0):
    """Small random selection problem with the first group carrying signal."""
    rng = np.random.default_rng(seed)
    p = sum(sizes)
    X = rng.normal(size=(n, p))
    if rho:
        mix = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        X = X @ np.linalg.cholesky(mix).T
    groups, start = [], 0
    for s in sizes:
        groups.append(np.arange(start, start + s))
        start += s
    beta = np.zeros(p)
    beta[groups[0]] = snr * rng.choice([-1.0, 1.0], size=sizes[0])
    y = X @ beta + sigma * rng.normal(size=n)
    weights = np.sqrt(2.0 * np.log(p)) * np.sqrt(np.array(sizes, dtype=float)) * sigma
    kw = {}
    if variant == "sparse":
        kw["l1_weight"] = 0.5
    if variant == "overlapping":
        kw["ridge"] = 1e-4
    gs = GroupStructure(variant, tuple(groups), weights, p=p, **kw)
    dim = p if variant != "overlapping" else sum(len(g) for g in gs.groups)
    omega = tau * rng.normal(size=dim)
    return Dataset(y=y, X=X, sigma=sigma), gs, omega
