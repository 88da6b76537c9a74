"""Comparison procedures: selection-ignoring OLS and data splitting."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri

from .groupsolve import SolveOptions, selected_columns, solve
from .model import ConfigError, Dataset, GroupStructure, NumericalError
from .sampler import IntervalReport, IntervalRow


@dataclass(frozen=True)
class SplitConfig:
    """Selection on floor(ratio * n) rows without replacement, inference on the rest."""

    ratio: float
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if not (0.0 < self.ratio < 1.0):
            raise ConfigError("split ratio must lie strictly between 0 and 1")

    @classmethod
    def from_label(cls, label: str, seed: int = 0) -> "SplitConfig":
        try:
            x, y = label.split(":")
            x, y = int(x), int(y)
        except ValueError as exc:
            raise ConfigError(f"split label must look like 'x:y', got {label!r}") from exc
        if x <= 0 or y <= 0:
            raise ConfigError("split label parts must be positive")
        return cls(ratio=x / (x + y), seed=seed, label=label)


@dataclass(frozen=True)
class BaselineFit:
    report: IntervalReport
    model_cols: np.ndarray
    beta_hat: np.ndarray
    stderr: np.ndarray
    subsample: np.ndarray | None = None


def _z_interval_rows(method, cols, beta_hat, stderr, level):
    z = ndtri((1.0 + level) / 2.0)
    return [IntervalRow(method=method, target=f"x{c + 1}", level=level,
                        estimate=float(b), lower=float(b - z * s), upper=float(b + z * s))
            for c, b, s in zip(cols, beta_hat, stderr)]


def _ols_fit(X, y, sigma):
    gram = X.T @ X
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("selected design is rank deficient on the inference rows") from exc
    beta = np.linalg.solve(chol.T, np.linalg.solve(chol, X.T @ y))
    inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(X.shape[1])))
    if isinstance(sigma, str):
        dof = X.shape[0] - X.shape[1]
        if dof < 1:
            raise NumericalError("no degrees of freedom to estimate sigma")
        resid = y - X @ beta
        sigma = np.sqrt(resid @ resid / dof)
    stderr = sigma * np.sqrt(np.diag(inv))
    return beta, stderr


def naive_inference(dataset: Dataset, groups: GroupStructure, level: float,
                    opts: SolveOptions | None = None) -> BaselineFit:
    """Non-randomized selection on all rows, then plain OLS z-intervals."""
    if not (0.0 < level < 1.0):
        raise ConfigError("level must lie in (0, 1)")
    dim = dataset.p if groups.variant != "overlapping" \
        else int(sum(len(g) for g in groups.groups))
    sol = solve(dataset, groups, np.zeros(dim), opts)
    cols = selected_columns(dataset, groups, sol, opts)
    beta_hat, stderr = _ols_fit(dataset.X[:, cols], dataset.y, dataset.sigma)
    rows = _z_interval_rows("naive", cols, beta_hat, stderr, level)
    return BaselineFit(report=IntervalReport(rows=rows), model_cols=cols,
                       beta_hat=beta_hat, stderr=stderr)


def split_inference(dataset: Dataset, groups: GroupStructure, config: SplitConfig,
                    level: float, opts: SolveOptions | None = None) -> BaselineFit:
    """Group selection on a subsample, OLS z-intervals from the holdout rows.

    Penalty weights scale by the subsample fraction (its square root for the
    standardized variant); the subsample draw has its own RNG stream so it
    never interacts with solver seeds.
    """
    if not (0.0 < level < 1.0):
        raise ConfigError("level must lie in (0, 1)")
    n = dataset.n
    n_sel = int(np.floor(config.ratio * n))
    if n_sel < 2 or n - n_sel < 2:
        raise ConfigError(
            f"split ratio {config.ratio} leaves {n_sel} selection rows and "
            f"{n - n_sel} holdout rows; both sides need at least 2")
    rng = np.random.default_rng(config.seed)
    sel_idx = np.sort(rng.choice(n, size=n_sel, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[sel_idx] = True

    rho = np.sqrt(config.ratio) if groups.variant == "standardized" else config.ratio
    scaled = replace(groups, weights=np.asarray(groups.weights) * rho)
    sub = Dataset(y=dataset.y[mask], X=dataset.X[mask], sigma=dataset.sigma)
    dim = dataset.p if groups.variant != "overlapping" \
        else int(sum(len(g) for g in groups.groups))
    sol = solve(sub, scaled, np.zeros(dim), opts)
    cols = selected_columns(sub, scaled, sol, opts)

    if n - n_sel < len(cols) + 1:
        raise ConfigError(
            f"holdout has {n - n_sel} rows but the selected model needs "
            f"at least {len(cols) + 1}")
    X_hold = dataset.X[~mask][:, cols]
    y_hold = dataset.y[~mask]
    beta_hat, stderr = _ols_fit(X_hold, y_hold, dataset.sigma)
    rows = _z_interval_rows("split", cols, beta_hat, stderr, level)
    return BaselineFit(report=IntervalReport(rows=rows), model_cols=cols,
                       beta_hat=beta_hat, stderr=stderr, subsample=sel_idx)
