"""Synthetic designs, replicated method comparisons, and summary metrics.

Rows of the design are i.i.d. Gaussian with autoregressive correlation, the
response follows a group-sparse linear model, and each replication runs the
selection-informed method against the naive and data-splitting baselines.
Interval coverage targets the projection of the true regression function onto
the selected columns.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .adjust import build_adjustment
from .baselines import BaselineFit, SplitConfig, naive_inference, split_inference
from .groupsolve import freeze_selection, solve
from .model import (
    ConfigError,
    Dataset,
    EmptySelectionError,
    GroupStructure,
    NumericalError,
)
from .posterior import PosteriorSpec
from .sampler import ChainConfig, credible_intervals, run_chain

SNR_LEVELS = {"low": 0.2, "medium": 0.5, "high": 1.5}
RAND_LABELS = {"2:1": 2.0 / 3.0, "1:1": 0.5, "1:2": 1.0 / 3.0}
SETTINGS = ("balanced", "heterogeneous", "balanced_overlapping")
METHODS = ("selection-informed", "naive", "split")


@dataclass(frozen=True)
class ScenarioConfig:
    setting: str = "balanced"
    snr: str = "medium"
    randomization: str = "1:1"
    variant: str = "disjoint"
    n: int = 500
    sigma: float = 3.0
    ar_rho: float = 0.2
    replications: int = 100
    lambda_scale: float = 1.0
    base_seed: int = 0
    level: float = 0.9
    draws: int = 1500
    burn_in: int = 100
    eta: float = 1.0
    ridge: float = 1e-4
    f1_unit: str = "covariate"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.snr not in SNR_LEVELS:
            raise ConfigError(
                f"snr must be one of {tuple(SNR_LEVELS)}, got {self.snr!r}")
        if self.randomization not in RAND_LABELS:
            raise ConfigError(
                f"randomization label must be one of {tuple(RAND_LABELS)}, "
                f"got {self.randomization!r}")
        if self.setting == "balanced_overlapping":
            if self.variant != "overlapping":
                object.__setattr__(self, "variant", "overlapping")
        elif self.variant not in ("disjoint", "standardized"):
            raise ConfigError(
                f"variant must be 'disjoint' or 'standardized' for the "
                f"{self.setting} setting, got {self.variant!r}")
        if self.f1_unit not in ("covariate", "group"):
            raise ConfigError("f1_unit must be 'covariate' or 'group'")
        if self.replications < 1 or self.n < 10:
            raise ConfigError("need replications >= 1 and n >= 10")

    @property
    def snr_t(self) -> float:
        return SNR_LEVELS[self.snr]

    @property
    def split_ratio(self) -> float:
        return RAND_LABELS[self.randomization]

    @property
    def tau2(self) -> float:
        r = self.split_ratio
        return self.sigma ** 2 * (1.0 - r) / r


def group_layout(setting: str):
    """Column count and group index lists of a scenario setting."""
    if setting == "balanced":
        return 100, [np.arange(4 * k, 4 * k + 4) for k in range(25)]
    if setting == "heterogeneous":
        sizes = [3] * 3 + [4] * 4 + [5] * 5 + [10] * 5
        groups, start = [], 0
        for s in sizes:
            groups.append(np.arange(start, start + s))
            start += s
        return start, groups
    if setting == "balanced_overlapping":
        # 34 chained groups of four, each sharing one column with the next
        return 103, [np.arange(3 * k, 3 * k + 4) for k in range(34)]
    raise ConfigError(f"unknown setting {setting!r}")


def penalty_weights(groups, p: int, sigma: float, lambda_scale: float = 1.0,
                    rho: float = 1.0) -> np.ndarray:
    """Per-group penalties lambda * rho * sigma * sqrt(2 log p * |g| / gbar),
    where gbar is the floor of the mean group size."""
    sizes = np.array([len(g) for g in groups], dtype=float)
    gbar = float(np.floor(sizes.mean()))
    return lambda_scale * rho * sigma * np.sqrt(2.0 * np.log(p) * sizes / gbar)


def scenario_groups(config: ScenarioConfig) -> GroupStructure:
    p, groups = group_layout(config.setting)
    weights = penalty_weights(groups, p, config.sigma, config.lambda_scale, rho=1.0)
    kw = {"ridge": config.ridge} if config.variant == "overlapping" else {}
    return GroupStructure(config.variant, tuple(groups), weights, p=p, **kw)


def _seed_for(config: ScenarioConfig, rep: int, tag: int) -> int:
    ss = np.random.SeedSequence((config.base_seed, rep, tag))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _truth(config: ScenarioConfig, groups, p, rng) -> np.ndarray:
    # amplitudes in noise-sd units: the block signal-to-penalty ratio is then
    # sqrt(t * gbar), making t = 0.2 / 0.5 / 1.5 sub-, near-, supra-threshold
    mag = config.sigma * np.sqrt(2.0 * config.snr_t * np.log(p))
    beta = np.zeros(p)
    if config.setting == "heterogeneous":
        sizes = np.array([len(g) for g in groups])
        active = [rng.choice(np.flatnonzero(sizes == s)) for s in (3, 4, 5)]
        cols = np.concatenate([groups[a] for a in sorted(active, key=lambda a: sizes[a])])
        mags = np.linspace(mag / len(cols), mag, len(cols))
        beta[cols] = rng.choice([-1.0, 1.0], size=len(cols)) * mags
    else:
        active = rng.choice(len(groups), size=3, replace=False)
        cols = np.unique(np.concatenate([groups[a] for a in active]))
        beta[cols] = rng.choice([-1.0, 1.0], size=len(cols)) * mag
    return beta


def ar_rows(rng, n: int, p: int, rho: float) -> np.ndarray:
    """i.i.d. rows with autoregressive covariance rho^{|i-j|}."""
    lag = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    chol = np.linalg.cholesky(rho ** lag) if rho else np.eye(p)
    return rng.standard_normal((n, p)) @ chol.T


def generate_instance(config: ScenarioConfig, rep: int):
    """One synthetic dataset; deterministic given (base_seed, replication).

    Columns are scaled by 1/sqrt(n) to unit norm in expectation: the penalty
    rule sigma * sqrt(2 log p * |g| / gbar) and the randomization calibration
    tau^2 = sigma^2 (1 - r) / r are both pinned to that scale (the carving
    equivalence uses the per-row gram X'X / n).
    """
    p, groups = group_layout(config.setting)
    rng = np.random.default_rng(np.random.SeedSequence((config.base_seed, rep, 0)))
    X = ar_rows(rng, config.n, p, config.ar_rho) / np.sqrt(config.n)
    beta = _truth(config, groups, p, rng)
    y = X @ beta + config.sigma * rng.standard_normal(config.n)
    dataset = Dataset(y=y, X=X, sigma=config.sigma)
    return dataset, scenario_groups(config), beta


def f1_score(selected_cols, beta, groups, unit: str = "covariate") -> float:
    """TP / (TP + (FP + FN) / 2) over recovered signal covariates or groups."""
    if unit == "covariate":
        sel = set(int(c) for c in selected_cols)
        sig = set(np.flatnonzero(beta != 0).tolist())
    else:
        sel_cols = set(int(c) for c in selected_cols)
        sel = {gid for gid, g in enumerate(groups.groups)
               if sel_cols & set(np.asarray(g).tolist())}
        sig = {gid for gid, g in enumerate(groups.groups)
               if np.any(beta[np.asarray(g)] != 0)}
    tp = len(sel & sig)
    fp = len(sel - sig)
    fn = len(sig - sel)
    denom = tp + 0.5 * (fp + fn)
    return tp / denom if denom > 0 else 0.0


def projection_target(dataset: Dataset, beta, cols) -> np.ndarray:
    """Selected-model projection of the true regression function."""
    X_E = dataset.X[:, cols]
    return np.linalg.lstsq(X_E, dataset.X @ beta, rcond=None)[0]


@dataclass
class MetricsRow:
    method: str
    setting: str
    snr: str
    randomization: str
    variant: str
    replication: int
    selected_size: int = 0
    f1: float = np.nan
    coverage: float = np.nan
    covered: int = 0
    n_targets: int = 0
    mean_length: float = np.nan
    median_length: float = np.nan
    empty_selection: bool = False
    failed: bool = False
    wall_time: float = 0.0


def _new_row(config, rep, method) -> MetricsRow:
    return MetricsRow(method=method, setting=config.setting, snr=config.snr,
                      randomization=config.randomization, variant=config.variant,
                      replication=rep)


def _interval_metrics(row: MetricsRow, report, cols, target):
    bounds = report.bounds()
    hit = (bounds[:, 0] <= target) & (target <= bounds[:, 1])
    lengths = bounds[:, 1] - bounds[:, 0]
    row.covered = int(hit.sum())
    row.n_targets = len(target)
    row.coverage = float(hit.mean())
    row.mean_length = float(lengths.mean())
    row.median_length = float(np.median(lengths))


def run_replication(config: ScenarioConfig, rep: int,
                    selection_only: bool = False) -> list:
    dataset, groups, beta = generate_instance(config, rep)
    dim = dataset.p if config.variant != "overlapping" \
        else int(sum(len(g) for g in groups.groups))
    rows = []

    # selection-informed: randomized solve, surrogate posterior chain
    row = _new_row(config, rep, "selection-informed")
    start = time.perf_counter()
    try:
        omega_rng = np.random.default_rng(_seed_for(config, rep, 1))
        omega = np.sqrt(config.tau2) * omega_rng.standard_normal(dim)
        sol = solve(dataset, groups, omega)
        record = freeze_selection(dataset, groups, omega, sol)
        row.selected_size = len(record.model_cols)
        row.f1 = f1_score(record.model_cols, beta, groups, config.f1_unit)
        if not selection_only:
            params = build_adjustment(dataset, groups, record,
                                      config.tau2 * np.eye(dim))
            spec = PosteriorSpec(params=params, beta_hat=record.beta_hat)
            chain = run_chain(spec, ChainConfig(
                draws=config.draws, burn_in=config.burn_in, eta=config.eta,
                seed=_seed_for(config, rep, 3)), record=record, groups=groups)
            report = credible_intervals(chain, config.level)
            target = projection_target(dataset, beta, record.model_cols)
            _interval_metrics(row, report, record.model_cols, target)
    except EmptySelectionError:
        row.empty_selection = True
        row.f1 = f1_score([], beta, groups, config.f1_unit)
    except NumericalError:
        row.failed = True
    row.wall_time = time.perf_counter() - start
    rows.append(row)

    # naive: non-randomized selection, selection-ignoring OLS intervals
    row = _new_row(config, rep, "naive")
    start = time.perf_counter()
    try:
        fit = naive_inference(dataset, groups, config.level)
        row.selected_size = len(fit.model_cols)
        row.f1 = f1_score(fit.model_cols, beta, groups, config.f1_unit)
        if not selection_only:
            target = projection_target(dataset, beta, fit.model_cols)
            _interval_metrics(row, fit.report, fit.model_cols, target)
    except EmptySelectionError:
        row.empty_selection = True
        row.f1 = f1_score([], beta, groups, config.f1_unit)
    except NumericalError:
        row.failed = True
    row.wall_time = time.perf_counter() - start
    rows.append(row)

    # split: subsample selection, holdout OLS intervals
    row = _new_row(config, rep, "split")
    start = time.perf_counter()
    try:
        cfg = SplitConfig(ratio=config.split_ratio, seed=_seed_for(config, rep, 2),
                          label=config.randomization)
        fit = split_inference(dataset, groups, cfg, config.level)
        row.selected_size = len(fit.model_cols)
        row.f1 = f1_score(fit.model_cols, beta, groups, config.f1_unit)
        if not selection_only:
            target = projection_target(dataset, beta, fit.model_cols)
            _interval_metrics(row, fit.report, fit.model_cols, target)
    except EmptySelectionError:
        row.empty_selection = True
        row.f1 = f1_score([], beta, groups, config.f1_unit)
    except (NumericalError, ConfigError):
        row.failed = True
    row.wall_time = time.perf_counter() - start
    rows.append(row)
    return rows


def _run_replication_star(args):
    return run_replication(*args)


def run_experiment(config: ScenarioConfig, jobs: int = 1, selection_only: bool = False):
    """All replications of one scenario cell; returns (metrics, summary) frames."""
    tasks = [(config, rep, selection_only) for rep in range(config.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_rep = list(pool.map(_run_replication_star, tasks, chunksize=1))
    else:
        per_rep = [run_replication(*t) for t in tasks]
    rows = [r for chunk in per_rep for r in chunk]
    metrics = pd.DataFrame([vars(r) for r in rows])
    return metrics, summarize(metrics)


def summarize(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per-method quartile table plus pooled coverage and failure counts."""
    out = []
    for method, sub in metrics.groupby("method", sort=False):
        ok = sub[~sub["empty_selection"] & ~sub["failed"]]
        row = {"method": method,
               "replications": len(sub),
               "empty_selections": int(sub["empty_selection"].sum()),
               "failures": int(sub["failed"].sum()),
               "mean_selected_size": float(ok["selected_size"].mean()) if len(ok) else np.nan,
               "f1_mean": float(sub["f1"].mean())}
        for name, col in (("f1", "f1"), ("coverage", "coverage"),
                          ("length", "median_length")):
            vals = ok[col].dropna()
            for q, tag in ((0.25, "q1"), (0.5, "median"), (0.75, "q3")):
                row[f"{name}_{tag}"] = float(vals.quantile(q)) if len(vals) else np.nan
        row["coverage_mean"] = float(ok["coverage"].mean()) if len(ok) else np.nan
        tot = ok["n_targets"].sum()
        row["coverage_pooled"] = float(ok["covered"].sum() / tot) if tot else np.nan
        row["mean_wall_time"] = float(sub["wall_time"].mean())
        out.append(row)
    return pd.DataFrame(out)
