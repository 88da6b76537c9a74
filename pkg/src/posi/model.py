"""Core data types, file ingestion, and the Gaussian randomization draw."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("disjoint", "overlapping", "standardized", "sparse")


class PosiError(Exception):
    """Base class for package errors."""


class ConfigError(PosiError):
    """Invalid configuration, file format, or dimensions."""


class EmptySelectionError(PosiError):
    """The solver selected no groups; no inference is possible."""


class NumericalError(PosiError):
    """A numerical routine failed (non-PD matrix, divergence, ...)."""


@dataclass(frozen=True)
class Dataset:
    """Fixed-design regression data: response y (n,), design X (n, p).

    sigma is the noise standard deviation (a positive float) or the string
    "estimate", in which case a plug-in residual estimate is used downstream.
    """

    y: np.ndarray
    X: np.ndarray
    sigma: float | str = "estimate"
    standardized: bool = False

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise ConfigError("design matrix must be 2-dimensional")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        n, p = X.shape
        if len(y) != n:
            raise ConfigError(f"response has {len(y)} rows but design has {n}")
        if n < 2 or p < 1:
            raise ConfigError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if isinstance(self.sigma, str):
            if self.sigma != "estimate":
                raise ConfigError("sigma must be a positive number or 'estimate'")
        elif self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.standardized:
            mu = X.mean(axis=0)
            sd = np.sqrt(np.mean((X - mu) ** 2, axis=0))
            if np.max(np.abs(mu)) > 1e-10 or np.max(np.abs(sd - 1.0)) > 1e-10:
                raise ConfigError("standardized flag set but columns are not standardized")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


def standardize_columns(X: np.ndarray) -> np.ndarray:
    """Center each column and scale to unit population variance.

    The scale is sqrt(mean((x - xbar)^2)), so a column (1, 2, 3) maps to
    (-1.2247, 0, 1.2247).
    """
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    sd = np.sqrt(np.mean((X - mu) ** 2, axis=0))
    if np.any(sd <= 0):
        raise ConfigError("cannot standardize a constant column")
    return (X - mu) / sd


def load_dataset(x_path, y_path, standardize: bool = False,
                 sigma: float | str = "estimate") -> Dataset:
    """Read headerless numeric CSVs for X and y into a Dataset."""
    X = _read_csv_matrix(x_path)
    y = _read_csv_matrix(y_path)
    if y.ndim == 2:
        if y.shape[1] != 1:
            raise ConfigError(f"response file must have one column, got {y.shape[1]}")
        y = y[:, 0]
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != y.shape[0]:
        raise ConfigError(
            f"dimension mismatch: {X.shape[0]} design rows vs {y.shape[0]} response rows")
    if standardize:
        X = standardize_columns(X)
    return Dataset(y=y, X=X, sigma=sigma, standardized=standardize)


def save_dataset(dataset: Dataset, x_path, y_path) -> None:
    """Write X and y back to CSV at full float64 precision (round-trip exact)."""
    np.savetxt(x_path, dataset.X, delimiter=",", fmt="%.17g")
    np.savetxt(y_path, dataset.y, delimiter=",", fmt="%.17g")


def _read_csv_matrix(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    except ValueError as exc:
        raise ConfigError(f"non-numeric cell in {path}: {exc}") from exc
    return arr


@dataclass(frozen=True)
class GroupStructure:
    """Variant tag plus the group-to-column map and penalty weights.

    groups hold 0-based column indices internally; the JSON spec file is
    1-based. Disjoint-style variants must partition {1..p}; the overlapping
    variant only needs to cover it.
    """

    variant: str
    groups: tuple
    weights: np.ndarray
    p: int
    l1_weight: float = 0.0
    ridge: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        groups = tuple(np.asarray(g, dtype=int) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if len(groups) == 0:
            raise ConfigError("need at least one group")
        if len(self.weights) != len(groups):
            raise ConfigError("one penalty weight per group required")
        if np.any(self.weights <= 0):
            raise ConfigError("penalty weights must be positive")
        for g in groups:
            if len(g) == 0:
                raise ConfigError("zero-length group")
            if np.any(g < 0) or np.any(g >= self.p):
                raise ConfigError(f"column index out of range 1..{self.p}")
        flat = np.concatenate(groups)
        covered = np.unique(flat)
        if self.variant == "overlapping":
            if len(covered) != self.p:
                missing = sorted(set(range(self.p)) - set(covered.tolist()))
                raise ConfigError(f"columns not covered by any group: {[i + 1 for i in missing]}")
            if self.ridge <= 0:
                raise ConfigError("overlapping variant requires ridge > 0")
            if self.l1_weight != 0:
                raise ConfigError("l1_weight is only valid for the sparse variant")
        else:
            if len(flat) != len(covered):
                raise ConfigError("groups overlap but variant is not 'overlapping'")
            if len(covered) != self.p:
                missing = sorted(set(range(self.p)) - set(covered.tolist()))
                raise ConfigError(f"columns not covered by any group: {[i + 1 for i in missing]}")
            if self.ridge != 0:
                raise ConfigError("ridge is only valid for the overlapping variant")
            if self.variant == "sparse":
                if self.l1_weight <= 0:
                    raise ConfigError("sparse variant requires l1_weight > 0")
            elif self.l1_weight != 0:
                raise ConfigError("l1_weight is only valid for the sparse variant")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups])


DEFAULT_RIDGE = 1e-4


def parse_groups(spec_path, p: int) -> GroupStructure:
    """Parse the JSON group-specification file and validate it against p."""
    with open(spec_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed group spec {spec_path}: {exc}") from exc
    return groups_from_dict(doc, p)


def groups_from_dict(doc: dict, p: int) -> GroupStructure:
    try:
        variant = doc["variant"]
        raw_groups = doc["groups"]
        weights = doc["weights"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"group spec missing required key: {exc}") from exc
    groups = []
    for g in raw_groups:
        idx = np.asarray(g, dtype=int)
        if np.any(idx < 1) or np.any(idx > p):
            raise ConfigError(f"group index out of range 1..{p}: {g}")
        groups.append(idx - 1)
    ridge = float(doc.get("ridge", DEFAULT_RIDGE if variant == "overlapping" else 0.0))
    return GroupStructure(
        variant=variant,
        groups=tuple(groups),
        weights=np.asarray(weights, dtype=float),
        p=p,
        l1_weight=float(doc.get("l1_weight", 0.0)),
        ridge=ridge,
    )


def groups_to_dict(groups: GroupStructure) -> dict:
    doc = {
        "variant": groups.variant,
        "groups": [(np.asarray(g) + 1).tolist() for g in groups.groups],
        "weights": np.asarray(groups.weights).tolist(),
    }
    if groups.variant == "sparse":
        doc["l1_weight"] = groups.l1_weight
    if groups.variant == "overlapping":
        doc["ridge"] = groups.ridge
    return doc


@dataclass(frozen=True)
class RandomizationConfig:
    """Gaussian randomization: isotropic tau2 * I or an explicit PD covariance."""

    tau2: float | None = None
    cov: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.tau2 is None) == (self.cov is None):
            raise ConfigError("give exactly one of tau2 or an explicit covariance")
        if self.tau2 is not None and self.tau2 <= 0:
            raise ConfigError("tau2 must be positive (the covariance must be PD)")
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ConfigError("covariance must be square")
            if np.max(np.abs(cov - cov.T)) > 1e-10:
                raise ConfigError("covariance must be symmetric")
            object.__setattr__(self, "cov", cov)

    def covariance(self, dim: int) -> np.ndarray:
        if self.tau2 is not None:
            return self.tau2 * np.eye(dim)
        if self.cov.shape[0] != dim:
            raise ConfigError(
                f"covariance is {self.cov.shape[0]}x{self.cov.shape[0]} but dimension is {dim}")
        return self.cov


def draw_randomization(config: RandomizationConfig, dim: int) -> np.ndarray:
    """Draw omega ~ N(0, Omega), deterministic given config.seed.

    Uses the lower-Cholesky convention: the draw equals L @ z for z the
    standard-normal stream of the seed, so an isotropic draw is tau * z.
    """
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal(dim)
    if config.tau2 is not None:
        return np.sqrt(config.tau2) * z
    cov = config.covariance(dim)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("randomization covariance is not positive definite") from exc
    return chol @ z


def effective_sigma(dataset: Dataset, model_cols: np.ndarray | None = None) -> float:
    """Resolve the noise sd: pass through a known sigma, else a plug-in estimate.

    The estimate is the residual sd of OLS on the full design when n > p + 1,
    otherwise on the selected model (model_cols required in that case).
    """
    if not isinstance(dataset.sigma, str):
        return float(dataset.sigma)
    n, p = dataset.n, dataset.p
    if n > p + 1:
        cols = np.arange(p)
    else:
        if model_cols is None:
            raise ConfigError("sigma='estimate' with n <= p + 1 needs a selected model")
        cols = np.asarray(model_cols, dtype=int)
    Xc = dataset.X[:, cols]
    beta, *_ = np.linalg.lstsq(Xc, dataset.y, rcond=None)
    resid = dataset.y - Xc @ beta
    dof = n - len(cols)
    if dof < 1:
        raise NumericalError("no residual degrees of freedom for the sigma estimate")
    return float(np.sqrt(resid @ resid / dof))


@dataclass(frozen=True)
class SelectionRecord:
    """Frozen selection outcome of one randomized solve.

    Directions, sizes, and subgradients live in the solve space (theta
    coordinates for standardized, augmented columns for overlapping, support
    restricted for sparse); model_cols index the original design columns of
    the selected model the downstream posterior targets.
    """

    variant: str
    active_groups: tuple          # selected group ids (0-based into GroupStructure)
    model_cols: np.ndarray        # original columns of the selected model
    solve_cols: np.ndarray        # selected columns in the solve space
    gamma: np.ndarray             # block size per active group, > 0
    unit_blocks: tuple            # unit direction per active group
    inactive_sub: dict            # group id -> ball subgradient, ||z|| < 1
    beta_hat: np.ndarray          # refit OLS on model_cols
    resid_stat: np.ndarray        # ancillary projection, solve-space length
    model_cov: np.ndarray         # sigma^2 (X_E^T X_E)^{-1}
    sigma: float
    omega: np.ndarray
    kkt_residual: float
    l1_signs: np.ndarray | None = None      # sparse only: full-length l1 subgradient
    within_support: dict = field(default_factory=dict)  # sparse: group id -> positions kept

    def __post_init__(self):
        for name in ("model_cols", "solve_cols", "gamma", "beta_hat", "resid_stat", "omega"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        if len(self.active_groups) == 0:
            raise EmptySelectionError("selection record with no active groups")
        if np.any(self.gamma <= 0):
            raise NumericalError("nonpositive block size in selection record")
        for u in self.unit_blocks:
            if abs(np.linalg.norm(u) - 1.0) > 1e-12:
                raise NumericalError("active direction is not a unit vector")
        for gid, z in self.inactive_sub.items():
            if np.linalg.norm(z) >= 1.0:
                raise NumericalError(f"inactive subgradient of group {gid} is not interior")

    @property
    def n_active(self) -> int:
        return len(self.active_groups)

    def group_model_cols(self, groups: GroupStructure, gid: int) -> np.ndarray:
        """Original-space columns the selected group contributes to the model."""
        if gid not in self.active_groups:
            raise ConfigError(f"group {gid + 1} was not selected")
        cols = np.asarray(groups.groups[gid])
        if self.variant == "sparse":
            cols = cols[np.asarray(self.within_support[gid], dtype=int)]
        return cols


def record_to_dict(record: SelectionRecord) -> dict:
    """JSON-ready form of a selection record (indices 1-based on disk)."""
    return {
        "variant": record.variant,
        "active_groups": [g + 1 for g in record.active_groups],
        "model_cols": (record.model_cols + 1).tolist(),
        "solve_cols": (record.solve_cols + 1).tolist(),
        "gamma": record.gamma.tolist(),
        "unit_blocks": [np.asarray(u).tolist() for u in record.unit_blocks],
        "inactive_sub": {str(g + 1): np.asarray(z).tolist()
                         for g, z in record.inactive_sub.items()},
        "beta_hat": record.beta_hat.tolist(),
        "resid_stat": record.resid_stat.tolist(),
        "model_cov": record.model_cov.tolist(),
        "sigma": record.sigma,
        "omega": record.omega.tolist(),
        "kkt_residual": record.kkt_residual,
        "l1_signs": None if record.l1_signs is None else record.l1_signs.tolist(),
        "within_support": {str(g + 1): np.asarray(v).tolist()
                           for g, v in record.within_support.items()},
    }


def record_from_dict(doc: dict) -> SelectionRecord:
    l1 = doc.get("l1_signs")
    return SelectionRecord(
        variant=doc["variant"],
        active_groups=tuple(int(g) - 1 for g in doc["active_groups"]),
        model_cols=np.asarray(doc["model_cols"], dtype=int) - 1,
        solve_cols=np.asarray(doc["solve_cols"], dtype=int) - 1,
        gamma=np.asarray(doc["gamma"], dtype=float),
        unit_blocks=tuple(np.asarray(u, dtype=float) for u in doc["unit_blocks"]),
        inactive_sub={int(g) - 1: np.asarray(z, dtype=float)
                      for g, z in doc["inactive_sub"].items()},
        beta_hat=np.asarray(doc["beta_hat"], dtype=float),
        resid_stat=np.asarray(doc["resid_stat"], dtype=float),
        model_cov=np.asarray(doc["model_cov"], dtype=float),
        sigma=float(doc["sigma"]),
        omega=np.asarray(doc["omega"], dtype=float),
        kkt_residual=float(doc["kkt_residual"]),
        l1_signs=None if l1 is None else np.asarray(l1, dtype=float),
        within_support={int(g) - 1: np.asarray(v, dtype=int)
                        for g, v in doc.get("within_support", {}).items()},
    )
