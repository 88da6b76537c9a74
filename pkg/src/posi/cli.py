"""Command line: fit the randomized selection, run posterior inference,
drive the simulation harness, and run the oracle cross-checks.

Exit codes: 0 success, 2 empty selection, 3 numerical failure, 4 bad config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adjust import build_adjustment
from .groupsolve import SolveOptions, freeze_selection, solve
from .model import (
    ConfigError,
    EmptySelectionError,
    GroupStructure,
    NumericalError,
    RandomizationConfig,
    draw_randomization,
    groups_from_dict,
    groups_to_dict,
    load_dataset,
    parse_groups,
    record_from_dict,
    record_to_dict,
)
from .posterior import GaussianPrior, PosteriorSpec
from .report import render_figures
from .sampler import (
    ChainConfig,
    IntervalReport,
    credible_intervals,
    functional_intervals,
    run_chain,
    write_chain_csv,
)
from .simlab import ScenarioConfig, run_experiment

EXIT_OK = 0
EXIT_EMPTY = 2
EXIT_NUMERICAL = 3
EXIT_CONFIG = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def make_manifest(command: str, params: dict) -> dict:
    body = {
        "command": command,
        "params": params,
        "versions": {"posi": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    digest = hashlib.sha256(
        json.dumps(body, sort_keys=True).encode()).hexdigest()
    body["digest"] = digest
    body["created"] = datetime.now(timezone.utc).isoformat()  # excluded from digest
    return body


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _sigma_arg(text):
    if text == "estimate":
        return "estimate"
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError("--sigma takes a positive number or 'estimate'") from exc


def cmd_fit(args) -> int:
    sigma = _sigma_arg(args.sigma)
    dataset = load_dataset(args.x, args.y, standardize=args.standardize, sigma=sigma)
    groups = parse_groups(args.groups, dataset.p)
    if args.variant is not None and args.variant != groups.variant:
        raise ConfigError(
            f"--variant {args.variant} contradicts the group file ({groups.variant})")
    dim = dataset.p if groups.variant != "overlapping" \
        else int(sum(len(g) for g in groups.groups))
    if args.omega is not None:
        cov = np.loadtxt(args.omega, delimiter=",", ndmin=2)
        rand = RandomizationConfig(cov=cov, seed=args.seed)
    else:
        if args.tau2 is None:
            raise ConfigError("give --tau2 or --omega (covariance CSV)")
        rand = RandomizationConfig(tau2=args.tau2, seed=args.seed)
    omega = draw_randomization(rand, dim)
    opts = SolveOptions(tol=args.tol, max_iters=args.max_iters)
    solution = solve(dataset, groups, omega, opts)
    record = freeze_selection(dataset, groups, omega, solution, opts)

    params = {
        "x": str(args.x), "y": str(args.y), "groups": str(args.groups),
        "standardize": bool(args.standardize), "sigma": sigma,
        "tau2": args.tau2, "omega_cov": args.omega, "seed": args.seed,
        "tol": args.tol, "max_iters": args.max_iters, "out": str(args.out),
    }
    doc = {
        "manifest": make_manifest("fit", params),
        "inputs": {
            "x_path": str(args.x), "y_path": str(args.y),
            "x_sha256": _sha256(args.x), "y_sha256": _sha256(args.y),
            "standardize": bool(args.standardize), "sigma": sigma,
            "groups": groups_to_dict(groups),
        },
        "randomization": {
            "tau2": args.tau2, "cov_path": args.omega,
            "cov_sha256": None if args.omega is None else _sha256(args.omega),
            "seed": args.seed,
        },
        "selection": record_to_dict(record),
    }
    _write_json(args.out, doc)
    print(f"selected groups {[g + 1 for g in record.active_groups]} "
          f"({len(record.model_cols)} coefficients), "
          f"KKT residual {record.kkt_residual:.2e} -> {args.out}")
    return EXIT_OK


def _parse_functional(text):
    try:
        name, rest = text.split(":")
        key, val = rest.split("=")
        if key != "group":
            raise ValueError
        return name, int(val) - 1
    except ValueError as exc:
        raise ConfigError(
            f"functional request must look like 'mean:group=1', got {text!r}") from exc


def cmd_infer(args) -> int:
    with open(args.selection) as fh:
        doc = json.load(fh)
    inputs = doc["inputs"]
    for path_key, sha_key in (("x_path", "x_sha256"), ("y_path", "y_sha256")):
        path = inputs[path_key]
        if not Path(path).exists():
            raise ConfigError(f"input file {path} from the selection record is missing")
        if _sha256(path) != inputs[sha_key]:
            raise ConfigError(
                f"digest mismatch for {path}: the selection record is stale")
    dataset = load_dataset(inputs["x_path"], inputs["y_path"],
                           standardize=inputs["standardize"], sigma=inputs["sigma"])
    groups = groups_from_dict(inputs["groups"], dataset.p)
    record = record_from_dict(doc["selection"])
    rand = doc["randomization"]
    dim = len(record.omega)
    if rand["tau2"] is not None:
        noise_cov = rand["tau2"] * np.eye(dim)
    else:
        noise_cov = np.loadtxt(rand["cov_path"], delimiter=",", ndmin=2)
    params = build_adjustment(dataset, groups, record, noise_cov)

    prior = None
    if args.prior == "gaussian":
        prior = GaussianPrior(mean=np.zeros(len(record.beta_hat)),
                              cov=args.prior_scale * np.eye(len(record.beta_hat)))
    spec = PosteriorSpec(params=params, beta_hat=record.beta_hat, prior=prior)

    levels = []
    for tok in args.levels.split(","):
        level = float(tok)
        if not (0.0 < level < 1.0):
            raise ConfigError(f"levels must lie in (0, 1), got {tok}")
        levels.append(level)
    requests = [_parse_functional(tok) for tok in (args.functional or [])]
    for name, gid in requests:
        if gid not in record.active_groups:
            raise ConfigError(f"functional on unselected group {gid + 1}")

    seed = args.seed if args.seed is not None else rand["seed"] + 1
    cfg = ChainConfig(draws=args.draws, burn_in=args.burnin, eta=args.eta, seed=seed)
    chain = run_chain(spec, cfg, record=record, groups=groups)
    report = IntervalReport()
    for level in levels:
        report.extend(credible_intervals(chain, level))
        for name, gid in requests:
            report.rows.append(functional_intervals(chain, name, gid, level))
    report.write_csv(args.out)
    chain_out = args.chain_out or str(Path(args.out).with_suffix("")) + "_chain.csv"
    write_chain_csv(chain, chain_out)
    params_doc = {
        "selection": str(args.selection), "levels": args.levels,
        "draws": args.draws, "burnin": args.burnin, "eta": args.eta,
        "seed": seed, "prior": args.prior, "prior_scale": args.prior_scale,
        "functional": list(args.functional or []),
        "out": str(args.out), "chain_out": str(chain_out),
    }
    _write_json(str(args.out) + ".manifest.json", make_manifest("infer", params_doc))
    print(f"wrote {len(report.rows)} intervals -> {args.out}; chain -> {chain_out}")
    return EXIT_OK


def _load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            doc = json.load(fh)
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    else:
        raise ConfigError("scenario config must be a .toml or .json file")
    allowed = set(ScenarioConfig.__dataclass_fields__)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")
    return ScenarioConfig(**doc)


def cmd_simulate(args) -> int:
    config = _load_scenario(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics, summary = run_experiment(config, jobs=args.jobs,
                                      selection_only=args.selection_only)
    metrics.to_csv(out_dir / "metrics.csv", index=False)
    summary.to_csv(out_dir / "summary.csv", index=False)
    written = []
    if not args.no_figures and not args.selection_only:
        written = render_figures(metrics, out_dir, level=config.level)
    params = {"config": str(args.config), "jobs": args.jobs,
              "selection_only": bool(args.selection_only),
              "no_figures": bool(args.no_figures),
              "scenario": {k: getattr(config, k)
                           for k in ScenarioConfig.__dataclass_fields__},
              "out_dir": str(out_dir)}
    _write_json(out_dir / "manifest.json", make_manifest("simulate", params))
    print(f"wrote {len(metrics)} metric rows -> {out_dir / 'metrics.csv'}")
    for path in written:
        print(f"figure -> {path}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    from .oracles import run_oracles

    results = run_oracles(only=args.only)
    if not results:
        raise ConfigError(f"no oracle matches {args.only!r}")
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  measured={r.measured:11.4e}  "
              f"tol={r.tolerance:8.1e}  {flag}  ({r.detail})")
        failed += not r.passed
    if args.out:
        _write_json(args.out, {
            "manifest": make_manifest("oracle-check", {"only": args.only}),
            "results": [{"name": r.name, "measured": float(r.measured),
                         "tolerance": float(r.tolerance), "passed": bool(r.passed),
                         "detail": r.detail} for r in results],
        })
    if failed:
        print(f"{failed} oracle(s) FAILED")
        return EXIT_NUMERICAL
    print(f"all {len(results)} oracles passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="posi",
        description="Bayesian inference after randomized group-sparse selection")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="solve the randomized selection problem")
    fit.add_argument("--x", required=True, help="design matrix CSV (headerless)")
    fit.add_argument("--y", required=True, help="response CSV (headerless)")
    fit.add_argument("--groups", required=True, help="group specification JSON")
    fit.add_argument("--tau2", type=float, default=None,
                     help="isotropic randomization variance")
    fit.add_argument("--omega", default=None,
                     help="explicit randomization covariance CSV")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--variant", default=None,
                     choices=["disjoint", "overlapping", "standardized", "sparse"])
    fit.add_argument("--standardize", action="store_true")
    fit.add_argument("--sigma", default="estimate")
    fit.add_argument("--tol", type=float, default=1e-8)
    fit.add_argument("--max-iters", type=int, default=10000)
    fit.add_argument("--out", required=True)
    fit.set_defaults(func=cmd_fit)

    infer = sub.add_parser("infer", help="sample the surrogate posterior")
    infer.add_argument("--selection", required=True)
    infer.add_argument("--levels", default="0.9")
    infer.add_argument("--draws", type=int, default=1500)
    infer.add_argument("--burnin", type=int, default=100)
    infer.add_argument("--eta", type=float, default=1.0)
    infer.add_argument("--seed", type=int, default=None,
                       help="chain seed (default: fit seed + 1)")
    infer.add_argument("--prior", choices=["flat", "gaussian"], default="flat")
    infer.add_argument("--prior-scale", type=float, default=100.0)
    infer.add_argument("--functional", action="append",
                       help="e.g. mean:group=1 (repeatable)")
    infer.add_argument("--out", required=True)
    infer.add_argument("--chain-out", default=None)
    infer.set_defaults(func=cmd_infer)

    sim = sub.add_parser("simulate", help="run a replicated scenario")
    sim.add_argument("--config", required=True, help="scenario TOML/JSON")
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--no-figures", action="store_true")
    sim.add_argument("--selection-only", action="store_true",
                     help="skip interval machinery; selection metrics only")
    sim.set_defaults(func=cmd_simulate)

    check = sub.add_parser("oracle-check", help="run the numeric cross-checks")
    check.add_argument("--only", default=None, help="name prefix filter")
    check.add_argument("--out", default=None, help="optional JSON report path")
    check.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EmptySelectionError as exc:
        print(f"empty selection: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
