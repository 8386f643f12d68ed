"""Experiment runner: declarative configs in, figure/table source data out.

A run config is a single JSON document (strict: unknown keys are rejected
with their path) describing the marginal law, the test-function basis, the
cost regularization, the particle count and weight mode, the initialization
method and the optimizer parameters. ``mcot run`` executes one config and
writes an artifact directory; ``mcot suite`` executes a list of configs and
aggregates one CSV row per run; ``mcot oracle1d`` prints the exact 1D
transport cost; ``mcot path-check`` verifies a cost-monotone feasible path
between two saved particle states.

No plots are produced: every artifact is figure source data (CSV) or a JSON
record, with stable versioned headers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .basis import TestBasis, hyperbolic_cross_basis, legendre_basis, mean_covariance_basis
from .initialization import NnlsError, ZeroFlowFieldError, make_feasible_system
from .langevin import LangevinParams, StallError, run
from .measures import Density1D, GaussianMixture, MarginalLaw, UniformBall
from .model import (
    ConstraintSystem,
    CoulombCost,
    ParticleSystem,
    SystemShape,
    load_particle_snapshot,
    save_particle_snapshot,
    weight_function_from_name,
)
from .oracle1d import build_map, optimal_cost, plan_support
from .projection import SingularGramError
from .theory import WeightedAtomSet, monotone_path

__all__ = ["ConfigError", "load_config", "run_experiment", "run_suite", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INIT = 3
EXIT_STALL = 4
EXIT_SINGULAR = 5

_OUTPUT_ROOT_ENV = "MCOT_OUTPUT_ROOT"
_MAX_PAIR_ROWS = 5_000_000


class ConfigError(ValueError):
    """A config file failed validation; the message names the offending field."""


# ---------------------------------------------------------------------------
# Config parsing and validation
# ---------------------------------------------------------------------------


def _check_keys(block: dict, allowed: set[str], required: set[str], path: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")
    missing = required - set(block)
    if missing:
        raise ConfigError(f"{path}: missing required key(s) {sorted(missing)}")


def build_law(block: dict, path: str = "law") -> MarginalLaw:
    _check_keys(
        block,
        {"kind", "support", "poly_coeffs", "cosine_terms", "weights", "means",
         "covariances", "mean", "cov", "center", "radius"},
        {"kind"},
        path,
    )
    kind = block["kind"]
    try:
        if kind == "uniform":
            support = block.get("support", [-1.0, 1.0])
            return Density1D.uniform(*support)
        if kind == "density1d":
            return Density1D(
                support=tuple(block["support"]),
                poly_coeffs=tuple(block.get("poly_coeffs", (0.0,))),
                cosine_terms=tuple(tuple(t) for t in block.get("cosine_terms", ())),
            )
        if kind == "gaussian":
            mean = block.get("mean", [0.0, 0.0, 0.0])
            cov = block.get("cov")
            if cov is None:
                cov = np.eye(len(mean)).tolist()
            return GaussianMixture(weights=(1.0,), means=(tuple(mean),),
                                   covariances=(tuple(tuple(r) for r in cov),))
        if kind == "gaussian_mixture":
            return GaussianMixture(
                weights=tuple(block["weights"]),
                means=tuple(tuple(m) for m in block["means"]),
                covariances=tuple(tuple(tuple(r) for r in c) for c in block["covariances"]),
            )
        if kind == "uniform_ball":
            return UniformBall(center=tuple(block.get("center", (0.0, 0.0, 0.0))),
                               radius=float(block.get("radius", 1.0)))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.kind: unknown law kind {kind!r}")


def build_basis(law: MarginalLaw, block: dict, path: str = "basis") -> TestBasis:
    _check_keys(block, {"type", "N", "plain_norms"}, {"type"}, path)
    btype = block["type"]
    try:
        if btype == "legendre":
            return legendre_basis(law, int(block["N"]))
        if btype == "hyperbolic":
            return hyperbolic_cross_basis(
                law, int(block["N"]), scaled_norms=not block.get("plain_norms", False)
            )
        if btype == "meancov":
            if "N" in block and int(block["N"]) != 9:
                raise ConfigError(f"{path}.N: the mean-covariance basis always has N = 9")
            return mean_covariance_basis(law)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}.type: unknown basis type {btype!r}")


_TOP_KEYS = {"label", "law", "basis", "cost", "mode", "particles", "init",
             "langevin", "seed", "output"}
_MODE_KEYS = {"weights", "weight_function"}
_INIT_KEYS = {"method", "k_inf", "jitter", "tol", "max_iters", "h0"}
_LANGEVIN_KEYS = {"dt0", "beta0", "tau0", "i_const", "i_max", "n_max", "noise_schedule",
                  "projection_tol", "consistent_noise", "dt_max", "theta_bound", "snapshots",
                  "tau_growth"}
_OUTPUT_KEYS = {"dir", "dump_basis", "pair_grid", "max_pair_rows"}


def validate_config(config: dict) -> dict:
    """Validate the full run config; returns it unchanged on success."""
    _check_keys(config, _TOP_KEYS, {"law", "basis", "cost", "particles", "seed"}, "config")
    build_basis(build_law(config["law"]), config["basis"])
    _check_keys(config["cost"], {"epsilon"}, {"epsilon"}, "cost")
    _check_keys(config["particles"], {"K", "M"}, {"K", "M"}, "particles")
    mode = config.get("mode", {"weights": "fixed"})
    _check_keys(mode, _MODE_KEYS, {"weights"}, "mode")
    if mode["weights"] not in ("fixed", "adaptive"):
        raise ConfigError("mode.weights: must be 'fixed' or 'adaptive'")
    if mode["weights"] == "adaptive":
        weight_function_from_name(mode.get("weight_function", "squared"))
    _check_keys(config.get("init", {}), _INIT_KEYS, set(), "init")
    _check_keys(config.get("langevin", {}), _LANGEVIN_KEYS, set(), "langevin")
    _check_keys(config.get("output", {}), _OUTPUT_KEYS, set(), "output")
    if int(config["particles"]["K"]) < 1 or int(config["particles"]["M"]) < 2:
        raise ConfigError("particles: need K >= 1 and M >= 2")
    return config


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return validate_config(config)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _write_pair_couplings(out_dir: Path, sys: ParticleSystem, max_rows: int) -> None:
    K, M, d = sys.K, sys.M, sys.d
    weights = sys.weights
    pair_weight_scale = 1.0 / (M * (M - 1))
    n_rows = K * M * (M - 1)
    stride = max(1, -(-n_rows // max_rows))  # ceil division
    coords = [f"x_{i + 1}" for i in range(d)]
    coords_p = [f"xp_{i + 1}" for i in range(d)]
    with (out_dir / "pair_coupling.csv").open("w", newline="") as fp, (
        out_dir / "radial_coupling.csv"
    ).open("w", newline="") as fr:
        wp = csv.writer(fp)
        wr = csv.writer(fr)
        wp.writerow(["k", "m", "mp", *coords, *coords_p, "weight"])
        wr.writerow(["k", "m", "mp", "r", "rp", "weight"])
        for k in range(0, K, stride):
            x = sys.positions[k]
            radii = np.linalg.norm(x, axis=1)
            w = weights[k] * pair_weight_scale
            for m in range(M):
                for mp in range(M):
                    if m == mp:
                        continue
                    wp.writerow([k, m, mp, *(repr(float(v)) for v in x[m]),
                                 *(repr(float(v)) for v in x[mp]), repr(float(w))])
                    wr.writerow([k, m, mp, repr(float(radii[m])), repr(float(radii[mp])), repr(float(w))])


def _write_transport_map(out_dir: Path, law: Density1D, marginals: int, grid: int) -> float:
    transport = build_map(law, marginals)
    orbits = plan_support(transport, grid)
    with (out_dir / "transport_map.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x"] + [f"T{i}" for i in range(1, marginals)])
        for row in orbits:
            writer.writerow([repr(float(v)) for v in row])
    return 0.0


def _write_basis_dump(out_dir: Path, basis: TestBasis) -> None:
    rows = basis.coefficient_rows()
    with (out_dir / "basis.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["index", "label", "target_moment", "coefficients"])
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


def _resolve_output_dir(config: dict, output_root: str | None, default_name: str) -> Path:
    root = output_root or os.environ.get(_OUTPUT_ROOT_ENV) or "."
    sub = config.get("output", {}).get("dir", default_name)
    out = Path(root) / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_experiment(
    config: dict,
    output_root: str | None = None,
    seed_override: int | None = None,
) -> tuple[int, Path, dict]:
    """Run one experiment; returns (exit code, artifact directory, summary)."""
    validate_config(config)
    seed = int(seed_override if seed_override is not None else config["seed"])
    label = config.get("label", "run")
    out_dir = _resolve_output_dir(config, output_root, label)

    law = build_law(config["law"])
    basis = build_basis(law, config["basis"])
    epsilon = float(config["cost"]["epsilon"])
    cost = CoulombCost(epsilon)
    K = int(config["particles"]["K"])
    M = int(config["particles"]["M"])
    mode = config.get("mode", {"weights": "fixed"})
    weight_function = (
        weight_function_from_name(mode.get("weight_function", "squared"))
        if mode["weights"] == "adaptive"
        else None
    )
    shape = SystemShape(K, M, law.dimension, weight_function)
    csys = ConstraintSystem(basis, shape)

    init_cfg = dict(config.get("init", {}))
    lang_cfg = dict(config.get("langevin", {}))
    out_cfg = dict(config.get("output", {}))
    dt0_default = 1e-3 if law.dimension == 1 else 1e-4
    params = LangevinParams(
        dt0=float(lang_cfg.get("dt0", dt0_default)),
        beta0=float(lang_cfg.get("beta0", 0.0)),
        tau0=float(lang_cfg.get("tau0", 1e-4)),
        i_const=int(lang_cfg.get("i_const", 5)),
        i_max=int(lang_cfg.get("i_max", 50)),
        n_max=int(lang_cfg.get("n_max", 20000)),
        noise_schedule=lang_cfg.get("noise_schedule", "constant"),
        seed=seed,
        projection_tol=float(lang_cfg.get("projection_tol", 1e-12)),
        consistent_noise=bool(lang_cfg.get("consistent_noise", False)),
        dt_max=float(lang_cfg.get("dt_max", np.inf)),
        theta_bound=float(lang_cfg.get("theta_bound", np.inf)),
        snapshot_iterations=tuple(lang_cfg.get("snapshots", ())),
        tau_growth=lang_cfg.get("tau_growth", "hold"),
    )

    echo = {"version": __version__, "seed_used": seed, "config": config}
    (out_dir / "config_echo.json").write_text(json.dumps(echo, indent=2, default=str))
    if out_cfg.get("dump_basis", False):
        _write_basis_dump(out_dir, basis)

    started = time.perf_counter()
    summary: dict = {"version": __version__, "label": label, "seed_used": seed}
    try:
        system, report = make_feasible_system(
            law,
            csys,
            seed=seed,
            method=init_cfg.get("method", "rk3"),
            k_inf=init_cfg.get("k_inf"),
            jitter=init_cfg.get("jitter"),
            tol=float(init_cfg.get("tol", 1e-12)),
            max_iters=int(init_cfg.get("max_iters", 20000)),
            h0=float(init_cfg.get("h0", 0.1)),
        )
        init_report = {
            "converged": report.converged,
            "iterations": report.iterations,
            "final_residual_inf": report.final_residual_inf,
            "support_size": report.support_size,
            "method": init_cfg.get("method", "rk3"),
        }
        (out_dir / "init_report.json").write_text(json.dumps(init_report, indent=2))
        summary["init"] = init_report
        if not report.converged:
            summary["status"] = "init_not_converged"
            _finish_summary(out_dir, summary, started)
            return EXIT_INIT, out_dir, summary

        best, log = run(system, csys, cost, params)
        log.to_csv(out_dir / "runlog.csv")
        save_particle_snapshot(
            out_dir / "best_state.csv", best, seed=seed, iteration=log.best_iteration
        )
        for n, state in log.snapshots.items():
            save_particle_snapshot(
                out_dir / f"snapshot_{n:06d}.csv",
                ParticleSystem.from_flat(state, shape),
                seed=seed,
                iteration=n,
            )
        _write_pair_couplings(
            out_dir, best, int(out_cfg.get("max_pair_rows", _MAX_PAIR_ROWS))
        )

        accepted = log.accepted_records()
        summary.update(
            {
                "status": "ok",
                "best_cost": log.best_cost,
                "best_iteration": log.best_iteration,
                "accepted_iterations": log.accepted_iterations,
                "final_cost": accepted[-1].cost,
                "final_constraint_inf": accepted[-1].constraint_inf,
                "theta_max": max(r.theta for r in accepted),
                "theta_bound_exceeded": any(r.theta_exceeded for r in accepted),
            }
        )
        if law.dimension == 1 and isinstance(law, Density1D):
            transport = build_map(law, M)
            oracle = optimal_cost(transport, epsilon)
            _write_transport_map(out_dir, law, M, int(out_cfg.get("pair_grid", 512)))
            summary["oracle"] = {
                "cost": oracle,
                "epsilon": epsilon,
                "relative_gap": (log.best_cost - oracle) / oracle,
            }
        else:
            summary["oracle"] = None
        _finish_summary(out_dir, summary, started)
        return EXIT_OK, out_dir, summary
    except (ZeroFlowFieldError, NnlsError) as exc:
        summary.update({"status": "init_failed", "error": str(exc)})
        _finish_summary(out_dir, summary, started)
        return EXIT_INIT, out_dir, summary
    except StallError as exc:
        summary.update({"status": "stalled", "error": str(exc)})
        _finish_summary(out_dir, summary, started)
        return EXIT_STALL, out_dir, summary
    except SingularGramError as exc:
        summary.update({"status": "singular_gram", "error": str(exc)})
        _finish_summary(out_dir, summary, started)
        return EXIT_SINGULAR, out_dir, summary


def _finish_summary(out_dir: Path, summary: dict, started: float) -> None:
    summary["wall_time_s"] = time.perf_counter() - started
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=str))


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

_SUITE_HEADER = [
    "label",
    "status",
    "law_kind",
    "dimension",
    "M",
    "N",
    "K",
    "mode",
    "beta0",
    "noise_schedule",
    "best_cost",
    "oracle_cost",
    "oracle_gap",
    "wall_time_s",
    "exit_code",
    "output_dir",
]


def _suite_row(config: dict, code: int, out_dir: Path, summary: dict) -> list:
    law = config["law"]
    basis = config["basis"]
    oracle = summary.get("oracle") or {}
    dimension = 1 if law["kind"] in ("uniform", "density1d") else 3
    n_value = basis.get("N", 9 if basis["type"] == "meancov" else None)
    return [
        summary.get("label", "run"),
        summary.get("status", "failed"),
        law["kind"],
        dimension,
        config["particles"]["M"],
        n_value,
        config["particles"]["K"],
        config.get("mode", {}).get("weights", "fixed"),
        config.get("langevin", {}).get("beta0", 0.0),
        config.get("langevin", {}).get("noise_schedule", "constant"),
        summary.get("best_cost"),
        oracle.get("cost"),
        oracle.get("relative_gap"),
        summary.get("wall_time_s"),
        code,
        str(out_dir),
    ]


def _run_suite_entry(args: tuple[dict, str | None, int | None]):
    config, output_root, seed = args
    try:
        code, out_dir, summary = run_experiment(config, output_root, seed)
    except ConfigError as exc:
        return config, EXIT_CONFIG, Path("."), {"status": "config_error", "error": str(exc)}
    return config, code, out_dir, summary


def run_suite(
    suite_config: dict,
    suite_dir: Path,
    output_root: str | None = None,
    seed_override: int | None = None,
) -> tuple[int, Path]:
    """Run every experiment in a suite; failed runs are marked, not fatal."""
    _check_keys(suite_config, {"label", "output_root", "workers", "runs"}, {"runs"}, "suite")
    root = output_root or suite_config.get("output_root") or os.environ.get(_OUTPUT_ROOT_ENV) or "."
    configs = []
    for i, entry in enumerate(suite_config["runs"]):
        if isinstance(entry, str):
            config = load_config((suite_dir / entry) if not Path(entry).is_absolute() else entry)
        else:
            config = validate_config(entry)
        config.setdefault("label", f"run_{i:03d}")
        configs.append(config)

    workers = int(suite_config.get("workers", 1))
    jobs = [(c, root, seed_override) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_suite_entry, jobs))
    else:
        results = [_run_suite_entry(job) for job in jobs]

    out = Path(root) / f"{suite_config.get('label', 'suite')}_results.csv"
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUITE_HEADER)
        for config, code, out_dir, summary in results:
            writer.writerow(_suite_row(config, code, out_dir, summary))
    worst = max((code for _, code, _, _ in results), default=0)
    return worst, out


# ---------------------------------------------------------------------------
# Path check
# ---------------------------------------------------------------------------


def path_check(
    state_a: Path, state_b: Path, config: dict, out_path: Path
) -> tuple[bool, dict]:
    """Verify a feasible cost-monotone path between two saved states."""
    sys_a = load_particle_snapshot(state_a)
    sys_b = load_particle_snapshot(state_b)
    law = build_law(config["law"])
    basis = build_basis(law, config["basis"])
    cost = CoulombCost(float(config["cost"]["epsilon"]))
    shape = SystemShape(sys_a.K, sys_a.M, law.dimension)
    csys = ConstraintSystem(basis, shape)
    path = monotone_path(
        (sys_a.weights, sys_a.positions), (sys_b.weights, sys_b.positions), csys, cost
    )
    ts = np.union1d(np.linspace(0.0, 1.0, 101), [bp.t for bp in path.breakpoints])
    rows = []
    worst_gamma = 0.0
    costs = []
    for t in ts:
        weights, positions = path.evaluate(float(t))
        aset = WeightedAtomSet.from_particles(weights, positions, csys, cost)
        vec = aset.functional_vector()
        n = basis.size
        gamma_inf = float(
            max(np.abs(vec[:n] - basis.target_moments).max(), abs(vec[n] - 1.0))
        )
        worst_gamma = max(worst_gamma, gamma_inf)
        costs.append(vec[n + 1])
        rows.append((float(t), vec[n + 1], gamma_inf))
    diffs = np.diff(costs)
    monotone = bool((diffs <= 1e-9).all() or (diffs >= -1e-9).all())
    feasible = worst_gamma <= 1e-9
    with out_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "cost", "gamma_inf"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    report = {
        "feasible": feasible,
        "monotone": monotone,
        "max_gamma_inf": worst_gamma,
        "cost_start": costs[0],
        "cost_end": costs[-1],
        "breakpoints": len(path.breakpoints),
    }
    return feasible and monotone, report


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", type=Path)
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--output-root", type=str, default=None)

    p_suite = sub.add_parser("suite", help="run a suite of experiment configs")
    p_suite.add_argument("config", type=Path)
    p_suite.add_argument("--seed", type=int, default=None)
    p_suite.add_argument("--output-root", type=str, default=None)

    p_oracle = sub.add_parser("oracle1d", help="exact 1D transport cost for a law")
    p_oracle.add_argument("law", type=Path, help="JSON file with a law block")
    p_oracle.add_argument("marginals", type=int)
    p_oracle.add_argument("epsilon", type=float)
    p_oracle.add_argument("--grid", type=int, default=0, help="also export orbit CSV on a grid")
    p_oracle.add_argument("--out", type=Path, default=None)

    p_path = sub.add_parser("path-check", help="verify a monotone path between two states")
    p_path.add_argument("state_a", type=Path)
    p_path.add_argument("state_b", type=Path)
    p_path.add_argument("config", type=Path)
    p_path.add_argument("--out", type=Path, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = load_config(args.config)
            code, out_dir, summary = run_experiment(config, args.output_root, args.seed)
            print(json.dumps({k: summary.get(k) for k in
                              ("status", "best_cost", "best_iteration", "wall_time_s")}))
            print(f"artifacts: {out_dir}")
            return code
        if args.command == "suite":
            suite_path = Path(args.config)
            try:
                suite_config = json.loads(suite_path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{suite_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
            code, table = run_suite(
                suite_config, suite_path.parent, args.output_root, args.seed
            )
            print(f"aggregate table: {table}")
            return code
        if args.command == "oracle1d":
            block = json.loads(Path(args.law).read_text())
            law_block = block.get("law", block)
            law = build_law(law_block)
            if not isinstance(law, Density1D):
                raise ConfigError("oracle1d requires a 1D density law")
            transport = build_map(law, args.marginals)
            record = {
                "M": args.marginals,
                "epsilon": args.epsilon,
                "oracle_cost": optimal_cost(transport, args.epsilon),
            }
            text = json.dumps(record, indent=2)
            if args.out:
                Path(args.out).write_text(text)
            print(text)
            if args.grid >= 2:
                orbits = plan_support(transport, args.grid)
                out = Path(args.out or "oracle1d.json").with_suffix(".csv")
                with out.open("w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["x"] + [f"T{i}" for i in range(1, args.marginals)])
                    for row in orbits:
                        writer.writerow([repr(float(v)) for v in row])
            return EXIT_OK
        if args.command == "path-check":
            config = load_config(args.config)
            out = args.out or Path("path_check.csv")
            ok, report = path_check(args.state_a, args.state_b, config, out)
            print(json.dumps(report, indent=2))
            return EXIT_OK if ok else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
