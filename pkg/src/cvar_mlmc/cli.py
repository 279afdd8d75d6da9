"""Command-line experiment runner.

Four studies (estimate / reliability / complexity / optimize) plus a
reference-builder, all driven by a JSON config and emitting CSV/JSON
artifacts.  Outputs are a pure function of (config, seed): rerunning with the
same inputs reproduces every file byte for byte, and ``--threads`` never
changes the numbers.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .controller import run_cmlmc
from .estimator import build_functionals, extract_var_cvar, pointwise_from_batches
from .models import LevelBatch
from .optimizer import OuuProblem, run, select_theta_interval
from .spline import SplineFunction, ThetaGrid, fit

# Replica tags reserved so auxiliary sampling never collides with the
# per-run / per-iteration streams used by the controller and optimizer.
REFERENCE_TAG = 2_000_000
PROBE_TAG = 3_000_000
CDF_TAG_BASE = 5_000_000

_FMT = repr  # full-precision, bit-stable float formatting for CSV cells


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_FMT(float(x)) if isinstance(x, (int, float, np.floating))
                             and not isinstance(x, bool) else str(x) for x in row])


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _single_level_batch(config: ExperimentConfig, z: np.ndarray, level: int,
                        n: int, replica_tag: int) -> LevelBatch:
    """Fine-only samples at one discretisation level, repackaged as level 0."""
    batch = config.model.sample_batch(z, level, config.seed, n, replica_tag)
    return LevelBatch(0, batch.q_fine, batch.grad_fine, batch.costs)


def _probe_interval(config: ExperimentConfig, n: int = 256) -> tuple[float, float]:
    # Probed at a moderately fine level: coarse-level quantiles are biased by
    # the discretisation, which can push the interval off the fine quantile.
    level = min(3, config.model.max_level)
    batch = config.model.sample_batch(config.z0, level, config.seed, n, PROBE_TAG)
    return select_theta_interval(batch.q_fine, config.tau)


def make_reference(config: ExperimentConfig, big_n: int | None = None,
                   big_level: int | None = None) -> dict:
    """Single-level large-N estimate of the tail functionals at z0.

    Sampling uses a reserved replica tag, so the streams are disjoint from
    every experiment run at the same master seed.
    """
    big_n = config.big_n if big_n is None else big_n
    big_level = config.big_level if big_level is None else big_level
    big_level = min(big_level, config.model.max_level)
    batch = _single_level_batch(config, config.z0, big_level, big_n, REFERENCE_TAG)
    lo, hi = select_theta_interval(batch.q_fine, config.tau)
    grid = ThetaGrid(lo, hi, 257)
    pw = pointwise_from_batches([batch], grid, config.tau)
    estimates = build_functionals(pw, grid, config.z0, [batch], config.tau)
    q_tau, c_tau = extract_var_cvar(estimates)
    theta = grid.points
    return {
        "model": config.model_name,
        "tau": config.tau,
        "z": list(map(float, config.z0)),
        "big_N": big_n,
        "big_level": big_level,
        "seed": config.seed,
        "interval": [lo, hi],
        "n": grid.n,
        "theta": theta.tolist(),
        "phi": pw.phi.tolist(),
        "psi": pw.psi.tolist(),
        "q_tau": q_tau,
        "c_tau": c_tau,
        "gradient": [float(s(q_tau, order=1)) for s in estimates.psi],
    }


def _reference_splines(ref: dict) -> tuple[ThetaGrid, SplineFunction, list[SplineFunction]]:
    lo, hi = ref["interval"]
    grid = ThetaGrid(float(lo), float(hi), int(ref["n"]))
    phi = fit(grid, np.asarray(ref["phi"]))
    psi_vals = np.asarray(ref["psi"])
    psi = [fit(grid, psi_vals[:, k]) for k in range(psi_vals.shape[1])]
    return grid, phi, psi


def _gradient_errors(estimates, ref: dict) -> tuple[float, float]:
    """True pointwise (at the run's minimiser) and sup-norm gradient errors.

    Both aggregate the targets (Phi', Psi'_k) in the same root-sum-of-squares
    sense as the reported MSE, evaluated against the reference functionals on
    the overlap of the two theta intervals.
    """
    ref_grid, ref_phi, ref_psi = _reference_splines(ref)
    lo = max(estimates.grid.theta_lo, ref_grid.theta_lo)
    hi = min(estimates.grid.theta_hi, ref_grid.theta_hi)
    if hi <= lo:
        raise RuntimeError("estimate and reference theta intervals do not overlap")
    theta_hat, _ = estimates.phi.argmin_on_interval()
    theta_hat = min(max(theta_hat, lo), hi)
    probe = np.linspace(lo, hi, 201)

    point_sq = 0.0
    sup_sq = 0.0
    pairs = [(estimates.phi, ref_phi)] + list(zip(estimates.psi, ref_psi))
    for est_fn, ref_fn in pairs:
        diff_point = float(est_fn(theta_hat, order=1)) - float(ref_fn(theta_hat, order=1))
        point_sq += diff_point ** 2
        diff = est_fn(probe, order=1) - ref_fn(probe, order=1)
        sup_sq += float(np.max(np.abs(diff))) ** 2
    return float(np.sqrt(point_sq)), float(np.sqrt(sup_sq))


def _require_tolerances(config: ExperimentConfig) -> list[float]:
    if not config.tolerances:
        raise ConfigError("$.experiment.tolerances",
                          "at least one tolerance is required for this experiment kind")
    return config.tolerances


def _run_estimate(config: ExperimentConfig, out: Path) -> None:
    tol = _require_tolerances(config)[0]
    lo, hi = _probe_interval(config)
    grid = ThetaGrid(lo, hi, config.n_init)
    result = run_cmlmc(config.model, config.z0, config.tau, tol, grid,
                       config.seed, replica_tag=0, config=config.controller)
    est = result.estimates
    theta = est.grid.points
    header = ["theta", "phi", "phi_prime"] + [
        f"psi_prime_{k + 1}" for k in range(len(est.psi))]
    rows = []
    for t in theta:
        row = [t, float(est.phi(t)), float(est.phi(t, order=1))]
        row += [float(s(t, order=1)) for s in est.psi]
        rows.append(row)
    _write_csv(out / "estimates.csv", header, rows)
    q_tau, c_tau = extract_var_cvar(est)
    _write_json(out / "errors.json", {
        "tolerance": tol,
        "errors": result.breakdown.to_dict(),
        "rmse": float(np.sqrt(result.breakdown.total_mse_sq)),
        "q_tau": q_tau,
        "c_tau": c_tau,
        "total_cost": result.total_cost,
        "hierarchy": {"L": result.hierarchy.L, "N_l": list(result.hierarchy.N_l),
                      "n": result.hierarchy.n},
    })
    _write_json(out / "hierarchy_log.json",
                {"rounds": [r.to_dict() for r in result.rounds]})


def _run_reliability(config: ExperimentConfig, out: Path) -> None:
    tolerances = _require_tolerances(config)
    if config.reference_path is None:
        raise ConfigError("$.experiment.reference",
                          "reliability needs a reference.json path")
    with open(config.reference_path) as fh:
        ref = json.load(fh)
    lo, hi = _probe_interval(config)
    rows = []
    for run_id in range(1, config.repeats + 1):
        for tol in tolerances:
            result = run_cmlmc(config.model, config.z0, config.tau, tol,
                               ThetaGrid(lo, hi, config.n_init), config.seed,
                               replica_tag=run_id, config=config.controller)
            est_rmse = float(np.sqrt(result.breakdown.total_mse_sq))
            point_err, sup_err = _gradient_errors(result.estimates, ref)
            rows.append([run_id, tol, est_rmse, point_err, sup_err])
    _write_csv(out / "reliability.csv",
               ["run", "tolerance", "estimated_rmse",
                "true_pointwise_error", "true_sup_error"], rows)


def _run_complexity(config: ExperimentConfig, out: Path) -> None:
    tolerances = _require_tolerances(config)
    lo, hi = _probe_interval(config)
    rows = []
    for run_id in range(1, config.repeats + 1):
        for tol in tolerances:
            result = run_cmlmc(config.model, config.z0, config.tau, tol,
                               ThetaGrid(lo, hi, config.n_init), config.seed,
                               replica_tag=run_id, config=config.controller)
            rows.append([run_id, tol, result.total_cost, result.hierarchy.L,
                         ";".join(str(n) for n in result.hierarchy.N_l)])
    _write_csv(out / "complexity.csv",
               ["run", "tolerance", "total_cost", "L", "N_l"], rows)


def _write_cdf(config: ExperimentConfig, out: Path, j: int, z: np.ndarray,
               q_tau: float, c_tau: float) -> None:
    level = min(4, config.model.max_level)
    batch = _single_level_batch(config, z, level, 2000, CDF_TAG_BASE + j)
    q = np.sort(batch.q_fine)
    cdf = np.arange(1, q.size + 1) / q.size
    rows = [[qi, ci, q_tau, c_tau] for qi, ci in zip(q, cdf)]
    _write_csv(out / f"cdf_{j}.csv", ["q", "cdf", "q_tau", "c_tau"], rows)


def _run_optimize(config: ExperimentConfig, out: Path) -> None:
    problem = OuuProblem(
        model=config.model, tau=config.tau, kappa=config.kappa,
        z_ref=config.z_ref, z0=config.z0, alpha=config.alpha, eta=config.eta,
        eps=config.eps, seed=config.seed, max_iters=config.max_iters,
        n_init=config.n_init, screen_hierarchy=config.screen_hierarchy,
        controller=config.controller,
    )
    result = run(problem)
    d = config.model.dim
    header = (["j"] + [f"z_{k + 1}" for k in range(d)]
              + ["theta", "objective", "q_tau", "c_tau", "residual",
                 "iteration_cost", "cumulative_cost"])
    rows = []
    for state in result.history:
        rows.append([state.j] + [float(v) for v in state.z]
                    + [state.theta, state.objective, state.q_tau, state.c_tau,
                       state.residual, state.iteration_cost, state.cumulative_cost])
        _write_json(out / f"hierarchy_{state.j}.json", {
            "j": state.j,
            "L": state.hierarchy.L,
            "N_l": list(state.hierarchy.N_l),
            "n": state.hierarchy.n,
            "interval": list(state.interval),
            "residual": state.residual,
            "iteration_cost": state.iteration_cost,
        })
        _write_cdf(config, out, state.j, state.z, state.q_tau, state.c_tau)
    _write_csv(out / "history.csv", header, rows)
    _write_json(out / "result.json", {
        "converged": result.converged,
        "iterations": len(result.history) - 1,
        "final_z": [float(v) for v in result.history[-1].z],
        "final_residual": result.history[-1].residual,
        "final_c_tau": result.history[-1].c_tau,
        "total_cost": result.history[-1].cumulative_cost,
    })


def _run_reference(config: ExperimentConfig, out: Path) -> None:
    _write_json(out / "reference.json", make_reference(config))


_RUNNERS = {
    "estimate": _run_estimate,
    "reliability": _run_reliability,
    "complexity": _run_complexity,
    "optimize": _run_optimize,
    "reference": _run_reference,
}


def run_experiment(config: ExperimentConfig, out_dir: Path | None = None) -> Path:
    """Run the configured study and return the artifact directory."""
    out = Path(out_dir) if out_dir is not None else config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _RUNNERS[config.kind](config, out)
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvar-mlmc",
        description="CVaR optimisation experiments with multilevel Monte Carlo.")
    parser.add_argument("kind", choices=sorted(_RUNNERS),
                        help="experiment kind (overrides the config's kind)")
    parser.add_argument("--config", required=True, help="path to a JSON config file")
    parser.add_argument("--out", default=None, help="artifact directory override")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; never changes the results")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        config = replace(config, kind=args.kind)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    try:
        out = run_experiment(config, args.out)
    except ConfigError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
