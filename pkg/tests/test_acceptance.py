"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""
import json
import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from cvar_mlmc.cli import main, make_reference, _gradient_errors
from cvar_mlmc.config import parse_config
from cvar_mlmc.controller import run_cmlmc
from cvar_mlmc.errors import ErrorBreakdown, total_gradient_mse
from cvar_mlmc.estimator import (build_functionals, extract_var_cvar,
                                 pointwise_from_batches)
from cvar_mlmc.kde import gaussian_partial_moment
from cvar_mlmc.models import FhnModel, LevelBatch, PollutantModel
from cvar_mlmc.models.fhn import FhnParams
from cvar_mlmc.models.pollutant import PollutantParams
from cvar_mlmc.optimizer import OuuProblem, run, select_theta_interval
from cvar_mlmc.rng import derive_stream
from cvar_mlmc.spline import ThetaGrid

TAU = 0.7
FHN_Z = np.array([0.7, 0.8, 0.08, 1.0])


def _report(capfd, name, ok, detail=""):
    with capfd.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="module")
def fhn_opt_result():
    # Step size and penalty weight picked for a well-conditioned descent: the
    # CVaR surface steepens sharply near the optimum, so a stiff quadratic
    # penalty keeps the trajectory in the smoothly contracting regime.
    problem = OuuProblem(FhnModel(FhnParams()), tau=TAU, kappa=40.0,
                         z_ref=FHN_Z.copy(), z0=FHN_Z.copy(), alpha=0.0015,
                         eta=0.2, eps=0.01, seed=42, max_iters=120)
    t0 = time.perf_counter()
    result = run(problem)
    return result, time.perf_counter() - t0


def test_criterion_01_fhn_adjoint_gradient(capfd):
    t0 = time.perf_counter()
    model = FhnModel(FhnParams(sigma=0.0))
    stream = derive_stream(0, 4, 0, 0)
    grad = model.sample_pair(FHN_Z, 4, stream).grad_fine
    step = 1e-5
    rel = np.empty(4)
    for k in range(4):
        zp, zm = FHN_Z.copy(), FHN_Z.copy()
        zp[k] += step
        zm[k] -= step
        qp = model.sample_pair(zp, 4, derive_stream(0, 4, 0, 0)).q_fine
        qm = model.sample_pair(zm, 4, derive_stream(0, 4, 0, 0)).q_fine
        fd = (qp - qm) / (2 * step)
        rel[k] = abs(grad[k] - fd) / max(abs(fd), 1e-14)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(rel <= 1e-4) and elapsed < 1.0)
    _report(capfd, "criterion 1 (adjoint gradient)",
            ok, f"max rel err {rel.max():.2e}, {elapsed:.2f}s")


def _single_level_estimates(q, grad, grid, tau):
    batch = LevelBatch(0, q, grad, np.ones(q.size))
    pw = pointwise_from_batches([batch], grid, tau)
    return build_functionals(pw, grid, np.zeros(grad.shape[1]), [batch], tau), batch


def test_criterion_02_parametric_expectation(capfd):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10 ** 4

    # sensitivity functional vs brute-force indicator average, shared seeds
    xi = rng.standard_normal(n)
    q = 1.0 + 0.5 * xi
    grad = np.column_stack([np.ones(n), xi])
    grid = ThetaGrid(float(np.quantile(q, 0.3)), float(np.quantile(q, 0.95)), 65)
    est, batch = _single_level_estimates(q, grad, grid, TAU)
    thetas = np.linspace(grid.theta_lo + 0.2, grid.theta_hi - 0.2, 5)
    max_rel = 0.0
    for theta in thetas:
        for k in range(2):
            brute = np.mean((q >= theta) * grad[:, k]) / (1.0 - TAU)
            fitted = float(est.psi[k](theta, order=1))
            max_rel = max(max_rel, abs(fitted - brute) / abs(brute))
    ok_psi = max_rel <= 0.02

    # CVaR of the fitted surrogate vs closed forms, within 3 standard errors
    results = []
    for name, q_s, c_true in (
        ("uniform", rng.uniform(0.0, 1.0, n), 0.85),
        ("normal", rng.standard_normal(n),
         norm.pdf(norm.ppf(TAU)) / (1.0 - TAU)),
    ):
        g = ThetaGrid(float(np.quantile(q_s, 0.4)), float(np.quantile(q_s, 0.95)), 65)
        est_s, _ = _single_level_estimates(q_s, np.ones((n, 1)), g, TAU)
        q_hat, c_hat = extract_var_cvar(est_s)
        phi_samples = q_hat + np.maximum(q_s - q_hat, 0.0) / (1.0 - TAU)
        se = phi_samples.std(ddof=1) / np.sqrt(n)
        results.append((name, c_hat, c_true, se, abs(c_hat - c_true) <= 3 * se))
    elapsed = time.perf_counter() - t0
    ok = ok_psi and all(r[4] for r in results) and elapsed < 10.0
    detail = (f"psi rel {max_rel:.3f}; "
              + "; ".join(f"{r[0]} c_tau {r[1]:.4f} vs {r[2]:.4f} (se {r[3]:.4f})"
                          for r in results)
              + f"; {elapsed:.1f}s")
    _report(capfd, "criterion 2 (parametric expectations)", ok, detail)


def test_criterion_03_mse_decomposition(capfd):
    targets = {"phi": (0.1, 0.2, 0.3), "psi_0": (0.04, 0.05, 0.06),
               "psi_1": (1e-7, 2e-9, 3.3e-4)}
    bd = ErrorBreakdown(targets)
    expected = float(sum(sum(t) for t in targets.values()))
    ok = total_gradient_mse(bd) == expected
    _report(capfd, "criterion 3 (MSE decomposition)",
            ok, f"total {total_gradient_mse(bd)!r} == sum {expected!r}")


def test_criterion_04_kde_closed_form(capfd):
    t0 = time.perf_counter()
    worst = 0.0
    thetas = np.linspace(-1.0, 2.0, 5)
    mus = np.linspace(-0.5, 1.5, 5)
    deltas = [0.05, 0.2, 0.7, 1.3]
    count = 0
    for theta in thetas:
        for mu in mus:
            for delta in deltas:
                count += 1
                closed = gaussian_partial_moment(theta, mu, delta)
                integrand = lambda q: ((q - theta) / (delta * np.sqrt(2 * np.pi))
                                       * np.exp(-0.5 * ((q - mu) / delta) ** 2))
                hi = mu + 12 * delta
                val = 0.0
                if hi > theta:
                    val, _ = quad(integrand, theta, hi, epsabs=1e-12,
                                  epsrel=1e-12, points=[mu] if theta < mu < hi else None)
                worst = max(worst, abs(closed - val))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and count == 100 and elapsed < 1.0
    _report(capfd, "criterion 4 (KDE closed form)",
            ok, f"max |diff| {worst:.2e} over {count} points, {elapsed:.2f}s")


def test_criterion_05_reliability(capfd):
    t0 = time.perf_counter()
    model = FhnModel(FhnParams())
    tol = 2.0
    probe = model.sample_batch(FHN_Z, 3, 123, 256, replica_tag=3_000_000)
    lo, hi = select_theta_interval(probe.q_fine, TAU)
    results = []
    max_cost = 0.0
    for run_id in range(1, 21):
        res = run_cmlmc(model, FHN_Z, TAU, tol, ThetaGrid(lo, hi, 17), 123,
                        replica_tag=run_id)
        results.append(res)
        max_cost = max(max_cost, res.total_cost)

    # reference at >= 16x the largest run budget (fine solves cost 20 * 2^level),
    # one level above the runs' finest so its own bias is negligible
    level = 6
    per_sample = 20.0 * 2 ** level
    big_n = int(np.ceil(16.0 * max_cost / per_sample))
    cfg = parse_config({
        "seed": 777, "model": "fhn",
        "statistic": {"tau": TAU},
        "optimizer": {"z0": list(FHN_Z)},
        "experiment": {"kind": "reference"},
    })
    ref = make_reference(cfg, big_n=big_n, big_level=level)

    covered = 0
    tight = 0
    for res in results:
        rmse = float(np.sqrt(res.breakdown.total_mse_sq))
        point_err, sup_err = _gradient_errors(res.estimates, ref)
        covered += rmse >= point_err
        tight += rmse <= 10.0 * sup_err
    elapsed = time.perf_counter() - t0
    ok = covered >= 18 and tight >= 18 and elapsed <= 1800.0
    _report(capfd, "criterion 5 (reliability)",
            ok, f"coverage {covered}/20, tightness {tight}/20, "
                f"reference N {big_n} (>=16x budget), {elapsed:.0f}s")


def test_criterion_06_complexity(capfd):
    t0 = time.perf_counter()
    model = FhnModel(FhnParams())
    probe = model.sample_batch(FHN_Z, 3, 123, 256, replica_tag=3_000_000)
    lo, hi = select_theta_interval(probe.q_fine, TAU)
    tolerances = [4.0, 2.0, 1.0, 0.5, 0.2]
    costs = []
    for i, tol in enumerate(tolerances, start=1):
        res = run_cmlmc(model, FHN_Z, TAU, tol, ThetaGrid(lo, hi, 17), 123,
                        replica_tag=i)
        costs.append(res.total_cost)
    slope = float(np.polyfit(np.log(tolerances), np.log(costs), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = -2.6 <= slope <= -1.6 and elapsed <= 1800.0
    _report(capfd, "criterion 6 (complexity)",
            ok, f"cost-tolerance slope {slope:.2f}, {elapsed:.0f}s")


def test_criterion_07a_linear_gaussian_convergence(capfd):
    from cvar_mlmc.models import LinearGaussianModel
    problem = OuuProblem(LinearGaussianModel(), tau=TAU, kappa=1.0,
                         z_ref=np.array([0.0]), z0=np.array([1.0]), alpha=0.2,
                         eta=0.2, eps=1e-3, seed=5, max_iters=120)
    res = run(problem)
    final = res.history[-1]
    stat_tol = problem.eta * float(np.linalg.norm(res.history[-2].gradient))
    z_err = abs(final.z[0] - (-0.5))
    log_r = np.log([s.residual for s in res.history])
    slope = float(np.polyfit(np.arange(log_r.size), log_r, 1)[0])
    ok = res.converged and z_err <= 3 * stat_tol and slope < 0
    _report(capfd, "criterion 7a (benchmark optimum)",
            ok, f"|z - z*| {z_err:.4f} <= 3 x {stat_tol:.4f}, "
                f"log-residual slope {slope:.2f}")


def test_criterion_07b_fhn_optimization(capfd, fhn_opt_result):
    result, elapsed = fhn_opt_result
    hist = result.history
    final = hist[-1]
    c_tau = np.array([s.c_tau for s in hist])
    q_tau = np.array([s.q_tau for s in hist])
    half = len(hist) // 2
    tail_c = c_tau[half:]
    tail_q = q_tau[half:]
    mono_c = bool(np.all(np.diff(tail_c) <= 1e-12))
    mono_q = bool(np.all(np.diff(tail_q) <= 1e-12))
    ok = (result.converged and final.residual <= 0.01
          and c_tau[-1] < c_tau[0] and mono_c and mono_q
          and elapsed <= 3600.0)
    _report(capfd, "criterion 7b (FHN optimization)",
            ok, f"residual {final.residual:.4f}, c_tau {c_tau[0]:.4f}->{c_tau[-1]:.4f}, "
                f"tail monotone (c {mono_c}, q {mono_q}), {elapsed:.0f}s")


def test_criterion_08_cumulative_cost_law(capfd, fhn_opt_result):
    result, _ = fhn_opt_result
    hist = result.history
    half = len(hist) // 2
    cost = np.array([s.cumulative_cost for s in hist[half:]])
    gnorm = np.array([float(np.linalg.norm(s.gradient)) for s in hist[half:]])
    slope = float(np.polyfit(np.log(gnorm), np.log(cost), 1)[0])
    ok = -2.6 <= slope <= -1.5
    _report(capfd, "criterion 8 (cumulative cost law)",
            ok, f"cost vs gradient-norm slope {slope:.2f} over {cost.size} iterations")


def test_criterion_09_pollutant(capfd):
    t0 = time.perf_counter()
    model = PollutantModel(PollutantParams())
    z0 = np.full(9, 0.1)
    stream = derive_stream(0, 0, 0, 0)
    sample = model.sample_pair(z0, 0, stream)
    step = 1e-5
    rel = np.empty(9)
    for k in range(9):
        zp, zm = z0.copy(), z0.copy()
        zp[k] += step
        zm[k] -= step
        qp = model.sample_pair(zp, 0, derive_stream(0, 0, 0, 0)).q_fine
        qm = model.sample_pair(zm, 0, derive_stream(0, 0, 0, 0)).q_fine
        fd = (qp - qm) / (2 * step)
        rel[k] = abs(sample.grad_fine[k] - fd) / max(abs(fd), 1e-14)
    ok_grad = bool(np.all(rel <= 1e-3))

    # Stiff penalty and small step keep the design near z_ref, where the
    # 6-level mesh hierarchy can resolve the discretisation bias; the loose
    # eta matches the coarse residual target.
    problem = OuuProblem(model, tau=TAU, kappa=5.0, z_ref=z0.copy(),
                         z0=z0.copy(), alpha=0.05, eta=0.5, eps=0.3, seed=42,
                         max_iters=60)
    res = run(problem)
    c_tau = [s.c_tau for s in res.history]
    elapsed = time.perf_counter() - t0
    ok = (ok_grad and res.converged and c_tau[-1] < c_tau[0]
          and elapsed <= 1800.0)
    _report(capfd, "criterion 9 (pollutant)",
            ok, f"max grad rel err {rel.max():.2e}, "
                f"c_tau {c_tau[0]:.4f}->{c_tau[-1]:.4f} in {len(c_tau)} iters, "
                f"{elapsed:.0f}s")


def test_criterion_10_determinism(capfd, tmp_path):
    cfg = {
        "seed": 31,
        "model": "linear_gaussian",
        "statistic": {"tau": TAU},
        "optimizer": {"z0": [1.0]},
        "experiment": {"kind": "estimate", "tolerances": [0.05]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    out1, out2 = tmp_path / "t1", tmp_path / "t8"
    rc1 = main(["estimate", "--config", str(cfg_path), "--out", str(out1),
                "--threads", "1"])
    rc2 = main(["estimate", "--config", str(cfg_path), "--out", str(out2),
                "--threads", "8"])
    same = all((out1 / name).read_bytes() == (out2 / name).read_bytes()
               for name in ("estimates.csv", "errors.json", "hierarchy_log.json"))
    ok = rc1 == 0 and rc2 == 0 and same
    _report(capfd, "criterion 10 (determinism)",
            ok, "1-thread and 8-thread reruns byte-identical")
