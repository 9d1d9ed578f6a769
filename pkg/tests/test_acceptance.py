"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL/SKIP line that is printed in the pytest
terminal summary. Tolerances are the ones stated for each criterion.
"""

import io
import math
import os
import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ACCEPTANCE, random_hyper, random_problem
from mixopt.dataset import augment_zero_strength, parse_mix_table, read_table, split_holdout
from mixopt.gp import GpModel, KernelHyperparams, fit_dataset, log_marginal_likelihood, prior_variance
from mixopt.gwp import example_factors
from mixopt.harness import BoOptions, FitOptions, RunConfig, random_baseline, run_bo_campaign, train_phasewise
from mixopt.inverse import InverseQuery, check_candidate, generate_candidates
from mixopt.metrics import eval_table, r_squared, rmse
from mixopt.mobo import DesignSpace, draw_base_samples, ehvi_mc, hypervolume, hypervolume_mc, qlog_ehvi
from mixopt.synthetic import SyntheticConfig, generate_synthetic

REAL_DATA_ENV = ("MIXOPT_REAL_MIXES", "MIXOPT_REAL_STRENGTHS", "MIXOPT_REAL_FACTORS")


def record(number, ok, detail):
    ACCEPTANCE[number] = ("PASS" if ok else "FAIL", detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def dense_oracle(X, y, Xs, h, jitter):
    """Posterior from an explicit inverse of the covariance, kernel written independently."""

    def kern(A, B):
        dt = A[:, -1][:, None] - B[:, -1][None, :]
        diff = (A[:, None, :] - B[None, :, :]) / h.ell_joint
        r = np.sqrt(np.sum(diff**2, axis=2))
        matern = (1 + math.sqrt(5) * r + 5 * r**2 / 3) * np.exp(-math.sqrt(5) * r)
        return h.alpha * np.exp(-(dt**2) / (2 * h.ell_time**2)) + h.beta * matern

    K = kern(X, X) + (h.noise_var + jitter * (h.alpha + h.beta)) * np.eye(len(X))
    Ks = kern(X, Xs)
    Kinv = np.linalg.inv(K)
    mean = h.mean_const + Ks.T @ Kinv @ (y - h.mean_const)
    var = np.diag(kern(Xs, Xs)) - np.sum(Ks * (Kinv @ Ks), axis=0)
    return mean, var


def test_criterion_01_gp_exactness():
    rng = np.random.default_rng(101)
    problems = []
    for _ in range(100):
        n = int(rng.integers(1, 51))
        X, y = random_problem(rng, n)
        problems.append((X, y, rng.uniform(size=(10, 11)), random_hyper(rng)))
    start = time.perf_counter()
    predictions = []
    for X, y, Xs, h in problems:
        m = GpModel.from_data(X, y, h)
        predictions.append((m.jitter, m.predict(Xs)))
    elapsed = time.perf_counter() - start
    worst = 0.0
    for (X, y, Xs, h), (jitter, (mean, var)) in zip(problems, predictions):
        om, ov = dense_oracle(X, y, Xs, h, jitter)
        worst = max(worst, np.max(np.abs(mean - om)), np.max(np.abs(var - ov)))
    record(1, worst <= 1e-8 and elapsed < 5, f"max |predict - dense oracle| = {worst:.2e} (tol 1e-8), {elapsed:.2f} s (< 5 s)")


def test_criterion_02_lml_gradient():
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        X, y = random_problem(rng, int(rng.integers(5, 30)))
        h = random_hyper(rng)
        _, grad = log_marginal_likelihood(h, X, y, return_grad=True)
        theta = h.to_vector()
        fd = np.empty_like(theta)
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            fd[i] = (
                log_marginal_likelihood(KernelHyperparams.from_vector(theta + e), X, y)
                - log_marginal_likelihood(KernelHyperparams.from_vector(theta - e), X, y)
            ) / 2e-5
        scale = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
        worst = max(worst, float(np.max(np.abs(grad - fd) / scale)))
    elapsed = time.perf_counter() - start
    record(2, worst <= 1e-4 and elapsed < 10, f"max relative gradient error = {worst:.2e} (tol 1e-4), {elapsed:.2f} s (< 10 s)")


def test_criterion_03_variance_reduction():
    rng = np.random.default_rng(103)
    X, y = random_problem(rng, 40)
    h = random_hyper(rng)
    m = GpModel.from_data(X, y, h)
    _, var = m.predict(rng.uniform(-0.5, 1.5, size=(1000, 11)))
    excess = float(np.max(var - prior_variance(h)))
    record(3, excess <= 1e-10, f"max(posterior var - prior var) over 1000 queries = {excess:.2e} (tol 1e-10)")


def test_criterion_04_hypervolume():
    start = time.perf_counter()
    examples = [
        (hypervolume([(1, 1)], (0, 0)), 1.0),
        (hypervolume([(2, 1), (1, 2)], (0, 0)), 3.0),
        (hypervolume([(3, 3)], (1, 1)), 4.0),
    ]
    exact = all(value == expected for value, expected in examples)
    rng = np.random.default_rng(104)
    misses = 0
    for seed in range(100):
        P = rng.uniform(size=(int(rng.integers(2, 15)), 2))
        est, se = hypervolume_mc(P, (0, 0), n_samples=20000, seed=seed)
        misses += abs(est - hypervolume(P, (0, 0))) > 3 * se
    elapsed = time.perf_counter() - start
    ok = exact and misses == 0 and elapsed < 20
    record(4, ok, f"worked examples exact: {exact}; MC outside 3 SE on {misses}/100 fronts; {elapsed:.2f} s (< 20 s)")


def test_criterion_05_ehvi():
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(50):
        sigma = rng.uniform(0.1, 3.0)
        best = rng.normal()
        mu = best + sigma * rng.uniform(-1.5, 1.5)
        z = (mu - best) / sigma
        closed = sigma * norm.pdf(z) + (mu - best) * norm.cdf(z)
        value = ehvi_mc([[mu]], [[sigma**2]], [[best]], [best - 1e6], n_samples=2**14)
        worst = max(worst, abs(value - closed) / closed)
    dominated = ehvi_mc([[1.0, 1.0]], [[0.0, 0.0]], [(2.0, 2.0)], (0.0, 0.0))
    record(5, worst <= 0.02 and dominated == 0.0, f"max relative error vs closed-form EI = {worst:.4f} (tol 0.02); dominated zero-variance value = {dominated}")


def test_criterion_06_qlog_stability():
    P = np.array([[1.0, 0.2], [0.6, 0.6], [0.2, 1.0]])
    r = np.zeros(2)
    base = draw_base_samples(256, 1, 2, seed=6)
    grid = np.linspace(-3.0, 1.5, 100)
    values, underflow = [], 0
    for a in grid:
        for b in grid:
            mean, var = [[a, b]], [[1e-4, 1e-4]]
            values.append(qlog_ehvi(mean, var, P, r, base_samples=base))
            underflow += ehvi_mc(mean, var, P, r, base_samples=base) < 1e-20
    finite = bool(np.all(np.isfinite(values)))
    rng = np.random.default_rng(106)
    gaps = []
    while len(gaps) < 20:
        means, variances = rng.uniform(0.3, 1.2, (2, 2)), rng.uniform(0.005, 0.05, (2, 2))
        ehvi = ehvi_mc(means, variances, P, r)
        if ehvi > 1e-3:
            gaps.append(abs(math.exp(qlog_ehvi(means, variances, P, r, tau=1e-3)) - ehvi) / ehvi)
    ok = finite and underflow > 0 and max(gaps) <= 0.05
    record(6, ok, f"10^4 grid values finite: {finite} ({underflow} with EHVI < 1e-20); max |exp(qLogEHVI) - EHVI|/EHVI = {max(gaps):.4f} (tol 0.05)")


@pytest.mark.slow
def test_criterion_07_phasewise_convergence():
    config = RunConfig()
    sigma_obs = config.synthetic.oracle.sigma_obs
    start = time.perf_counter()
    reports = train_phasewise(config, write=False)
    elapsed = time.perf_counter() - start
    lines, ok = [], elapsed < 300
    for seed in config.split.test_seeds:
        mine = sorted((r for r in reports if r.seed == seed), key=lambda r: r.phase)
        err = [r.table.pooled.rmse for r in mine]
        drops = int(np.sum(np.diff(err) < 0))
        final = mine[-1].table.pooled
        ok &= drops >= 4 and final.r2 >= 0.90 and final.rmse <= 1.5 * sigma_obs
        lines.append(f"seed {seed}: {drops}/5 decreases, VI R2 {final.r2:.3f}, RMSE {final.rmse:.3f}")
    record(7, ok, f"floor {sigma_obs} ksi; " + "; ".join(lines) + f"; {elapsed:.0f} s (< 300 s)")


@pytest.mark.slow
def test_criterion_08_bo_campaign():
    # reduced MC and search budgets keep the five campaigns within the runtime limit
    config = RunConfig(bo=BoOptions(q=4, rounds=5, n_samples=1024, restarts=2, max_evals=300, raw_samples=128), fit=FitOptions(max_iters=60))
    start = time.perf_counter()
    wins, lines = 0, []
    for seed in range(1, 6):
        campaign = run_bo_campaign(config, seed, write=False)
        mixes, hv_random = random_baseline(config, seed)
        assert len(campaign.evaluated) == len(mixes) == 20
        wins += campaign.hv_true > hv_random
        lines.append(f"{campaign.hv_true:.0f} vs {hv_random:.0f}")
    elapsed = time.perf_counter() - start
    record(8, wins >= 4 and elapsed < 600, f"BO beats random in {wins}/5 seeds (HV " + ", ".join(lines) + f"); {elapsed:.0f} s (< 600 s)")


def test_criterion_09_inverse_soundness():
    d = generate_synthetic(SyntheticConfig(seed=0))
    model = fit_dataset(augment_zero_strength(d), restarts=1, max_iters=60)
    factors, space = example_factors(), DesignSpace()
    query = InverseQuery(strength_thresholds=(5000, 6000, 7000, 8000), candidates_per_bin=20)
    result = generate_candidates(model, factors, space, query, seed=9, budget=4000)
    text = result.to_csv()
    mixes = parse_mix_table(text).mixes
    failed = checked = 0
    for _, row in read_table(text, ("mix_id", "threshold_psi", "bin_lo", "bin_hi")):
        key = (float(row["threshold_psi"]), (float(row["bin_lo"]), float(row["bin_hi"])))
        checked += 1
        failed += not check_candidate(model, factors, mixes[row["mix_id"]], key, query)
    pairs = [(5000.0, 6000.0), (6000.0, 7000.0), (7000.0, 8000.0)]
    bins = {key[1] for key in result.cells}
    nested = all(result[(tight, b)].feasible <= result[(loose, b)].feasible for loose, tight in pairs for b in bins)
    record(9, checked > 0 and failed == 0 and nested, f"{checked} candidates re-checked from CSV, {failed} failed; nesting on 3 threshold pairs x {len(bins)} bins: {nested}")


def test_criterion_10_real_data():
    paths = [os.environ.get(name) for name in REAL_DATA_ENV]
    if not all(paths) or not all(os.path.exists(p) for p in paths):
        ACCEPTANCE[10] = ("SKIP", "laboratory dataset not supplied; set " + ", ".join(REAL_DATA_ENV) + " to run")
        pytest.skip("criterion 10 needs the laboratory dataset and factor table (" + ", ".join(REAL_DATA_ENV) + ")")
    config = RunConfig(mixes=paths[0], strengths=paths[1], factors=paths[2])
    reports = train_phasewise(config, write=False)
    last = max(r.phase for r in reports)
    final = [r.table.pooled for r in reports if r.phase == last]
    r2 = float(np.mean([t.r2 for t in final]))
    err = float(np.mean([t.rmse for t in final]))
    ok = abs(r2 - 0.94) <= 0.05 and abs(err - 0.69) <= 0.15
    record(10, ok, f"mean all-ages R2 {r2:.3f} (0.94 +/- 0.05), RMSE {err:.3f} ksi (0.69 +/- 0.15)")


def test_criterion_11_metric_identities():
    checks = {
        "R2 worked example 0.97": abs(r_squared([1, 2, 3], [1.1, 1.9, 3.2]) - 0.97) <= 1e-12,
        "RMSE worked example": abs(rmse([1, 2, 3], [1.1, 1.9, 3.2]) - math.sqrt(0.02)) <= 1e-12,
        "clamp to 0": r_squared([0, 1], [2, -1]) == 0.0,
        "perfect fit": r_squared([1, 2, 3], [1, 2, 3]) == 1.0 and rmse([1, 2], [1, 2]) == 0.0,
        "null predictor": r_squared([1, 2, 3], [2, 2, 2]) == 0.0,
    }
    rng = np.random.default_rng(111)
    identity = pooled = True
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y, yhat = rng.normal(size=n), rng.normal(size=n)
        raw = 1 - rmse(y, yhat) ** 2 * n / np.sum((y - y.mean()) ** 2)
        identity &= abs(r_squared(y, yhat) - max(0.0, raw)) <= 1e-10
        ages = rng.choice([1.0, 3.0, 5.0, 14.0, 28.0], size=n)
        table = eval_table(ages, y, yhat)
        rows = [row for row in table.rows[:-1] if row.n]
        pooled &= abs(table.pooled.rmse**2 - sum(r.n * r.rmse**2 for r in rows) / n) <= 1e-10
    checks["R2 = 1 - RMSE^2 N / SS_tot"] = identity
    checks["pooled RMSE decomposition"] = pooled
    failed = [name for name, ok in checks.items() if not ok]
    record(11, not failed, f"{len(checks) - len(failed)}/{len(checks)} identities hold" + (f"; failed: {failed}" if failed else ""))
