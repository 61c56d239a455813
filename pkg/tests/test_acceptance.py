"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line (also repeated in the
terminal summary) and then asserts. Criteria 1, 2, 5 and 7 share one full
desk-scale pipeline run (200 x 10 design, K = 50,000, N_p = 500) built from
``configs/pipeline.yaml``; criterion 8 runs the smoke config twice in fresh
processes.
"""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from abmcal.calibrate import (CalibrationTarget, NoiseModel, burn_in_length, dram_run,
                              preprocess, raftery_diagnostic, read_chain)
from abmcal.doe import PriorBox, load_design
from abmcal.pipeline import load_pipeline_config, run_pipeline
from abmcal.sensitivity import gini_importance, permutation_importance, sobol_indices
from abmcal.surrogate import (Hyperparams, cv_search, expand_grid, fit_forest, pca_fit,
                              pca_project, pca_reconstruct)
from abmcal.util import read_rows
from abmcal.validate import crps, hist_distances, rank_histogram

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    cfg = load_pipeline_config(ROOT / "configs" / "pipeline.yaml")
    root = tmp_path_factory.mktemp("acceptance") / "run"
    t0 = time.perf_counter()
    run_pipeline(cfg, root)
    return cfg, root, time.perf_counter() - t0


# ---- 1. PCA compression --------------------------------------------------------------

def test_criterion_1_pca_compression(full_run):
    _, root, _ = full_run
    D = load_design(root / "design")
    t0 = time.perf_counter()
    Y = D.outputs()
    basis = pca_fit(Y, 0.95)
    full = pca_fit(Y, 1.0, n_components=len(basis.components))
    back = pca_reconstruct(full, pca_project(full, Y))
    rel = np.linalg.norm(back - Y) / np.linalg.norm(Y)
    elapsed = time.perf_counter() - t0
    ok = len(D) >= 200 and len(D.seeds) >= 10 and basis.k <= 6 and rel <= 1e-8 and elapsed < 60
    report(1, ok, f"design {len(D)}x{len(D.seeds)}, k(95%)={basis.k} (<= 6), "
                  f"full-k round trip rel err {rel:.2e} (<= 1e-8), {elapsed:.2f}s")
    assert ok


# ---- 2. Surrogate accuracy -----------------------------------------------------------

def test_criterion_2_surrogate_cv(full_run):
    cfg, root, _ = full_run
    D = load_design(root / "design")
    t0 = time.perf_counter()
    best, rep = cv_search(D.thetas, D.outputs(), expand_grid(cfg.surrogate.grid), folds=5,
                          seed=cfg.seed("train"))
    elapsed = time.perf_counter() - t0
    err = float(rep.mean_scores()[rep.best_index])
    ok = err <= 0.10 and elapsed < 15 * 60
    report(2, ok, f"5-fold CV median abs rel error {err:.4f} (<= 0.10) over "
                  f"{len(rep.grid)} grid points, best {best.criterion}/leaf "
                  f"{best.min_samples_leaf}/mf {best.max_features}, {elapsed:.0f}s")
    assert ok


# ---- 3. Importance correctness ---------------------------------------------------------

def test_criterion_3_importance():
    t0 = time.perf_counter()
    box = PriorBox((-math.pi,) * 3, (math.pi,) * 3, ("x1", "x2", "x3"))
    ishigami = lambda X: (np.sin(X[:, 0]) + 7 * np.sin(X[:, 1]) ** 2
                          + 0.1 * X[:, 2] ** 4 * np.sin(X[:, 0]))
    V1, V2 = 0.5 * (1 + 0.1 * math.pi ** 4 / 5) ** 2, 49 / 8
    V13 = 0.01 * math.pi ** 8 * (1 / 18 - 1 / 50)
    V = V1 + V2 + V13
    S, ST = np.array([V1, V2, 0]) / V, np.array([V1 + V13, V2, V13]) / V
    res = sobol_indices(ishigami, box, n_base=4096, seed=0)
    sobol_err = max(np.abs(res.first - S).max(), np.abs(res.total - ST).max())

    rng = np.random.default_rng(0)
    X = rng.random((300, 3))
    train = X.copy()
    train[:, 2] = 0.5  # never splittable, so structurally unused
    y = np.sin(4 * X[:, 0]) + X[:, 1] + 2
    forest = fit_forest(train, y, Hyperparams(100, "absolute_error", 3, 3), seed=1)
    gini = gini_importance(forest)
    Xh = rng.random((200, 3))
    perm = permutation_importance(forest, Xh, np.sin(4 * Xh[:, 0]) + Xh[:, 1] + 2, repeats=5)
    unused_exact = 2 not in forest.features_used() and np.all(perm.values[:, 2] == 0.0)
    elapsed = time.perf_counter() - t0
    ok = sobol_err <= 0.05 and abs(gini.sum() - 1) < 1e-12 and unused_exact and elapsed < 300
    report(3, ok, f"Ishigami max |error| {sobol_err:.4f} (<= 0.05), gini sum {gini.sum():.15f}, "
                  f"unused-feature permutation importance exactly 0: {unused_exact}, "
                  f"{elapsed:.1f}s")
    assert ok


# ---- 4. Sampler correctness ------------------------------------------------------------

def batch_means_se(x, n_batches=50):
    means = np.array([b.mean(axis=0) for b in np.array_split(x, n_batches)])
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


def test_criterion_4_sampler():
    t0 = time.perf_counter()
    sd = np.array([1.0, 2.0, 0.5, 3.0])
    corr = np.array([[1, 0.6, -0.3, 0], [0.6, 1, 0, 0.2], [-0.3, 0, 1, 0.4], [0, 0.2, 0.4, 1]])
    C = corr * np.outer(sd, sd)
    mu = np.array([1.0, -2.0, 0.5, 4.0])
    P = np.linalg.inv(C)
    box = PriorBox(tuple(mu - 12 * sd), tuple(mu + 12 * sd), ("a", "b", "c", "d"))
    chain = dram_run(lambda x: -0.5 * float((x - mu) @ P @ (x - mu)), box, 50_000, seed=11)
    x = chain.thetas[5_000:]  # 10% burn-in
    z = np.abs(x.mean(axis=0) - mu) / batch_means_se(x)
    dC = np.abs(np.cov(x, rowvar=False) - C) / np.sqrt(np.outer(np.diag(C), np.diag(C)))
    moments_ok = bool(np.all(z <= 3) and np.all(dC <= 0.10))

    rng = np.random.default_rng(12)
    h = rng.random(60) * 40
    Dc = np.cumsum(rng.random(60))
    obs = preprocess(h, Dc, 7)
    target = CalibrationTarget(lambda th: (h + 1.5, Dc * 1.1), obs, NoiseModel(1, 1, 2.0, 0.3))
    theta = np.zeros(4)
    S_h, S_d = target.sums(theta)
    draws = np.empty((100_000, 2))
    for i in range(len(draws)):
        target.update(theta, rng)
        draws[i] = target.values()
    a = 0.5 * (1 + obs.n)
    ks = max(stats.kstest(draws[:, 0], stats.invgamma(a, scale=0.5 * (2.0 + S_h)).cdf).statistic,
             stats.kstest(draws[:, 1], stats.invgamma(a, scale=0.5 * (0.3 + S_d)).cdf).statistic)
    elapsed = time.perf_counter() - t0
    ok = moments_ok and ks < 0.02 and elapsed < 300
    report(4, ok, f"DRAM 4-D Gaussian K=50000: max |mean err|/SE_bm {z.max():.2f} (<= 3), "
                  f"max |dC_ij|/sqrt(C_ii C_jj) {dC.max():.3f} (<= 0.10); Gibbs KS {ks:.4f} "
                  f"(< 0.02, 1e5 draws); {elapsed:.0f}s")
    assert ok


# ---- 5 and 7. End-to-end self-consistency and calibration gain --------------------------

def test_criterion_5_self_consistency(full_run):
    cfg, root, elapsed = full_run
    chain = read_chain(root / "chain.csv")
    try:
        burn = burn_in_length(raftery_diagnostic(chain))
    except ValueError:
        burn = 0
    thetas = chain.thetas[burn:]
    rows = read_rows(root / "importance.csv")
    total = np.array([float(r["sobol_total"]) for r in rows])
    star = np.asarray(cfg.synthetic.theta_star)
    lo, hi = np.percentile(thetas, [2.5, 97.5], axis=0)
    sensitive = np.flatnonzero(total >= 0.1)
    inside = (star >= lo) & (star <= hi)
    ok = (len(chain) == 50_000 and len(sensitive) > 0 and bool(np.all(inside[sensitive]))
          and elapsed < 45 * 60)
    parts = ", ".join(f"{rows[j]['feature']}: S_T={total[j]:.2f} star={star[j]:.4g} "
                      f"CI=[{lo[j]:.4g}, {hi[j]:.4g}] {'in' if inside[j] else 'OUT'}"
                      for j in range(len(star)))
    report(5, ok, f"K={len(chain)}, burn-in {burn}, sensitive params {sensitive.tolist()}; "
                  f"{parts}; pipeline {elapsed / 60:.1f} min (< 45)")
    assert ok


def test_criterion_7_calibration_improves_fit(full_run):
    _, root, _ = full_run
    summary = {(r["metric"], r["output"]): float(r["value"])
               for r in read_rows(root / "report" / "summary.csv")}
    post = {o: summary[("crps_mean", o)] for o in ("hosp", "deaths")}
    prior = {o: summary[("crps_mean_prior", o)] for o in ("hosp", "deaths")}
    ok = all(post[o] < prior[o] for o in post)
    report(7, ok, "mean CRPS posterior vs prior pushforward (N_p=500): " + ", ".join(
        f"{o} {post[o]:.4f} < {prior[o]:.4f}" for o in post))
    assert ok


# ---- 6. Scoring correctness --------------------------------------------------------------

def crps_integral(x, y):
    x = np.sort(np.asarray(x, float))
    knots = np.unique(np.r_[x, y])
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        F = np.searchsorted(x, 0.5 * (a + b), side="right") / len(x)
        total += integrate.quad(lambda t: (F - (t >= y)) ** 2, a, b)[0]
    return total


def test_criterion_6_scoring():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 15))
        x, y = rng.normal(0, 5, m), float(rng.normal(0, 6))
        pair = np.abs(x - y).mean() - np.abs(x[:, None] - x[None]).sum() / (2 * m * m)
        c = crps(x, y)
        worst = max(worst, abs(c - pair), abs(c - crps_integral(x, y)))
    hand = crps([0.0, 2.0], 1.0) == pytest.approx(0.5) and crps([3.0], 1.25) == pytest.approx(1.75)

    m, T = 10, 150
    chi = hist_distances(rank_histogram(rng.normal(size=(m, T)), rng.normal(size=T), 1))["chi_sq"]
    null = [hist_distances(np.bincount(rng.integers(0, m + 1, T), minlength=m + 1))["chi_sq"]
            for _ in range(4000)]
    vrh_ok = chi < np.percentile(null, 95)

    d = hist_distances(np.array([1, 0]))
    eqs_ok = (abs(d["kl"] - math.log(2)) < 1e-12 and abs(d["chi_sq"] - 1) < 1e-12
              and abs(d["wasserstein"] - 0.5) < 1e-12
              and abs(hist_distances(np.array([3, 1]))["chi_sq"] - 0.25) < 1e-12)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and hand and vrh_ok and eqs_ok and elapsed < 60
    report(6, ok, f"CRPS max dev from pair formula/integral {worst:.1e} (<= 1e-6), hand cases "
                  f"{hand}, exchangeable VRH chi2 {chi:.3f} < null 95th pct "
                  f"{np.percentile(null, 95):.3f}, 2-bin distances {eqs_ok}, {elapsed:.1f}s")
    assert ok


# ---- 8. Reproducibility ---------------------------------------------------------------------

def test_criterion_8_reproducibility(tmp_path):
    digests = []
    for name in ("a", "b"):
        out = subprocess.run([sys.executable, "-m", "abmcal.cli", "pipeline", "--config",
                              str(ROOT / "configs" / "smoke.yaml"), "--out", str(tmp_path / name)],
                             capture_output=True, text=True, cwd=tmp_path)
        assert out.returncode == 0, out.stderr
        digests.append(out.stdout.strip().split()[-1])
    manifests = [(tmp_path / n / "pipeline_manifest.json").read_bytes() for n in ("a", "b")]
    ok = digests[0] == digests[1] and manifests[0] == manifests[1]
    report(8, ok, f"two clean-room `pipeline` runs, manifest sha256 {digests[0][:16]}... vs "
                  f"{digests[1][:16]}...")
    assert ok
