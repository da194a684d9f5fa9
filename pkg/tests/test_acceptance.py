"""The ten end-to-end acceptance criteria, each at its stated tolerance.

Every test prints one PASS/FAIL line (also collected in the terminal summary).
"""
import logging
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import random_city
from losprob import synth
from losprob.distfit import BETA_CLIP, FRACTION_FAMILIES, SIZE_FAMILIES, select_family
from losprob.empirical import LosCurve
from losprob.envclass import EnvClass
from losprob.extract import sample_streets, trace_many
from losprob.fit import FitConfig, fit_cell, mse
from losprob.geo import build_index
from losprob.model import D1D2Params, LosModelParams, p_los, p_los_3gpp, p_los_array
from losprob.outage import SimConfig, run_model
from losprob.pipeline import checksums, run_pipeline
from losprob.presets import CORRELATIONS, MARGINALS, env_model
from losprob.sampling import TripletSampler

R = np.arange(2.5, 1000, 5.0)


def test_01_model_identity(acceptance):
    rng = np.random.default_rng(1)
    r = np.arange(1, 1001, dtype=float)
    worst = 0.0
    for _ in range(100):
        d1, d2 = rng.uniform(0, 1000), rng.uniform(1, 5000)
        a = p_los(LosModelParams(d1, d2, 1.0), r)
        b = p_los_3gpp(D1D2Params(d1, d2), r)
        worst = max(worst, float(np.abs(a - b).max()))
    acceptance(1, "model identity F=1, U=d1, W=d2", worst <= 1e-12, f"max |diff| = {worst:.2e}")


def test_02_discontinuity(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        U, W, F = rng.uniform(1, 1000), rng.uniform(1, 5000), rng.uniform(0, 1)
        p = LosModelParams(U, W, F)
        jump = p_los(p, U) - p_los(p, np.nextafter(U, np.inf))
        worst = max(worst, abs(jump - (1 - F)))
    acceptance(2, "jump at U equals 1 - F", worst <= 1e-9, f"max error = {worst:.2e}")


def _recovery_triplets(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        U = rng.uniform(0, 300)
        W = math.exp(rng.uniform(math.log(max(100.0, U)), math.log(2000.0)))
        out.append((U, W, rng.uniform(0.2, 1.0)))
    return out


def _within(p, truth, du, dw, df):
    U, W, F = truth
    return abs(p.U - U) <= du and abs(p.W / W - 1) <= dw and abs(p.F - F) <= df


@pytest.fixture(scope="module")
def noisy_fits():
    """200 binomial-noise curves (200 points per bin) with 10-start and 1-start fits."""
    rng = np.random.default_rng(33)
    rows = []
    for t in _recovery_triplets(200, 3):
        hits = rng.binomial(200, p_los_array(*t, R))
        c = LosCurve("noisy", R, hits / 200, np.full(len(R), 200))
        rows.append((t, fit_cell(c, FitConfig(n_starts=10)), fit_cell(c, FitConfig(n_starts=1))))
    return rows


def test_03_fit_recovery(acceptance, noisy_fits):
    clean_ok = 0
    for t in _recovery_triplets(200, 3):
        c = LosCurve("clean", R, p_los_array(*t, R), np.full(len(R), 200))
        clean_ok += _within(fit_cell(c).params, t, 5.0, 0.05, 0.02)
    noisy_ok = sum(_within(multi.params, t, 15.0, 0.15, 0.05) for t, multi, _ in noisy_fits)
    ok = clean_ok == 200 and noisy_ok >= 180
    acceptance(3, "fit recovery", ok,
               f"noiseless {clean_ok}/200 within (5 m, 5%, 0.02); "
               f"noisy {noisy_ok}/200 within (15 m, 15%, 0.05), need 180")


def test_04_multistart_dominance(acceptance, noisy_fits):
    never_worse = sum(multi.objective <= single.objective for _, multi, single in noisy_fits)
    strictly = sum(multi.objective < single.objective * (1 - 1e-9) for _, multi, single in noisy_fits)
    ok = never_worse == 200 and strictly >= 20
    acceptance(4, "10 starts vs 1 start", ok,
               f"not worse in {never_worse}/200, strictly better in {strictly}/200 (need 20)")


def test_05_metric_tradeoff(acceptance):
    # a pooled UMa-like curve: 300 cells drawn from the UMa ensemble, 40 samples per bin each
    rng = np.random.default_rng(5)
    cells = TripletSampler(env_model(EnvClass.UMA), 5).sample(300)
    hits = sum(rng.binomial(40, p_los_array(u, w, f, R)) for u, w, f in cells)
    n = 40 * len(cells)
    curve = LosCurve("UMa-pool", R, hits / n, np.full(len(R), n))
    by_msle = fit_cell(curve, FitConfig(metric="msle")).params
    by_mse = fit_cell(curve, FitConfig(metric="mse")).params
    far = (mse(curve, by_msle, 500), mse(curve, by_mse, 500))
    full = (mse(curve, by_msle), mse(curve, by_mse))
    ok = far[0] < far[1] and full[1] < full[0]
    acceptance(5, "MSLE wins beyond 500 m, MSE wins overall", ok,
               f"MSE(r>500) msle-fit {far[0]:.2e} vs mse-fit {far[1]:.2e}; "
               f"overall {full[0]:.2e} vs {full[1]:.2e}")


def test_06_distribution_round_trip(acceptance):
    logging.disable(logging.WARNING)  # GEV non-convergence on the skewed U rows is expected
    try:
        worst_share, worst_rel, lines = 1.0, 0.0, []
        for e, env in enumerate(MARGINALS):
            for j, (name, dist) in enumerate(zip("UWF", MARGINALS[env])):
                wins, params = 0, []
                for trial in range(100):
                    rng = np.random.default_rng([6, e, j, trial])
                    if dist.family == "gamma":
                        x, cands = rng.gamma(dist["k"], dist["theta"], 2000), SIZE_FAMILIES
                    else:
                        x = np.clip(rng.beta(dist["alpha"], dist["beta"], 2000), BETA_CLIP, 1 - BETA_CLIP)
                        cands = FRACTION_FAMILIES
                    got = select_family(x, cands)
                    if got.family == dist.family:
                        wins += 1
                        params.append([got[k] for k in dist.params])
                truth = np.array(list(dist.params.values()))
                rel = float(np.abs(np.median(params, axis=0) / truth - 1).max())
                worst_share, worst_rel = min(worst_share, wins / 100), max(worst_rel, rel)
                lines.append(f"{env.value}-{name}:{wins}%")
    finally:
        logging.disable(logging.NOTSET)
    ok = worst_share >= 0.95 and worst_rel <= 0.10
    acceptance(6, "family selection round trip", ok,
               f"lowest true-family rate {worst_share:.0%}, worst median-trial error {worst_rel:.1%} "
               f"[{' '.join(lines)}]")


def test_07_copula(acceptance):
    model = env_model(EnvClass.UMA)
    s = TripletSampler(model, 7)
    X = s.gaussian(100_000)
    dev = float(np.abs(np.corrcoef(X.T) - model.correlation).max())
    U, W, F = s.transform(X).T
    g, w, b = model.marginals
    # U is capped at 1000 m and about 1% of F rounds to 1.0 in float64: KS runs on the
    # continuous parts against the conditional CDFs, the end masses are checked by count
    top = 1 - 1e-9
    p_top = float(b.sf(top))
    mass_ok = (abs(np.mean(U >= 1000) - g.sf(1000.0)) <= 4 * math.sqrt(g.sf(1000.0) / len(U))
               and abs(np.mean(F >= top) - p_top) <= 4 * math.sqrt(p_top / len(F)))
    pv = (stats.kstest(U[U < 1000], lambda x: g.cdf(x) / g.cdf(1000.0)).pvalue,
          stats.kstest(W, w.cdf).pvalue,
          stats.kstest(F[F < top], lambda x: b.cdf(x) / b.cdf(top)).pvalue)
    ok = dev <= 0.01 and min(pv) > 0.01 and mass_ok
    acceptance(7, "Gaussian copula with the UMa correlations", ok,
               f"max |corr(X) - R| = {dev:.4f}; KS p-values U {pv[0]:.3f} W {pv[1]:.3f} F {pv[2]:.3f}")


def test_08_outage(acceptance):
    cfg = SimConfig()
    res, slowest = {}, 0.0
    for model in ("ensemble", "average", "3gpp"):
        t = time.perf_counter()
        res[model] = run_model(model, EnvClass.UMA, cfg)
        slowest = max(slowest, (time.perf_counter() - t) / len(cfg.d_bs1_values))
    a = res["average"][0].mean_outage
    monotone = all(np.all(np.diff([r.mean_outage for r in res[m]]) >= 0) for m in res)
    ratio = res["ensemble"][-1].variance / res["average"][-1].variance
    ok = a < 1e-3 and monotone and ratio >= 5 and slowest < 60
    acceptance(8, "outage behaviour", ok,
               f"(a) average UMa at 100 m {a:.1e}; (b) monotone means {monotone}; "
               f"(c) variance ratio at 500 m {ratio:.0f}x; slowest point {slowest:.1f} s")


def test_09_extraction_oracle(acceptance):
    cases = []
    scene = random_city(10_000, seed=9)
    rng = np.random.default_rng(9)
    rad = 1000 * np.sqrt(rng.random(100_000))
    ang = rng.uniform(0, 2 * np.pi, 100_000)
    cases.append(("random city", scene, np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])))
    spec = synth.SyntheticCitySpec(lots_per_side=4, coverage=0.4, height_mode="lognormal",
                                   height_sigma=0.5, jitter=1.0, slope=(0.01, 0.005))
    grid = synth.generate_city(spec, seed=9)
    cases.append(("grid city", grid, sample_streets(grid.streets, grid.stations[0], 1000.0, 0.6)[:100_000]))
    same, t_index, t_brute, parts = True, 0.0, 0.0, []
    for name, sc, pts in cases:
        bs = sc.stations[0]
        t = time.perf_counter()
        fast = trace_many(sc, build_index(sc), bs, pts)
        t_index += time.perf_counter() - t
        t = time.perf_counter()
        slow = trace_many(sc, None, bs, pts)
        t_brute += time.perf_counter() - t
        same &= bool(np.array_equal(fast, slow))
        parts.append(f"{name}: {len(sc.buildings)} buildings, {len(pts)} points, "
                     f"{fast.mean():.1%} LOS")
    # the time budget applies to the accelerated labelling; the brute-force oracle is reported
    ok = same and t_index < 30
    acceptance(9, "indexed labels equal brute force", ok,
               f"identical {same}; {'; '.join(parts)}; indexed {t_index:.1f} s, "
               f"brute force {t_brute:.1f} s")


def test_10_end_to_end_determinism(acceptance, tmp_path):
    cfg = {"seed": 2024, "generate": {"n_cells": 200}, "sample": {"n": 1000}}
    t = time.perf_counter()
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    elapsed = time.perf_counter() - t
    a, b = checksums(tmp_path / "a"), checksums(tmp_path / "b")
    ok = a == b and len(a) > 200
    acceptance(10, "200-cell pipeline reproducible", ok,
               f"{len(a)} artifact files, identical checksums {a == b}; two runs in {elapsed:.0f} s")
