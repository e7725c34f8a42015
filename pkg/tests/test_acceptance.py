"""Acceptance criteria 1-12, each at its stated scale and tolerance.

Every test prints one ``CRITERION n: PASS|FAIL`` line (collected again in
the terminal summary) before asserting.  Criterion 2 is the long
full-scale null run; it is marked ``slow`` and only runs with
``TFCE_GRF_LONG=1``.
"""
import math
import os
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import ACCEPTANCE, smooth_map
from tfce_grf import experiments, grf, infer, perm, sim
from tfce_grf.cluster import build_merge_tree, ccl_cluster_sizes, cluster_size_at
from tfce_grf.enhance import TfceParams, tfce_exact, tfce_riemann

LONG = os.environ.get("TFCE_GRF_LONG") == "1"


def record(n, ok, detail, key=None):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[key or str(n)] = line
    print(line, flush=True)
    return ok


# ---------------------------------------------------------------------------
# 1, 2: null calibration

def test_criterion_01_null_fwer_desk():
    t0 = time.perf_counter()
    rep = experiments.run_experiment({"experiment": "null_fwer", "realisations": 100, "dims": 48,
                                      "subjects": 40, "pipelines": ("hybrid",)})
    s = rep["summary"]["hybrid"]
    k = s["rejections"]
    mins = (time.perf_counter() - t0) / 60
    ok = k <= 2
    record(1, ok, f"rejections {k}/100 (need <= 2), Wilson95 {np.round(s['wilson95'], 4).tolist()}, "
                  f"voxel p<0.05 {s['prop_p05']['mean']:.4f}, {mins:.1f} min")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(not LONG, reason="full-scale null run; set TFCE_GRF_LONG=1")
def test_criterion_02_null_fwer_full():
    rep = experiments.run_experiment({"experiment": "null_fwer", "realisations": 200})
    parts, ok = [], True
    for pl in ("baseline", "hybrid"):
        s = rep["summary"][pl]
        prop = s["prop_p05"]["mean"]
        ok &= s["rejections"] <= 1 and 0.02 <= prop <= 0.05
        parts.append(f"{pl}: rejections {s['rejections']}/200, voxel p<0.05 {prop:.4f} "
                     f"+- {s['prop_p05']['sd']:.4f}")
    record(2, ok, "; ".join(parts) + " (need <= 1 and [0.02, 0.05])")
    assert ok


# ---------------------------------------------------------------------------
# 3, 4: power curve

@pytest.fixture(scope="module")
def power_report():
    return experiments.run_experiment({"experiment": "power", "realisations": 20})


def test_criterion_03_power_curve(power_report):
    by = power_report["summary"]["by_amplitude"]
    ladder = list(sim.AMPLITUDE_LADDER)
    onset_lo, onset_hi = ladder[ladder.index(0.02) - 1], ladder[ladder.index(0.04) + 1]
    ok, parts = True, []
    for pl in ("baseline", "hybrid"):
        onset = power_report["summary"]["onset_amplitude"][pl]
        d07 = by["0.07"][pl]["dice"]["mean"]
        d05 = by["0.5"][pl]["dice"]["mean"]
        fp05 = by["0.5"][pl]["false_positives"]
        ok_pl = (onset is not None and onset_lo <= onset <= onset_hi) and d07 >= 0.99 \
            and d05 == 1.0 and fp05 == 0
        ok &= ok_pl
        parts.append(f"{pl}: onset a={onset} (allowed [{onset_lo}, {onset_hi}]), "
                     f"Dice@0.07 {d07:.4f}, Dice@0.5 {d05:.4f}, FP@0.5 {fp05}")
    record(3, ok, "; ".join(parts))
    assert ok


def test_criterion_04_power_overlap(power_report):
    by = power_report["summary"]["by_amplitude"]
    worst, ok = 0.0, True
    for a, cell in by.items():
        b, h = cell["baseline"]["dice"], cell["hybrid"]["dice"]
        se = math.sqrt((b["sd"] ** 2 + h["sd"] ** 2) / b["n"])
        diff = abs(b["mean"] - h["mean"])
        ok &= diff <= se
        worst = max(worst, diff / se if se > 0 else (0.0 if diff == 0 else np.inf))
    record(4, ok, f"max |mean Dice diff| / pooled SE = {worst:.3f} over {len(by)} amplitudes (need <= 1)")
    assert ok


# ---------------------------------------------------------------------------
# 5: smoothness

def test_criterion_05_smoothness():
    t0 = time.perf_counter()
    rep = experiments.run_experiment({"experiment": "smoothness", "realisations": 50})
    secs = time.perf_counter() - t0
    s = rep["summary"]
    target = 3.532
    rel = (s["mean"] - target) / target
    ok = abs(rel) <= 0.05 and s["sd"] <= 0.10 and secs <= 300
    record(5, ok, f"FWHM {s['mean']:.4f} +- {s['sd']:.4f} vox, relative error {100 * rel:+.2f}% "
                  f"(need within 5%, SD <= 0.10), {secs:.0f} s (need <= 300)")
    assert ok


# ---------------------------------------------------------------------------
# 6: concordance

def test_criterion_06_concordance():
    rep = experiments.run_experiment({"experiment": "concordance", "realisations": 5})
    rows = rep["rows"]
    rs = [row["r"] for row in rows]
    dices = [row["dice"] for row in rows]
    subset = [row["subset"] for row in rows]
    ok = min(rs) >= 0.99 and min(dices) >= 0.997
    record(6, ok, f"r per phantom {np.round(rs, 4).tolist()} (need >= 0.99); Dice per phantom "
                  f"{np.round(dices, 4).tolist()} (need >= 0.997), mean {np.mean(dices):.4f}; "
                  f"hybrid subset of baseline {subset}; unfloored r "
                  f"{np.round([row['r_unfloored'] for row in rows], 4).tolist()}")
    assert ok


# ---------------------------------------------------------------------------
# 7: matched-grid identity

def test_criterion_07_matched_grid():
    rng = np.random.default_rng(7)
    params = grf.GrfParams(16 ** 3, (2.0, 2.0, 2.0))
    worst = 0.0
    for _ in range(20):
        z = smooth_map(rng, (16, 16, 16), 1.0) + rng.uniform(0, 1.5)
        b = infer.ptfce_baseline(z, None, params, 100)
        h = infer.ptfce_hybrid(z, None, params, 100)
        worst = max(worst, float(np.abs(b.z_enh - h.z_enh).max()), float(np.abs(b.S - h.S).max()))
    ok = worst <= 1e-10
    record(7, ok, f"max |hybrid - baseline| over 20 maps = {worst:.3g} (need <= 1e-10)")
    assert ok


# ---------------------------------------------------------------------------
# 8: grid convergence

def test_criterion_08_grid_convergence():
    rep = experiments.run_experiment({"experiment": "grid_convergence", "realisations": 3,
                                      "grid_levels": (25, 50, 100, 200, 500, 1000)})
    ok, parts = True, []
    for row in rep["rows"]:
        lv = row["levels"]
        dS = [lv[str(n)]["max_abs_dS"] for n in (25, 50, 100, 200, 500, 1000)]
        mono = all(a >= b for a, b in zip(dS, dS[1:]))
        r, d, dz = lv["500"]["r"], lv["500"]["dice"], lv["500"]["max_abs_dz"]
        ok &= r > 0.998 and d == 1.0 and mono and dz <= 1.0
        parts.append(f"seed {row['seed']}: r {r:.5f}, Dice {d:.4f}, max|dZ| {dz:.3f}, "
                     f"max|dS| {np.round(dS, 3).tolist()}")
    record(8, ok, "; ".join(parts) + " (need r > 0.998, Dice 1, max|dS| non-increasing, max|dZ| <= 1)")
    assert ok


# ---------------------------------------------------------------------------
# 9: exactness oracle

def test_criterion_09_exactness():
    rng = np.random.default_rng(9)
    size_ok, worst_rel, ratio_ok = True, 0.0, True
    n_checks = 0
    for k in range(50):
        z = smooth_map(rng, (12, 12, 12), 1.0) if k % 2 else rng.standard_normal((12, 12, 12))
        tree = build_merge_tree(z)
        flat = z.ravel(order="F")
        for tau in np.unique(z):
            ref = ccl_cluster_sizes(z, None, tau).ravel(order="F")
            size_ok &= np.array_equal(tree.sizes_at(tau), ref)
            # spot-check the scalar query too
            v = int(np.flatnonzero(flat >= tau)[0])
            size_ok &= cluster_size_at(tree, v, tau) == ref[v]
            n_checks += 1
        exact = tfce_exact(z, tree=tree)
        fine = tfce_riemann(z, params=TfceParams(dh=1e-4), tree=tree)
        worst_rel = max(worst_rel, float(np.abs(exact - fine).max() / exact.max()))
        good = tfce_riemann(z, params=TfceParams(dh=0.1), tree=tree)
        bug = tfce_riemann(z, params=TfceParams(dh=0.1, fsl_bug_compat=True), tree=tree)
        sel = good > 0
        ratio_ok &= np.array_equal(bug * 0.1, good) and \
            np.allclose(bug[sel] / good[sel], 1 / 0.1, rtol=4e-16, atol=0)
    ok = size_ok and worst_rel <= 2e-3 and ratio_ok
    record(9, ok, f"tree == CCL at {n_checks} thresholds: {size_ok}; max|exact - riemann(1e-4)| / max "
                  f"= {worst_rel:.2e} (need <= 2e-3); bug ratio exactly 1/dh: {ratio_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 10: GRF identities

def test_criterion_10_grf_identities():
    p = grf.GrfParams(92000, (3.532,) * 3)
    ec_zero = grf.expected_euler_char(1.0, p) == 0.0
    rng = np.random.default_rng(10)
    eq10 = max(abs(grf.GrfParams(1000, tuple(f)).roughness * np.prod(f) / (4 * math.log(2)) ** 1.5 - 1)
               for f in rng.uniform(0.5, 20, (200, 3)))
    k = np.arange(1, 101)
    q_err = max(float(np.max(np.abs(grf.q_function(k * (k + 1) * d / 2, d) / (k * d) - 1)))
                for d in (0.01, 0.0661, 0.5, 3.0))
    dens_err = 0.0
    for h in (1.5, 3.0, 4.5):
        for c in np.geomspace(0.5, 5000, 12):
            cdf, _ = integrate.quad(lambda x: grf.cluster_size_density(x, h, p), 0, c,
                                    epsabs=1e-13, epsrel=1e-12, limit=200)
            dens_err = max(dens_err, abs(cdf - (1 - grf.cluster_size_survival(c, h, p))))
    grid = grf.make_threshold_grid(5.5, 100)
    table = grf.build_exceedance_table(p, grid)
    taus = rng.uniform(0.0, 6.0, 100)
    sizes = np.exp(rng.uniform(0, math.log(92000), 100))
    tab_err = max(abs(table.probability(t, c) - grf.conditional_exceedance(t, c, p, table.support))
                  for t, c in zip(taus, sizes))
    ok = ec_zero and eq10 <= 4 * np.finfo(float).eps and q_err <= 4 * np.finfo(float).eps \
        and dens_err <= 1e-5 and tab_err <= 1e-3
    record(10, ok, f"EC(h=1)=0: {ec_zero}; roughness identity rel err {eq10:.1e}; Q identity rel err "
                   f"{q_err:.1e}; survival/density {dens_err:.1e} (need <= 1e-5); table vs quadrature "
                   f"{tab_err:.1e} (need <= 1e-3)")
    assert ok


# ---------------------------------------------------------------------------
# 11: permutation sanity

def test_criterion_11_permutation():
    hits = 0
    for r in range(100):
        spec = sim.PhantomSpec(dims=(24, 24, 24), n_subjects=20, amplitude=0.0, seed=r)
        stack, _ = sim.generate_phantom(spec)
        mask = spec.mask()
        null = perm.sign_flip_null(stack, mask, "etfce", 200, seed=r)
        z = sim.one_sample_t_to_z(stack, mask).data
        p = perm.perm_fwer_p(perm.enhance_scores(z, mask), null)
        hits += bool(p[mask].min() <= 0.05)
    rate = hits / 100
    ok = 0.02 <= rate <= 0.09
    record(11, ok, f"min-p <= 0.05 in {hits}/100 null stacks, rate {rate:.2f} (need [0.02, 0.09])")
    assert ok


# ---------------------------------------------------------------------------
# 12: benchmark ordering

def test_criterion_12_benchmark():
    rep = experiments.run_experiment({"experiment": "bench", "repeats": 5})
    s = rep["summary"]
    b, h, pm = s["baseline"]["mean"], s["hybrid"]["mean"], s["perm_etfce"]["mean"]
    ratio = h / b
    ok = b < h < pm and ratio < 10
    record(12, ok, f"baseline {b:.3f} s < hybrid {h:.3f} s < perm eTFCE (B=200) {pm:.1f} s; "
                   f"hybrid/baseline {ratio:.2f} (need < 10)")
    assert ok
