"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) and then
asserts the criterion as stated. Criteria that do not hold on the analytic
targets fail here on purpose; supplementary tests below pin down what does hold.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from densityguide import GaussianMixtureTarget, NoiseSchedule
from densityguide.asymptotics import mixture_normality_experiment
from densityguide.experiments import (
    counterexample,
    density_tracking,
    explicit_quantile_matching,
    implicit_dg,
    marginal_preservation,
    omega_fidelity,
    sdg_dispersion,
)
from densityguide.fields import pf_ode_field
from densityguide.guidance import constrained_min_shift
from densityguide.score_alignment import alignment_grid, sa_verify
from densityguide.stochastic import score_projection

VP = NoiseSchedule.vp()
APPC3 = GaussianMixtureTarget.preset("appC3")


def test_c1_density_tracking(record_criterion):
    start = time.perf_counter()
    res = density_tracking(n_latents=256, steps=(512, 4096), seed=0)
    elapsed = time.perf_counter() - start
    med = res[4096]["median_abs_error"]
    ratio = res[512]["median_abs_error"] / med
    ok = med < 1e-2 and 6 <= ratio <= 10 and elapsed < 30
    record_criterion("C1 density tracking", ok,
                     f"median err {med:.2e} at 4096 steps, 512/4096 ratio {ratio:.2f}, {elapsed:.1f}s")
    assert med < 1e-2
    assert 6 <= ratio <= 10
    assert elapsed < 30


def test_c2_sa_counterexample(record_criterion):
    res = counterexample({"vp": NoiseSchedule.vp(), "ve": NoiseSchedule.ve()}, scale=1.22, steps=4096)
    deltas = {f"{s}/{k}": v["delta"] for s, per in res.items() for k, v in per.items()}
    ok = all(deltas[f"{s}/z1"] < 0 and deltas[f"{s}/z2"] > 0 for s in ("vp", "ve"))
    record_criterion("C2 SA counterexample", ok, ", ".join(f"{k} delta {v:+.3f}" for k, v in deltas.items()))
    for s in ("vp", "ve"):
        assert deltas[f"{s}/z1"] < 0
        assert deltas[f"{s}/z2"] > 0


def test_c3_omega_fidelity(record_criterion):
    exact = omega_fidelity(n_latents=256, steps=4096, seed=0, divergence="exact")["correlation"]
    hutch = omega_fidelity(n_latents=256, steps=4096, seed=0, divergence="hutchinson")["correlation"]
    ok = exact > 0.999 and hutch > 0.98
    record_criterion("C3 omega fidelity", ok, f"corr exact {exact:.6f}, single-probe Hutchinson {hutch:.5f}")
    assert exact > 0.999
    assert hutch > 0.98


def test_c4_linear_model_alignment(record_criterion):
    tgt = GaussianMixtureTarget.gaussian(np.array([0.7, -0.4, 1.1]), 0.35)
    fld = pf_ode_field(VP, tgt)
    x_T = tgt.sample_diffused(VP, VP.T, np.random.default_rng(0), 64)
    rep = sa_verify(fld, x_T, alignment_grid(VP, 4096, "data"))
    s_T = tgt.score(VP, VP.T, x_T)
    ref = np.sum(s_T**2, axis=1)
    drift = float(np.max(np.abs(rep.diagnostics["omega_path"] - ref[None, :]) / ref[None, :]))
    ok = drift <= 1e-9
    record_criterion("C4 linear-model SA", ok, f"max relative drift of omega over all nodes {drift:.1e}")
    assert drift <= 1e-9


def test_c5_explicit_quantile_matching(record_criterion):
    res = explicit_quantile_matching(n_table=128, table_steps=1024, sample_steps=(32, 1024), seed=0)
    corr = res[32]["correlation"]
    err = res[1024]["max_abs_error"]
    ok = corr > 0.99 and err < 1e-2
    record_criterion("C5 explicit quantile matching", ok,
                     f"corr {corr:.4f} at 32 steps, max |target - achieved| {err:.3e} at 1024 steps")
    assert corr > 0.99
    assert err < 1e-2


def test_c6_implicit_dg_monotone(record_criterion):
    res = implicit_dg(levels=(0.1, 0.3, 0.5, 0.7, 0.9), n_latents=64, steps=1024, seed=0)
    means = [res["mean_log_p0"][q] for q in (0.1, 0.3, 0.5, 0.7, 0.9)]
    decreasing = bool(np.all(np.diff(means) < 0))
    ok = decreasing and res["median_bitwise_equal"]
    record_criterion("C6 implicit DG monotonicity", ok,
                     f"means {', '.join(f'{m:.3g}' for m in means)}; q=0.5 bitwise {res['median_bitwise_equal']}")
    assert res["median_bitwise_equal"]
    assert decreasing


def test_c7_sdg_pathwise_control(record_criterion):
    res = sdg_dispersion(ratios=(0.1, 0.5, 0.9), steps=(256, 1024, 4096), n_seeds=16, seed=0)
    mono = {r: bool(np.all(np.diff([res[r][n]["log_p_std"] for n in (256, 1024, 4096)]) < 0)) for r in res}
    cell = res[0.1][4096]
    ok = all(mono.values()) and cell["log_p_std"] < 1e-2 and min(cell["state_std"]) > 1e-2
    record_criterion("C7 SDG pathwise control", ok,
                     f"monotone {mono}; r=0.1 at 4096: log p std {cell['log_p_std']:.2e}, "
                     f"min x std {min(cell['state_std']):.2e}, tracked std {cell['tracked_std']:.1e}")
    assert all(mono.values())
    assert cell["log_p_std"] < 1e-2
    assert min(cell["state_std"]) > 1e-2


def test_c8_projection_and_optimization_algebra(record_criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        s = rng.standard_normal(6) * rng.uniform(0.1, 10)
        P = score_projection(s).matrix()
        worst = max(worst, np.abs(P - P.T).max(), np.abs(P @ P - P).max(), np.abs(P @ s).max() / np.linalg.norm(s),
                    abs(np.linalg.norm(P - np.eye(6)) - 1.0))
    beaten = 0
    for _ in range(100):
        y, v = rng.standard_normal((2, 4))
        a = rng.standard_normal()
        x = constrained_min_shift(y, v, a)
        z = rng.standard_normal((1000, 4)) * 3.0
        z = z + ((a - z @ v) / (v @ v))[:, None] * v
        feasible = abs(x @ v - a) < 1e-10
        beaten += feasible and bool(np.all(np.linalg.norm(z - y, axis=1) >= np.linalg.norm(x - y) - 1e-12))
    fld = pf_ode_field(VP, APPC3)
    rel = 0.0
    for _ in range(20):
        t, x, v = rng.uniform(0.05, 1.0), rng.standard_normal(2), rng.standard_normal(2)
        h = 1e-4
        nested = sum((fld.jvp(t, x + h * e, v)[i] - fld.jvp(t, x - h * e, v)[i]) / (2 * h)
                     for i, e in enumerate(np.eye(2)))
        exact = fld.second_order_divergence(t, x, v)
        rel = max(rel, abs(exact - nested) / max(abs(nested), 1e-2))
    ok = worst < 1e-12 and beaten == 100 and rel < 1e-4
    record_criterion("C8 projection/optimization algebra", ok,
                     f"projection residual {worst:.1e}, min-shift optimal on {beaten}/100, "
                     f"divergence identity rel err {rel:.1e}")
    assert worst < 1e-12
    assert beaten == 100
    assert rel < 1e-4


@pytest.mark.slow
def test_c9_asymptotic_normality(record_criterion):
    start = time.perf_counter()
    _, summaries = mixture_normality_experiment(n_components=128, dims=(64, 1024, 2048, 4096),
                                                sigmas=(0.5, 1.0, 10.0), n_samples=16384, seed=0, repeats=5)
    elapsed = time.perf_counter() - start
    by = {(s.dim, s.sigma): s for s in summaries}
    high = {k: s.median_pvalue for k, s in by.items() if k[0] >= 1024}
    low = {k: s.median_pvalue for k, s in by.items() if k[0] == 64}
    d4096 = [by[(4096, s)] for s in (0.5, 1.0, 10.0)]
    moments_ok = all(abs(s.median_mean) < 0.05 and 0.9 <= s.median_variance <= 1.1 for s in d4096)
    ok = all(p > 0.05 for p in high.values()) and all(p <= 0.05 for p in low.values()) and moments_ok \
        and elapsed < 600
    record_criterion("C9 asymptotic normality", ok,
                     f"min median p for D>=1024 {min(high.values()):.1e}, max median p at D=64 "
                     f"{max(low.values()):.1e}, D=4096 moments ok {moments_ok}, {elapsed:.0f}s")
    assert elapsed < 600
    assert moments_ok
    assert all(p <= 0.05 for p in low.values())
    assert all(p > 0.05 for p in high.values())


def test_c10_marginal_preservation(record_criterion):
    res = marginal_preservation(n=10_000, steps=1024, seed=0)
    zs = np.abs(np.r_[res["frequency_z"], np.ravel(res["mean_z"])])
    ok = bool(np.all(zs < 3))
    record_criterion("C10 marginal preservation", ok, f"max |z| {zs.max():.2f} over frequencies and means")
    assert np.all(zs < 3)


# -- supplementary checks on what the analytic targets do support ---------------------------


def test_counterexample_directions_and_alignment_signs():
    # Both schedules agree on the sign of every effect, and the measured
    # alignment sign predicts it: negative alignment, log p_0 rises with scale.
    res = counterexample({"vp": NoiseSchedule.vp(), "ve": NoiseSchedule.ve()}, scale=1.22, steps=4096)
    for key in ("z1", "z2"):
        signs = {np.sign(res[s][key]["delta"]) for s in ("vp", "ve")}
        assert len(signs) == 1
    for per in res.values():
        for v in per.values():
            if v["monotone_in_scale"]:
                assert np.sign(v["delta"]) == -np.sign(v["alignment"])
    assert res["vp"]["z1"]["alignment"] < 0 and res["vp"]["z1"]["delta"] > 0


def test_explicit_matching_improves_with_steps():
    res = explicit_quantile_matching(n_table=128, table_steps=1024, sample_steps=(32, 256, 1024), seed=0)
    errs = [np.median(np.abs(res[n]["targets"] - res[n]["achieved"])) for n in (32, 256, 1024)]
    assert errs[0] > errs[2]
    assert res[1024]["correlation"] > 0.9
    # the density channel itself follows the targets on every grid
    for n in (32, 256, 1024):
        assert np.max(np.abs(res[n]["tracked"] - res[n]["targets"])) < 1e-9


def test_implicit_dg_orders_low_levels():
    res = implicit_dg(levels=(0.1, 0.3, 0.5), n_latents=64, steps=1024, seed=0)
    means = [res["mean_log_p0"][q] for q in (0.1, 0.3, 0.5)]
    assert np.all(np.diff(means) > 0)
    assert res["median_bitwise_equal"]
