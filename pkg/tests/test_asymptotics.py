from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from densityguide import DomainError, GaussianMixtureTarget, NoiseSchedule
from densityguide.asymptotics import (
    LINDEBERG_LIMIT,
    chi2_case_check,
    h_point_mass,
    h_statistic,
    mixture_h_samples,
    mixture_normality_experiment,
    nonisotropic_case_check,
    nonisotropic_h,
    normality_test,
)

VP = NoiseSchedule.vp()


def test_point_mass_form_matches_mixture_closed_form():
    rng = np.random.default_rng(0)
    dim, k = 12, 5
    tgt = GaussianMixtureTarget(np.full(k, 1.0 / k), rng.standard_normal((k, dim)), 0.0)
    t = VP.inv_log_snr(0.5)
    alpha, sigma = VP.alpha_sigma(t)
    x = tgt.sample_diffused(VP, t, rng, 50)
    np.testing.assert_allclose(h_statistic(tgt, VP, t, x), h_point_mass(x, alpha * tgt.means, sigma), rtol=1e-9,
                               atol=1e-9)


def test_substitution_identity():
    # h = sigma^2 (lap log p + |score|^2) / sqrt(2D)
    rng = np.random.default_rng(1)
    tgt = GaussianMixtureTarget(np.array([0.2, 0.8]), rng.standard_normal((2, 6)), 0.3)
    t = 0.4
    sigma = VP.alpha_sigma(t)[1]
    x = rng.standard_normal((20, 6))
    s = tgt.score(VP, t, x)
    lap = tgt.laplacian_log_density(VP, t, x)
    expected = sigma**2 * (lap + np.sum(s * s, axis=1)) / np.sqrt(12.0)
    np.testing.assert_allclose(h_statistic(tgt, VP, t, x), expected, rtol=1e-10, atol=1e-12)


def test_zero_laplacian_ratio_gives_zero_h():
    # one point mass: lap p / p = |x - mu|^2 / sigma^4 - D / sigma^2 vanishes on the sphere r^2 = D sigma^2
    dim, sigma = 9, 0.7
    direction = np.random.default_rng(2).standard_normal(dim)
    x = direction / np.linalg.norm(direction) * np.sqrt(dim) * sigma
    assert h_point_mass(x, np.zeros((1, dim)), sigma)[0] == pytest.approx(0.0, abs=1e-12)


def test_single_point_mass_is_chi2():
    rng = np.random.default_rng(3)
    dim, sigma = 7, 1.3
    eps = rng.standard_normal((100, dim))
    h = h_point_mass(sigma * eps, np.zeros((1, dim)), sigma)
    np.testing.assert_allclose(h, (np.sum(eps**2, axis=1) - dim) / np.sqrt(2 * dim), rtol=1e-12)


# -- normality test ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_normality_test_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    for x in (rng.standard_normal(300), rng.exponential(size=300), rng.standard_t(5, size=1000)):
        ours = normality_test(x)
        ref = stats.normaltest(x)
        assert ours.statistic == pytest.approx(ref.statistic, rel=1e-10)
        assert ours.pvalue == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-300)


def test_normal_samples_rejected_at_nominal_rate():
    rng = np.random.default_rng(4)
    rejections = np.mean([normality_test(rng.standard_normal(500)).pvalue < 0.05 for _ in range(400)])
    assert 0.01 <= rejections <= 0.12


def test_skewed_samples_rejected():
    assert normality_test(np.random.default_rng(5).exponential(size=5000)).pvalue < 1e-6


def test_degenerate_and_small_samples():
    res = normality_test(np.full(100, 2.5))
    assert res.degenerate and res.pvalue == 0.0
    with pytest.raises(DomainError):
        normality_test(np.arange(5.0))
    with pytest.raises(DomainError):
        normality_test(np.r_[np.zeros(30), np.nan])


# -- reference cases -------------------------------------------------------------------


def test_chi2_case_low_dimension_rejected():
    rep = chi2_case_check(2, 16384, np.random.default_rng(6))
    assert rep.pvalue < 1e-6
    assert rep.mean == pytest.approx(0.0, abs=4 / np.sqrt(16384))
    assert rep.variance == pytest.approx(1.0, abs=0.1)


def test_chi2_case_moments_high_dimension():
    n = 16384
    rep = chi2_case_check(1024, n, np.random.default_rng(7))
    assert abs(rep.mean) < 4 / np.sqrt(n)
    assert rep.variance == pytest.approx(1.0, abs=0.06)


def test_isotropic_spectrum_reduces_to_chi2():
    rng = np.random.default_rng(8)
    eps_sq = rng.standard_normal((50, 30)) ** 2
    np.testing.assert_allclose(nonisotropic_h(np.full(30, 3.7), eps_sq), (eps_sq.sum(axis=1) - 30) / np.sqrt(60),
                               rtol=1e-12)


def test_dominant_eigenvalue_breaks_condition():
    spec = np.r_[100.0, np.ones(999)]
    rep = nonisotropic_case_check(spec, 4096, np.random.default_rng(9))
    assert not rep.condition_satisfied
    assert rep.max_weight > LINDEBERG_LIMIT
    assert rep.pvalue < 1e-6  # dominated by one chi^2_1 term


def test_slowly_decaying_spectrum_satisfies_condition():
    i = np.arange(1, 4097, dtype=float)
    rep = nonisotropic_case_check(i**-0.25, 4096, np.random.default_rng(10))
    assert rep.condition_satisfied
    assert rep.max_weight == pytest.approx(1.0 / np.sum(i**-0.5), rel=1e-12)
    assert abs(rep.mean) < 4 / np.sqrt(4096)
    assert rep.variance == pytest.approx(1.0, abs=0.1)
    # the harmonic spectrum is far from satisfying it
    assert np.max(1 / i**2) / np.sum(1 / i**2) > 0.6


def test_spectrum_validation():
    with pytest.raises(DomainError):
        nonisotropic_case_check(np.array([1.0, -1.0]), 100, np.random.default_rng(0))
    with pytest.raises(DomainError):
        nonisotropic_case_check(np.ones(3), 5, np.random.default_rng(0))


# -- mixture experiment --------------------------------------------------------------------


def test_skewness_decreases_with_dimension():
    med = []
    for dim in (16, 64, 256):
        med.append(np.median([stats.skew(mixture_h_samples(np.random.default_rng([r, dim]), 128, dim, 1.0, 4096)[0])
                              for r in range(3)]))
    assert med[0] > med[1] > med[2] > 0


def test_mixture_h_is_standardized():
    h, labels = mixture_h_samples(np.random.default_rng(11), 32, 256, 1.0, 8192)
    assert labels.shape == h.shape
    assert abs(h.mean()) < 0.1
    assert h.var() == pytest.approx(1.0, abs=0.15)
    with pytest.raises(DomainError):
        mixture_h_samples(np.random.default_rng(0), 0, 4, 1.0, 10)


def test_results_do_not_depend_on_workers():
    kw = dict(n_components=8, dims=(16, 32), sigmas=(0.5, 1.0), n_samples=256, seed=3, repeats=2)
    serial, s_sum = mixture_normality_experiment(workers=1, **kw)
    parallel, p_sum = mixture_normality_experiment(workers=2, **kw)
    assert serial == parallel and s_sum == p_sum
    assert len(serial) == 8 and len(s_sum) == 4
    assert all(s.repeats == 2 for s in s_sum)
