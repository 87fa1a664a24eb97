from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densityguide import ConfigError, DomainError, NoiseSchedule

SCHEDULES = {"vp": NoiseSchedule.vp(), "ve": NoiseSchedule.ve(), "fm": NoiseSchedule.fm()}


def sigmoid(z):
    # Independent oracle, written without scipy.
    return 1.0 / (1.0 + np.exp(-z))


def test_vp_equal_alpha_sigma_at_zero_log_snr():
    s = NoiseSchedule.vp()
    t = s.inv_log_snr(0.0)
    assert s.alpha_sigma(t) == pytest.approx((1 / np.sqrt(2), 1 / np.sqrt(2)), abs=1e-12)
    assert t == pytest.approx(0.5, abs=1e-12)


def test_fm_symmetry_point():
    s = NoiseSchedule.fm()
    t = 0.5 / s.sigma_max * s.T
    assert s.alpha_sigma(t) == pytest.approx((0.5, 0.5), abs=1e-15)
    assert s.log_snr(t) == pytest.approx(0.0, abs=1e-12)


def test_vp_terminal_variance():
    s = NoiseSchedule.vp()
    _, sigma = s.alpha_sigma(s.T)
    assert sigma**2 == pytest.approx(sigmoid(10.0), rel=1e-14)
    assert sigma**2 == pytest.approx(0.9999546, abs=1e-7)


def test_vp_inverse_log_snr_one():
    s = NoiseSchedule.vp(T=2.0)
    assert s.inv_log_snr(1.0) == pytest.approx(0.45 * 2.0, abs=1e-12)


def test_ve_has_zero_drift():
    s = NoiseSchedule.ve()
    f, g2 = s.drift_coeffs(np.linspace(0.01, 1.0, 50))
    assert np.all(f == 0.0)
    assert np.all(g2 > 0)


def _fd_coeffs(s, t, h=1e-5):
    (a1, s1), (a0, s0) = s.alpha_sigma(t + h), s.alpha_sigma(t - h)
    dlog_alpha = (np.log(a1) - np.log(a0)) / (2 * h)
    dlog_ratio = (np.log(s1 / a1) - np.log(s0 / a0)) / (2 * h)
    _, sig = s.alpha_sigma(t)
    return dlog_alpha, 2 * sig**2 * dlog_ratio


@pytest.mark.parametrize("kind", ["vp", "ve", "fm"])
def test_drift_coeffs_match_finite_differences(kind):
    s = SCHEDULES[kind]
    rng = np.random.default_rng(0)
    for t in rng.uniform(0.01, 0.99, 100):
        f, g2 = s.drift_coeffs(t)
        f_fd, g2_fd = _fd_coeffs(s, t)
        assert g2 >= 0
        assert g2 == pytest.approx(g2_fd, rel=1e-5)
        if kind == "ve":
            assert f == 0.0 and abs(f_fd) < 1e-12
        else:
            assert f == pytest.approx(f_fd, rel=1e-5)


def test_fm_coefficients_at_symmetry_point():
    s = NoiseSchedule.fm()
    t = 0.5 / s.sigma_max
    f, g2 = s.drift_coeffs(t)
    # alpha = 1 - c t, so f = -c / alpha = -2c here.
    assert f == pytest.approx(-2 * s.sigma_max, rel=1e-12)
    assert g2 >= 0
    assert (f, g2) == pytest.approx(_fd_coeffs(s, t), rel=1e-6)


@pytest.mark.parametrize("kind", ["vp", "ve", "fm"])
def test_kind_identities_at_random_times(kind):
    s = SCHEDULES[kind]
    t = np.random.default_rng(1).uniform(1e-6, 1.0, 1000)
    a, sig = s.alpha_sigma(t)
    assert np.all(a > 0) and np.all(sig > 0)
    if kind == "vp":
        np.testing.assert_allclose(a**2 + sig**2, 1.0, atol=1e-12)
    elif kind == "fm":
        np.testing.assert_allclose(a + sig, 1.0, atol=1e-12)
    else:
        assert np.all(a == 1.0)


@pytest.mark.parametrize("kind", ["vp", "ve", "fm"])
def test_round_trip_log_snr(kind):
    s = SCHEDULES[kind]
    t = 0.37 * s.T
    assert abs(s.inv_log_snr(s.log_snr(t)) - t) < 1e-9


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.sampled_from(["vp", "ve", "fm"]))
@settings(max_examples=200, deadline=None)
def test_log_snr_decreasing_and_sigma_increasing(t1, t2, kind):
    s = SCHEDULES[kind]
    if t1 == t2:
        return
    lo, hi = min(t1, t2), max(t1, t2)
    assert s.log_snr(lo) > s.log_snr(hi)
    assert s.alpha_sigma(lo)[1] < s.alpha_sigma(hi)[1]


@given(st.floats(1e-3, 1.0), st.sampled_from(["vp", "ve", "fm"]))
@settings(max_examples=100, deadline=None)
def test_round_trip_property(t, kind):
    s = SCHEDULES[kind]
    assert abs(s.inv_log_snr(s.log_snr(t)) - t) < 1e-9


@pytest.mark.parametrize("t", [0.0, -0.1, 1.0001, np.nan])
def test_time_outside_domain_rejected(t):
    with pytest.raises(DomainError):
        NoiseSchedule.vp().alpha_sigma(t)


def test_log_snr_out_of_range_rejected():
    s = NoiseSchedule.vp()
    with pytest.raises(DomainError):
        s.inv_log_snr(10.5)
    with pytest.raises(DomainError):
        s.inv_log_snr(-10.5)


def test_config_round_trip_and_validation():
    for s in SCHEDULES.values():
        assert NoiseSchedule.from_config(s.to_config()) == s
    with pytest.raises(ConfigError):
        NoiseSchedule.from_config({"kind": "cosine"})
    with pytest.raises(ConfigError):
        NoiseSchedule.from_config({"kind": "vp", "sigma_max": 3})
    with pytest.raises(ConfigError):
        NoiseSchedule.fm(sigma_max=1.0)
    with pytest.raises(ConfigError):
        NoiseSchedule.vp(lsnr_max=-1, lsnr_min=1)
