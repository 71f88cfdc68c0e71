import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlct.schedule import (
    NoiseSchedule,
    ScheduleError,
    alpha,
    dpmpp_coeffs,
    dpmpp_step,
    drift_diffusion,
    karras_grid,
    log_snr,
    perturb,
    sigma,
    skip_coeffs,
)
from oracle_values import (
    C_SKIP_EPS,
    KARRAS_I25,
    LOG_ALPHA_LOW_BETA_T1,
    LOG_ALPHA_VP_T05,
    LOG_ALPHA_VP_T1,
    LOG_SNR_VP_T05,
)

VP = NoiseSchedule(0.1, 20.0)
LOW_BETA = NoiseSchedule(0.002, 1.0)
unit_t = st.floats(0.0, 1.0, allow_nan=False)


# alpha / sigma / log_snr

def test_alpha_at_zero_is_one():
    assert alpha(VP, 0.0) == 1.0


def test_alpha_vp_t1_matches_rk4():
    assert abs(alpha(VP, 1.0) - math.exp(LOG_ALPHA_VP_T1)) <= 1e-8
    assert alpha(VP, 1.0) == pytest.approx(math.exp(-5.025), rel=1e-14)


def test_alpha_low_beta_t1_matches_rk4():
    assert abs(alpha(LOW_BETA, 1.0) - math.exp(LOG_ALPHA_LOW_BETA_T1)) <= 1e-8
    assert alpha(LOW_BETA, 1.0) == pytest.approx(math.exp(-0.2505), rel=1e-14)


@pytest.mark.parametrize("t", [-1e-9, 1.0 + 1e-9, float("nan")])
def test_alpha_domain(t):
    with pytest.raises(ScheduleError):
        alpha(VP, t)
    with pytest.raises(ScheduleError):
        sigma(VP, t)


def test_sigma_values():
    assert sigma(VP, 0.0) == 0.0
    assert sigma(VP, 1.0) == pytest.approx(math.sqrt(1 - math.exp(-10.05)), rel=1e-14)
    assert sigma(VP, 1.0) == pytest.approx(math.sqrt(1 - math.exp(2 * LOG_ALPHA_VP_T1)), abs=1e-8)


def test_log_snr_zero_at_crossing():
    # alpha = sigma  <=>  log alpha = -log(2)/2
    t = VP.time_from_log_snr(0.0)
    assert alpha(VP, t) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert log_snr(VP, t) == pytest.approx(0.0, abs=1e-12)


def test_log_snr_vp_half_matches_oracle():
    assert VP.log_alpha(0.5) == pytest.approx(LOG_ALPHA_VP_T05, abs=1e-12)
    assert log_snr(VP, 0.5) == pytest.approx(LOG_SNR_VP_T05, abs=1e-10)


def test_log_snr_infinite_at_zero():
    with pytest.raises(ScheduleError):
        log_snr(VP, 0.0)


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_log_snr_decreasing(t1, t2):
    lo, hi = sorted((t1, t2))
    if hi - lo < 1e-9:
        return
    assert log_snr(VP, lo) > log_snr(VP, hi)
    assert log_snr(LOW_BETA, lo) > log_snr(LOW_BETA, hi)


@given(st.floats(-8.0, 8.0))
def test_time_from_log_snr_roundtrip(lam):
    t = VP.time_from_log_snr(lam)
    if 1e-4 < t <= 1.0:
        assert log_snr(VP, t) == pytest.approx(lam, abs=1e-8)


def test_variance_preserving_random_times():
    rng = np.random.default_rng(0)
    for s in (VP, LOW_BETA):
        for t in rng.uniform(0, 1, 1000):
            a, sg = s.alpha(t), s.sigma(t)
            assert abs(a * a + sg * sg - 1.0) <= 1e-12
            assert 0 < a <= 1 and 0 <= sg < 1


@given(unit_t, unit_t)
def test_alpha_sigma_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    if hi - lo < 1e-9:
        return  # below double resolution of alpha near 1
    assert alpha(VP, lo) > alpha(VP, hi)
    assert sigma(VP, lo) < sigma(VP, hi)


def test_alpha_sigma_vectorised_matches_scalar():
    ts = np.linspace(0, 1, 37)
    a, s = VP.alpha_sigma(ts)
    assert np.allclose(a, [VP.alpha(t) for t in ts], rtol=0, atol=1e-15)
    assert np.allclose(s, [VP.sigma(t) for t in ts], rtol=0, atol=1e-15)


def test_schedule_construction_rules():
    with pytest.raises(ScheduleError):
        NoiseSchedule(0.0, 1.0)
    with pytest.raises(ScheduleError):
        NoiseSchedule(2.0, 1.0)


# drift / diffusion

def test_drift_at_origin():
    f, _ = drift_diffusion(VP, 0.0)
    assert f == -0.05


def test_drift_vp_half():
    f, _ = drift_diffusion(VP, 0.5)
    assert f == pytest.approx(-5.025, abs=1e-15)


def _fd_g2(s, t, h=1e-6):
    # finite differences of sigma^2 and log alpha
    dsig2 = (s.sigma(t + h) ** 2 - s.sigma(t - h) ** 2) / (2 * h)
    f = (s.log_alpha(t + h) - s.log_alpha(t - h)) / (2 * h)
    return dsig2 - 2 * f * s.sigma(t) ** 2


@pytest.mark.parametrize("t", [0.01, 0.1, 0.37, 0.5, 0.9, 0.99])
def test_g2_finite_difference_oracle(t):
    for s in (VP, LOW_BETA):
        assert _fd_g2(s, t) == pytest.approx(s.beta(t), abs=1e-9 * max(1.0, s.beta(t)) * 10)
        _, g2 = s.drift_diffusion(t)
        assert abs(g2 - s.beta(t)) <= 1e-9


def test_g2_identity_random_times():
    rng = np.random.default_rng(1)
    for s in (VP, LOW_BETA):
        for t in rng.uniform(0, 1, 1000):
            _, g2 = s.drift_diffusion(t)
            assert abs(g2 - s.beta(t)) <= 1e-8


# karras grid

def test_karras_endpoints():
    g = karras_grid(0.002, 1.0, 50, 7.0)
    assert g.times[0] == 0.002 and g.times[-1] == 1.0
    assert len(g) == 50


def test_karras_rho_one_is_uniform():
    g = karras_grid(0.002, 1.0, 11, 1.0)
    assert np.allclose(g.times, np.linspace(0.002, 1.0, 11), atol=1e-15)


def test_karras_interior_matches_extended_precision():
    g = karras_grid(0.002, 1.0, 50, 7.0)
    assert g.times[24] == pytest.approx(KARRAS_I25, rel=1e-13)


@pytest.mark.parametrize("N", [2, 3, 10, 50, 200])
@pytest.mark.parametrize("rho", [0.5, 1.0, 3.0, 7.0, 12.0])
def test_karras_lattice_monotone_endpoint_exact(N, rho):
    g = karras_grid(0.002, 1.0, N, rho)
    assert g.times[0] == 0.002 and g.times[-1] == 1.0
    assert np.all(np.diff(g.times) > 0)


@pytest.mark.parametrize("args", [(0.0, 1.0, 10, 7), (1.0, 0.5, 10, 7), (0.002, 1.0, 1, 7), (0.002, 1.0, 10, 0.0)])
def test_karras_bad_arguments(args):
    with pytest.raises(ScheduleError):
        karras_grid(*args)


# skip coefficients

def test_skip_at_zero():
    assert skip_coeffs(0.0, 0.5) == (1.0, 0.0)


def test_skip_symmetry_point():
    c_skip, _ = skip_coeffs(0.05, 0.5)
    assert c_skip == pytest.approx(0.5, abs=1e-15)


def test_skip_at_epsilon():
    c_skip, _ = skip_coeffs(0.002, 0.5)
    assert c_skip == pytest.approx(C_SKIP_EPS, rel=1e-14)
    assert c_skip == pytest.approx(0.9984, abs=1e-4)


@given(st.floats(0.0, 10.0), st.floats(0.01, 5.0))
def test_skip_ranges(t, eta):
    c_skip, c_out = skip_coeffs(t, eta)
    assert 0.0 <= c_skip <= 1.0 and 0.0 <= c_out <= 1.0
    s = 10 * t
    assert c_out**2 == pytest.approx(s * s / (s * s + eta * eta), abs=1e-12)


# perturb

def test_perturb_trivial_cases():
    rng = np.random.default_rng(2)
    x, z = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    assert np.array_equal(perturb(x, 0.0, z, VP), x)
    assert np.array_equal(perturb(x, 0.4, np.zeros_like(x), VP), VP.alpha(0.4) * x)
    with pytest.raises(ValueError):
        perturb(x, 0.4, z[:, :4], VP)


def test_perturb_monte_carlo():
    rng = np.random.default_rng(3)
    x = np.array([0.7, -0.2, 0.0])
    n = 100_000
    z = rng.standard_normal((n, 3))
    out = perturb(np.broadcast_to(x, (n, 3)), 0.5, z, VP)
    a, s = VP.alpha(0.5), VP.sigma(0.5)
    se_mean = s / math.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - a * x) <= 3 * se_mean)
    # var of the sample variance for a Gaussian is 2 s^4 / (n - 1)
    se_var = math.sqrt(2.0 / (n - 1)) * s * s
    assert np.all(np.abs(out.var(axis=0, ddof=1) - s * s) <= 3 * se_var)


# first-order data-prediction step

def test_dpmpp_degenerate_step():
    x = np.array([0.3, -1.2, 2.0])
    t = 0.5
    t_prev = VP.time_from_log_snr(VP.log_snr(t) + 1e-8)
    out = dpmpp_step(x, t, t_prev, np.array([5.0, 5.0, 5.0]), VP)
    assert np.linalg.norm(out - x) <= 1e-6 * np.linalg.norm(x)


def test_dpmpp_zero_prediction_is_scaling():
    x = np.array([0.3, -1.2, 2.0])
    out = dpmpp_step(x, 0.6, 0.2, np.zeros(3), VP)
    assert np.array_equal(out, VP.sigma(0.2) / VP.sigma(0.6) * x)


def test_dpmpp_ordering_error():
    with pytest.raises(ScheduleError):
        dpmpp_step(np.zeros(2), 0.3, 0.3, np.zeros(2), VP)
    with pytest.raises(ScheduleError):
        dpmpp_step(np.zeros(2), 0.3, 0.4, np.zeros(2), VP)


def _singleton_error(s, x_star, x_T, grid):
    T = grid.times[-1]
    x = x_T.copy()
    worst = 0.0
    for t, t_prev in zip(grid.times[:0:-1], grid.times[-2::-1]):
        x = dpmpp_step(x, t, t_prev, x_star, s)
        closed = s.alpha(t_prev) * x_star + s.sigma(t_prev) / s.sigma(T) * (x_T - s.alpha(T) * x_star)
        worst = max(worst, float(np.abs(x - closed).max()))
    return worst


def test_dpmpp_singleton_trajectory_exact():
    rng = np.random.default_rng(4)
    grid = karras_grid(0.002, 1.0, 50, 7.0)
    x_star = rng.uniform(-1, 1, 8)
    x_T = rng.standard_normal(8)
    assert _singleton_error(VP, x_star, x_T, grid) <= 1e-10
    assert _singleton_error(LOW_BETA, x_star, x_T, grid) <= 1e-10


def test_dpmpp_coeffs_match_step():
    t = np.array([0.9, 0.3, 0.05])
    tp = np.array([0.5, 0.2, 0.002])
    a, b = dpmpp_coeffs(t, tp, VP)
    x, x0 = np.array([0.4, -0.1, 1.3]), np.array([0.2, 0.9, -0.5])
    for i in range(3):
        ref = dpmpp_step(x[i], t[i], tp[i], x0[i], VP)
        assert a[i] * x[i] + b[i] * x0[i] == pytest.approx(ref, abs=1e-14)


@settings(max_examples=50)
@given(st.integers(2, 80), st.floats(0.5, 10.0))
def test_grid_property_lattice(N, rho):
    try:
        g = karras_grid(0.002, 1.0, N, rho)
    except ScheduleError:
        return  # grid collapses numerically for extreme (N, rho); rejected by construction
    assert g.times[0] == 0.002 and g.times[-1] == 1.0
    assert np.all(np.diff(g.times) > 0)


def test_named_schedules():
    from mlct.schedule import SCHEDULES

    assert (SCHEDULES["vp"].beta0, SCHEDULES["vp"].beta1) == (0.1, 20.0)
    assert (SCHEDULES["low_beta"].beta0, SCHEDULES["low_beta"].beta1) == (0.002, 1.0)
    # the low-beta schedule leaves most of the signal at t=1
    assert SCHEDULES["low_beta"].alpha(1.0) > 0.75 > 0.01 > SCHEDULES["vp"].alpha(1.0)
