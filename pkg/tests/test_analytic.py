"""Closed-form layer: special functions, shape functions, drift formulas."""

import math

import numpy as np
import pytest
from scipy import integrate

from storval.analytic import (
    EULER_GAMMA,
    AnalyticInputs,
    TriggerSet,
    delta_identity_oracle,
    exp_integral_e1,
    gaussian_trigger_density,
    greeks,
    lognormal_lambda,
    mu_bar_storage,
    mu_bar_swing,
    mu_final_storage,
    phi_storage,
    phi_storage_approx,
    phi_swing,
    phi_table,
    time_shift,
    time_value_by_quadrature,
    time_value_storage,
    time_value_swing,
    two_factor_components,
)
from storval.curves import SinusoidSpec, TimeGrid, make_sinusoid
from storval.process import PriceProcessSpec


# ---------------------------------------------------------------------------
# E1
# ---------------------------------------------------------------------------


def quad_e1(z):
    val, _ = integrate.quad(lambda u: math.exp(-u) / u, z, np.inf, limit=400)
    return val


def test_e1_at_one_vs_quadrature():
    assert exp_integral_e1(1.0) == pytest.approx(quad_e1(1.0), rel=1e-10)
    assert exp_integral_e1(1.0) == pytest.approx(0.21938393439552026, rel=1e-12)


@pytest.mark.parametrize("z", [1e-6, 1e-3, 0.1, 0.5, 0.999, 1.0, 2.0, 10.0, 100.0, 700.0])
def test_e1_matches_scipy(z):
    from scipy.special import exp1

    assert exp_integral_e1(z) == pytest.approx(float(exp1(z)), rel=1e-10)


def test_e1_small_z_log_series():
    z = 1e-6
    assert abs(exp_integral_e1(z) + math.log(z) + EULER_GAMMA) < 2e-6


def test_e1_large_z_asymptotic():
    z = 500.0
    assert exp_integral_e1(z) * z * math.exp(z) == pytest.approx(1.0, rel=0.01)


def test_e1_domain_error():
    with pytest.raises(ValueError):
        exp_integral_e1(0.0)


# ---------------------------------------------------------------------------
# shape functions
# ---------------------------------------------------------------------------


def test_phi_storage_small_x_series():
    assert phi_storage(0.01) == pytest.approx(0.01**2 / 12.0, rel=0.05)


def test_phi_storage_argmax_and_level():
    xs = np.linspace(4.0, 6.0, 2001)
    vals = np.array([phi_storage(x) for x in xs])
    x_star = xs[np.argmax(vals)]
    assert 4.5 <= x_star <= 5.5
    assert 0.11 <= vals.max() <= 0.13


def test_phi_storage_large_x():
    assert phi_storage(100.0) * 100.0 / 2.0 == pytest.approx(1.0, abs=0.1)


def test_phi_storage_positive_unimodal():
    xs = np.logspace(-2, 2, 200)
    vals = np.array([phi_storage(x) for x in xs])
    assert np.all(vals > 0)
    peak = np.argmax(vals)
    assert np.all(np.diff(vals[: peak + 1]) > 0)
    assert np.all(np.diff(vals[peak:]) < 0)


def test_phi_storage_branch_continuity():
    lo, hi = phi_storage(1e-3 * 0.999), phi_storage(1e-3 * 1.001)
    assert lo == pytest.approx(hi, rel=1e-4)


def test_phi_storage_approx_tracks_exact():
    for x in np.logspace(math.log10(0.5), math.log10(50.0), 40):
        ratio = phi_storage_approx(x) / phi_storage(x)
        assert 0.8 <= ratio <= 1.25


def test_phi_storage_approx_k_limits():
    k0 = 0.9 - 0.4 * math.exp(0.0)
    assert k0 == pytest.approx(0.5)
    kinf = 0.9 - 0.4 * math.exp(-1000.0 / 18.0)
    assert kinf == pytest.approx(0.9)


def test_phi_swing_at_zero_exact():
    assert phi_swing(0.0) == 2.0


def test_phi_swing_value_at_one():
    assert phi_swing(1.0) == pytest.approx(math.exp(-2.0) + 1.0, rel=1e-12)


def test_phi_swing_small_slope():
    assert phi_swing(0.01) == pytest.approx(2.0 - 4.0 / 3.0 * 0.01, abs=1e-3)


def test_phi_swing_strictly_decreasing():
    xs = np.logspace(-3, 2, 100)
    vals = np.array([phi_swing(x) for x in xs])
    assert np.all(np.diff(vals) < 0)


# ---------------------------------------------------------------------------
# time-value formulas and drift consistency
# ---------------------------------------------------------------------------


BENCH = dict(dr=2.0, center=20.0, amplitude=5.0, t_end=1.0)


def test_time_value_zero_vol():
    inp = AnalyticInputs(sigma0=0.0, alpha=2.0, **BENCH)
    assert time_value_storage(inp) == 0.0


def test_time_value_maximum_vs_67pi():
    inp = AnalyticInputs(sigma0=0.2, alpha=5.0 / BENCH["t_end"], **BENCH)
    vt = time_value_storage(inp)
    approx = (
        BENCH["dr"] * BENCH["center"] ** 2 * 0.2**2 * BENCH["t_end"] ** 2
        / (67.0 * math.pi * BENCH["amplitude"])
    )
    assert vt == pytest.approx(approx, rel=0.05)


def test_time_value_small_alpha_asymptotic():
    alpha = 0.01
    inp = AnalyticInputs(sigma0=0.2, alpha=alpha, **BENCH)
    asym = (
        BENCH["dr"] * BENCH["center"] ** 2 * 0.2**2 * alpha**2 * BENCH["t_end"] ** 4
        / (96.0 * math.pi * BENCH["amplitude"])
    )
    assert time_value_storage(inp) == pytest.approx(asym, rel=0.05)


def test_swing_time_value_alpha_zero_maximum():
    inp = AnalyticInputs(kappa0=1.5, alpha=0.0, **BENCH)
    want = BENCH["dr"] * 1.5**2 * BENCH["t_end"] ** 2 / (
        4.0 * math.pi * BENCH["amplitude"]
    )
    assert time_value_swing(inp) == pytest.approx(want, rel=1e-12)


def test_swing_time_value_large_alpha():
    alpha = 500.0
    inp = AnalyticInputs(kappa0=1.5, alpha=alpha, **BENCH)
    asym = BENCH["dr"] * 1.5**2 * BENCH["t_end"] / (
        4.0 * math.pi * BENCH["amplitude"] * alpha
    )
    assert time_value_swing(inp) == pytest.approx(asym, rel=0.02)


def test_swing_kappa_zero():
    inp = AnalyticInputs(kappa0=0.0, alpha=1.0, **BENCH)
    assert time_value_swing(inp) == 0.0


def test_mu_final_vanishes_at_horizon():
    inp = AnalyticInputs(sigma0=0.3, alpha=2.0, **BENCH)
    assert mu_final_storage(1.0, inp) == 0.0
    assert mu_final_storage(0.999999, inp) == pytest.approx(0.0, abs=1e-6)


def test_mu_final_integrates_to_time_value():
    for alpha in (0.3, 2.0, 7.0):
        inp = AnalyticInputs(sigma0=0.25, alpha=alpha, **BENCH)
        val, _ = integrate.quad(lambda t: mu_final_storage(t, inp), 0.0, 1.0, limit=200)
        assert val == pytest.approx(time_value_storage(inp), rel=1e-6)


def test_mu_final_alpha_to_zero_series():
    inp_tiny = AnalyticInputs(sigma0=0.25, alpha=1e-8, **BENCH)
    # series branch value at x = alpha * tau
    t = 0.3
    tau = 1.0 - t
    pref = BENCH["dr"] * BENCH["center"] ** 2 * 0.25**2 / (
        2 * math.pi * BENCH["amplitude"]
    )
    x = 1e-8 * tau
    series = pref * tau * (x * x / 12.0)
    assert mu_final_storage(t, inp_tiny) == pytest.approx(series, rel=1e-3)


# ---------------------------------------------------------------------------
# trigger sums
# ---------------------------------------------------------------------------


def test_single_trigger_cancellation():
    trig = TriggerSet(times=[0.5], slopes=[-40.0], level=20.0)
    lam = lambda t, a, b: 2.5
    assert mu_bar_storage(0.0, trig, dr=2.0, lambda_fn=lam) == pytest.approx(0.0)
    swing = mu_bar_swing(0.0, trig, dr=2.0, lambda_fn=lam)
    assert swing == pytest.approx(0.5 * 2.0 * 2.5 / 40.0)


def test_mu_bar_empty_triggers():
    trig = TriggerSet(times=[0.25], slopes=[10.0], level=0.0)
    assert mu_bar_storage(0.9, trig, 1.0, lambda t, a, b: 1.0) == 0.0


def test_trigger_sum_integral_matches_closed_form():
    # sinusoid benchmark: quadrature over the trigger-sum drift vs mu_final
    sin = SinusoidSpec(20.0, 5.0, 8)
    triggers = TriggerSet.from_sinusoid(sin, t_end=1.0)
    pspec = PriceProcessSpec(kind="lognormal-1f", sigma0=0.25, alpha=2.0)
    lam = lognormal_lambda(pspec, 20.0)
    inp = AnalyticInputs(dr=2.0, center=20.0, amplitude=5.0, sigma0=0.25, alpha=2.0,
                         t_end=1.0)
    vt_sum = time_value_by_quadrature(triggers, 2.0, lam, 1.0, kind="storage")
    vt_formula = time_value_storage(inp)
    assert vt_sum == pytest.approx(vt_formula, rel=0.02)


def test_trigger_set_from_curve_matches_analytic():
    grid = TimeGrid(t_end=1.0, n_steps=256)
    sin = SinusoidSpec(20.0, 5.0, 4)
    curve = make_sinusoid(sin, grid)
    trig = TriggerSet.from_curve(curve, 20.0)
    comb = np.arange(5) * 0.25
    for t in trig.times:
        assert np.min(np.abs(comb - t)) < 1e-3
    w = sin.omega(1.0)
    assert np.allclose(np.abs(trig.slopes), 5.0 * w, rtol=0.01)


def test_correlation_linearity_two_factor():
    sin = SinusoidSpec(20.0, 5.0, 6)
    triggers = TriggerSet.from_sinusoid(sin, t_end=1.0)
    pspec = PriceProcessSpec(
        kind="lognormal-2f", kappa10=0.3, alpha1=5.0, kappa20=0.12, alpha2=0.05,
        rho=0.4,
    )
    comps = two_factor_components(pspec, 20.0)
    total = lognormal_lambda(pspec, 20.0)
    vt_total = time_value_by_quadrature(triggers, 2.0, total, 1.0)
    parts = [time_value_by_quadrature(triggers, 2.0, comps[k], 1.0) for k in comps]
    assert vt_total == pytest.approx(sum(parts), rel=1e-12)


def test_two_factor_long_term_negligible_for_storage():
    sin = SinusoidSpec(20.0, 5.0, 6)
    triggers = TriggerSet.from_sinusoid(sin, t_end=1.0)
    pspec = PriceProcessSpec(
        kind="lognormal-2f", kappa10=0.3, alpha1=5.0, kappa20=0.3, alpha2=0.05,
        rho=0.0,
    )
    comps = two_factor_components(pspec, 20.0)
    vt_short = time_value_by_quadrature(triggers, 2.0, comps["short"], 1.0)
    vt_long = time_value_by_quadrature(triggers, 2.0, comps["long"], 1.0)
    assert vt_long < 0.01 * vt_short
    # the same long-term component still contributes to a swing option
    vt_long_swing = time_value_by_quadrature(triggers, 2.0, comps["long"], 1.0,
                                             kind="swing")
    assert vt_long_swing > 0.0


def test_mu_bar_sum_close_to_integral_approximation():
    # uniform trigger spacing, slowly varying correlation: the summation and
    # its integral approximation agree within a few percent
    sin = SinusoidSpec(20.0, 5.0, 16)
    triggers = TriggerSet.from_sinusoid(sin, t_end=1.0)
    pspec = PriceProcessSpec(kind="lognormal-1f", sigma0=0.2, alpha=1.0)
    lam = lognormal_lambda(pspec, 20.0)
    inp = AnalyticInputs(dr=2.0, center=20.0, amplitude=5.0, sigma0=0.2, alpha=1.0,
                         t_end=1.0)
    t = 0.0
    got = mu_bar_storage(t, triggers, 2.0, lam)
    want = mu_final_storage(t, inp)
    assert got == pytest.approx(want, rel=0.05)


# ---------------------------------------------------------------------------
# delta identities, density, greeks, time shift
# ---------------------------------------------------------------------------


def test_gaussian_density_peak_and_tail():
    s = 2.0
    peak = gaussian_trigger_density(10.0, 10.0, s)
    assert peak == pytest.approx(1.0 / (s * math.sqrt(2 * math.pi)))
    tail = gaussian_trigger_density(16.0, 10.0, s)
    assert tail == pytest.approx(peak * math.exp(-4.5))


def test_gaussian_density_domain():
    with pytest.raises(ValueError):
        gaussian_trigger_density(1.0, 1.0, 0.0)


def test_gaussian_average_matches_trigger_sum():
    # quadrature of the averaged density times a slow function reproduces
    # sum f(T_i)/|F'(T_i)| when the time width stays below 0.3 dT
    sin = SinusoidSpec(20.0, 5.0, 4)
    t_end = 1.0
    w = sin.omega(t_end)
    price = lambda t: 20.0 + 5.0 * math.sin(w * t)
    sigma_price = 0.3 * (t_end / 4) * (5.0 * w)  # sigma_t = 0.3 dT exactly
    f = lambda t: 1.0 + 0.1 * t
    ts = np.linspace(-0.2, t_end + 0.2, 200_001)
    dens = np.array(
        [gaussian_trigger_density(20.0, price(t), sigma_price) * f(t) for t in ts]
    )
    lhs = float(np.trapezoid(dens, ts))
    triggers = TriggerSet.from_sinusoid(sin, t_end)
    rhs = float(np.sum([f(t) for t in triggers.times]) / (5.0 * w))
    assert lhs == pytest.approx(rhs, rel=0.03)


def test_delta_identity_a4():
    sin = SinusoidSpec(20.0, 5.0, 2)
    w = sin.omega(1.0)
    price = lambda t: 20.0 + 5.0 * math.sin(w * t)
    lhs, rhs = delta_identity_oracle(price, (0.0, 1.0), 20.0, lambda t: 1.0,
                                     width=5.0 / 100)
    assert rhs == pytest.approx(3.0 / (5.0 * w), rel=1e-6)
    assert lhs == pytest.approx(rhs, rel=0.01)


def test_delta_identity_zero_function():
    sin = SinusoidSpec(20.0, 5.0, 2)
    w = sin.omega(1.0)
    price = lambda t: 20.0 + 5.0 * math.sin(w * t)
    lhs, rhs = delta_identity_oracle(price, (0.0, 1.0), 20.0, lambda t: 0.0,
                                     width=0.05)
    assert lhs == 0.0 and rhs == 0.0


def test_delta_identity_a5_sinusoid_vanishes():
    # second derivative of the sinusoid vanishes at the crossings, so the
    # derivative identity evaluates to zero for constant f
    sin = SinusoidSpec(20.0, 5.0, 2)
    w = sin.omega(1.0)
    price = lambda t: 20.0 + 5.0 * math.sin(w * t)
    lhs, rhs = delta_identity_oracle(price, (0.0, 1.0), 20.0, lambda t: 2.0,
                                     width=0.02, derivative=True)
    scale = 3.0 / (5.0 * w) / 0.02  # magnitude of the A4 identity over width
    assert abs(rhs) < 1e-6 * scale
    assert abs(lhs) < 0.02 * scale


def test_greeks_delta_is_negative_exercise():
    from storval.curves import ForwardCurve
    from storval.intrinsic import StorageSpec, solve_trigger

    grid = TimeGrid(t_end=1.0, n_steps=64)
    curve = make_sinusoid(SinusoidSpec(20.0, 5.0, 4), grid)
    spec = StorageSpec(q_min=0.0, q_max=10.0, r_min=-1.0, r_max=1.0,
                       q_start=5.0, q_end=5.0)
    sol = solve_trigger(curve, spec)
    pspec = PriceProcessSpec(kind="lognormal-1f", sigma0=0.2, alpha=1.0)
    delta, gamma = greeks(sol, curve, lognormal_lambda(pspec, 20.0), dr=2.0)
    assert np.array_equal(delta, -sol.trajectory.rates)
    assert gamma >= 0.0


def test_greeks_gamma_nonnegative_random_triggers():
    rng = np.random.default_rng(77)
    pspec = PriceProcessSpec(kind="lognormal-1f", sigma0=0.3, alpha=2.0)
    for _ in range(100):
        m = int(rng.integers(1, 9))
        times = np.sort(rng.uniform(0.05, 1.0, m))
        while np.any(np.diff(times) < 1e-4):
            times = np.sort(rng.uniform(0.05, 1.0, m))
        slopes = rng.uniform(5.0, 80.0, m) * rng.choice([-1.0, 1.0], m)
        trig = TriggerSet(times, slopes, 20.0)
        lam = lognormal_lambda(pspec, 20.0)
        assert mu_bar_storage(0.0, trig, 2.0, lam) >= -1e-12


def test_time_shift_values():
    assert time_shift(0.0, -3.0) == 0.0
    assert time_shift(1.0, -2.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        time_shift(1.0, 0.0)


def test_phi_table_columns():
    tab = phi_table(np.array([0.5, 5.0]))
    assert tab.shape == (2, 4)
    assert tab[1, 1] == pytest.approx(phi_storage(5.0))
    assert tab[0, 3] == pytest.approx(phi_swing(0.5))
