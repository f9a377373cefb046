import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionphoton import phase as P
from ionphoton.phase import DelayDistribution, SuperpositionPhase

TP = 2 * math.pi


def test_xx_expectation_examples():
    assert P.xx_expectation(SuperpositionPhase(0.0, 0.0)) == pytest.approx(1.0)
    assert P.xx_expectation(SuperpositionPhase(math.pi, 0.0)) == pytest.approx(-1.0)
    assert P.xx_expectation(SuperpositionPhase(0.2, math.pi / 2 - 0.2)) == pytest.approx(
        0.0, abs=1e-15)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-20, 20))
def test_phase_period_and_composition(phi, a, b):
    s = SuperpositionPhase(phi, a)
    assert 0 <= s.phi < TP and 0 <= s.phi_m < TP
    assert P.xx_expectation(s) == pytest.approx(
        P.xx_expectation(SuperpositionPhase(phi, a + TP)), abs=1e-9)
    diff = s.shifted(b).total - P.wrap_phase(phi + a + b)
    assert abs(math.remainder(diff, TP)) < 1e-9


def test_zeeman_trivial_cases():
    g = DelayDistribution.gaussian(0.7)
    assert P.zeeman_mismatch_infidelity(g, 0.0) == 0.0
    assert P.zeeman_mismatch_infidelity(DelayDistribution.delta(), 5.0) == 0.0


def test_gaussian_quadrature_matches_closed_form_grid():
    deltas = np.linspace(0.2, TP * 0.2, 5)
    sigmas = np.linspace(0.1, 1.5, 4)
    for d in deltas:
        for s in sigmas:
            q = P.zeeman_mismatch_infidelity(DelayDistribution.gaussian(s), d)
            assert q == pytest.approx(P.gaussian_infidelity(s, d), abs=1e-8)


def test_worst_case_magnitude_at_200_khz():
    # a delay spread of about one microsecond gives the quarter-level worst case
    d = TP * 0.2
    s = 0.95
    eps = P.zeeman_mismatch_infidelity(DelayDistribution.gaussian(s), d)
    assert 0.23 <= eps <= 0.27


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(-10.0, 10.0))
def test_infidelity_bounds_and_parity(sigma, delta):
    g = DelayDistribution.gaussian(sigma)
    e = P.zeeman_mismatch_infidelity(g, delta)
    assert 0 <= e <= 1
    assert e == pytest.approx(P.zeeman_mismatch_infidelity(g, -delta), abs=1e-12)


def test_gaussian_infidelity_monotone_in_sigma():
    d = TP * 0.2
    sig = np.linspace(0, math.pi / (2 * d), 25)
    e = [P.zeeman_mismatch_infidelity(DelayDistribution.gaussian(s), d) for s in sig]
    assert np.all(np.diff(e) >= -1e-12)


def test_distribution_validation():
    with pytest.raises(P.DistributionError):
        DelayDistribution.empirical([])
    with pytest.raises(P.DistributionError):
        DelayDistribution.empirical([0.0, 1.0], [0.2, 0.2])
    with pytest.raises(P.DistributionError):
        DelayDistribution("density", density=lambda t: 2.0 * math.exp(-t * t / 2) /
                          math.sqrt(TP))
    with pytest.raises(P.DistributionError):
        DelayDistribution.gaussian(-1.0)
    ok = DelayDistribution("density", density=lambda t: math.exp(-t * t / 2) / math.sqrt(TP))
    assert P.zeeman_mismatch_infidelity(ok, 1.0) == pytest.approx(
        P.gaussian_infidelity(1.0, 1.0), abs=1e-8)


def test_samples_identical_delays_give_zero():
    pairs = [(0.1 * k, 0.1 * k + 6.0) for k in range(10)]
    assert P.infidelity_from_samples(pairs, TP * 0.2) == pytest.approx(0.0, abs=1e-15)


def test_samples_invariant_under_constant_shift():
    rng = np.random.default_rng(0)
    pairs = np.column_stack([rng.uniform(0, 1, 50), 6 + rng.uniform(0, 1, 50)])
    shifted = pairs + np.array([0.0, 0.37])
    a = P.infidelity_from_samples(pairs, TP * 0.2)
    b = P.infidelity_from_samples(shifted, TP * 0.2)
    assert a == pytest.approx(b, rel=1e-12)


def test_samples_errors():
    with pytest.raises(P.DistributionError):
        P.infidelity_from_samples([], 1.0)
    with pytest.raises(P.DistributionError):
        P.infidelity_from_samples([(0.0, 1.0)], 1.0)


def test_samples_match_gaussian_within_bootstrap_error():
    rng = np.random.default_rng(7)
    sigma, d, n = 0.8, TP * 0.2, 4000
    t1 = rng.normal(0, sigma / math.sqrt(2), n)
    t2 = 6 + rng.normal(0, sigma / math.sqrt(2), n)
    pairs = np.column_stack([t1, t2])
    est = P.infidelity_from_samples(pairs, d)
    boot = [P.infidelity_from_samples(pairs[rng.integers(0, n, n)], d) for _ in range(200)]
    assert abs(est - P.gaussian_infidelity(sigma, d)) <= 3 * np.std(boot)


# --------------------------------------------------------------------------
# Phase-scan fitting


def test_fit_noiseless():
    x = np.linspace(0, TP, 12, endpoint=False)
    fit = P.fit_phase_scan(np.column_stack([x, 0.9 * np.sin(x + 0.3)]))
    assert fit.amplitude == pytest.approx(0.9, abs=1e-9)
    assert fit.phase == pytest.approx(0.3, abs=1e-9)
    assert fit.residual_rms < 1e-12 and fit.phase_identifiable


def test_fit_noise_coverage():
    rng = np.random.default_rng(3)
    x = np.linspace(0, TP, 24, endpoint=False)
    hit_a = hit_p = 0
    n = 1000
    for _ in range(n):
        y = 0.9 * np.sin(x + 0.3) + rng.normal(0, 0.05, x.size)
        fit = P.fit_phase_scan(np.column_stack([x, y]))
        hit_a += abs(fit.amplitude - 0.9) <= 3 * fit.amplitude_error
        hit_p += abs(fit.phase - 0.3) <= 3 * fit.phase_error
    # 3-sigma coverage is 99.7 %; allow binomial slack
    assert hit_a / n >= 0.985 and hit_p / n >= 0.985


def test_fit_all_zero_flags_unidentifiable_phase():
    x = np.linspace(0, TP, 8, endpoint=False)
    fit = P.fit_phase_scan(np.column_stack([x, np.zeros_like(x)]))
    assert fit.amplitude == 0.0
    assert not fit.phase_identifiable and math.isnan(fit.phase)


def test_fit_rejects_degenerate_scans():
    with pytest.raises(P.ScanError):
        P.fit_phase_scan([(0, 0), (0.1, 0), (0.2, 0), (0.3, 0.1)])
    with pytest.raises(P.ScanError):
        P.fit_phase_scan([(0, 0), (3, 0), (6, 0)])
