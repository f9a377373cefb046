import math
import warnings

import numpy as np
import pytest

from ionphoton import atomic, sequence as S
from ionphoton.dynamics import TWO_PI, BichromaticDrive, ConfigurationError, DriveTone, \
    SystemParams
from ionphoton.atomic import Term
from ionphoton.sequence import (BichromaticPhotonGeneration, ErrorToggles, Initialize, Wait)


@pytest.fixture(scope="module")
def calibrated():
    return S.calibrate(S.protocol_config())


@pytest.fixture(scope="module")
def pair(calibrated):
    return S.conditional_two_photon_state(calibrated)


# --------------------------------------------------------------------------
# Initialization and configuration


def test_initialization_pure_target():
    cfg = S.protocol_config()
    rho = S.run_initialization(cfg)
    i = cfg.space.index(S.INITIAL_LEVEL.index)
    assert rho[i, i] == 1.0
    assert np.count_nonzero(rho) == 1


def test_initialization_fidelity_and_normalization():
    target = atomic.level("S1/2", -0.5)
    cfg = S.protocol_config().replace(steps=(Initialize(target, 0.95),)
                                      + S.protocol_config().steps[1:])
    pops = S.initial_populations(cfg)
    assert pops[target] == pytest.approx(0.95)
    assert set(pops) == {target, atomic.level("S1/2", 0.5)}
    for f in (0.0, 0.3, 0.95, 1.0):
        for policy in ("neighbors", "manifold"):
            c = S.protocol_config(init_fidelity=f, error_population=policy)
            assert np.trace(S.run_initialization(c)).real == pytest.approx(1.0, abs=1e-15)
    pops = S.initial_populations(S.protocol_config(init_fidelity=0.9,
                                                   error_population="manifold"))
    assert len(pops) == 4


def test_step_validation():
    with pytest.raises(ValueError):
        Initialize(S.INITIAL_LEVEL, 1.2)
    with pytest.raises(ValueError):
        Wait(-1.0)
    drive = S.protocol_config().stage(1).drive
    with pytest.raises(ValueError):
        BichromaticPhotonGeneration(drive, 0.5)
    cfg = S.protocol_config()
    bad = cfg.replace(steps=cfg.steps[1:2] + cfg.steps[:1] + cfg.steps[2:])
    with pytest.raises(ConfigurationError):
        S.timeline(bad)


def test_timeline_matches_separation():
    tl = S.timeline(S.protocol_config())
    assert [(t.start, t.end) for t in tl] == [(0.0, 3.0), (6.0, 9.0)]
    assert tl[1].drive.envelope.start == 6.0


# --------------------------------------------------------------------------
# Balance calibration


def test_calibration_balances_both_stages(calibrated):
    for stage in (1, 2):
        assert abs(S.balance_imbalance(calibrated, stage)) < 1e-3
    ratio = calibrated.stage(1).drive.tone_b.rabi / calibrated.stage(1).drive.tone_a.rabi
    assert abs(ratio - 1) > 0.05


def test_calibration_reproducible():
    cfg = S.protocol_config()
    a = S.calibrate_balance(cfg, 1)
    S.clear_caches()
    b = S.calibrate_balance(cfg, 1)
    assert b.tone_b.rabi == pytest.approx(a.tone_b.rabi, rel=1e-6)


def test_calibration_of_mirror_symmetric_paths_gives_unit_ratio():
    cfg = S.protocol_config().replace(
        params=SystemParams.from_mhz(field_gauss=0.0, cavity_detuning_mhz_over_2pi=-60.0))
    rabi = TWO_PI * 17.0
    ta = DriveTone(Term.D5_2, Term.P3_2, +1, rabi, atomic.level("D5/2", -1.5),
                   atomic.level("D5/2", 0.5))
    tb = DriveTone(Term.D5_2, Term.P3_2, -1, 0.8 * rabi, atomic.level("D5/2", 1.5),
                   atomic.level("D5/2", -0.5))
    cfg = cfg.with_drive(2, BichromaticDrive(ta, tb, cfg.stage(2).drive.envelope))
    d = S.calibrate_balance(cfg, 2)
    assert d.tone_b.rabi / d.tone_a.rabi == pytest.approx(1.0, abs=1e-6)


def test_calibration_fails_when_tone_off():
    cfg = S.protocol_config().scaled(2, 0.0)
    with pytest.raises(S.CalibrationError):
        S.calibrate_balance(cfg, 2)


# --------------------------------------------------------------------------
# Two-photon state


def _assert_density(rho):
    assert np.allclose(rho, rho.conj().T, atol=1e-12)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-8)
    assert np.linalg.eigvalsh(rho).min() >= -1e-8


def test_pair_state_is_valid(pair):
    _assert_density(pair.rho)
    assert 0 < pair.efficiency < 1
    assert pair.efficiency == pytest.approx(np.prod(pair.stage_efficiencies), rel=1e-9)


def test_pair_diagonals_under_balance(pair):
    d = np.real(np.diag(pair.rho))
    assert d[1] == pytest.approx(0.5, abs=0.01)
    assert d[2] == pytest.approx(0.5, abs=0.01)
    assert d[0] + d[3] <= 0.02


def test_double_emission_guard(pair):
    assert pair.double_emission < 1e-3


def test_ion_photon_trace_plus_leakage(pair):
    ip = pair.ion_photon
    assert np.trace(ip.rho).real + ip.leakage == pytest.approx(1.0, abs=1e-8)
    d = np.real(np.diag(ip.rho))
    # sigma+ heralds D, sigma- heralds D'
    assert d[0] == pytest.approx(0.5, abs=1e-3) and d[3] == pytest.approx(0.5, abs=1e-3)


def test_ideal_limit_without_stark_asymmetry():
    cfg = S.calibrate(S.protocol_config(stage2_rabi_mhz=10.0,
                                        toggles=ErrorToggles(stark_asymmetry=False)))
    st = S.conditional_two_photon_state(cfg)
    assert st.best_bell_fidelity() >= 0.99


def test_stage_two_off_gives_zero_efficiency(calibrated):
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        st = S.conditional_two_photon_state(calibrated.scaled(2, 0.0))
    assert st.efficiency == 0.0 and st.rho is None
    assert any(issubclass(x.category, S.LowEfficiencyWarning) for x in w)
    assert math.isnan(st.best_bell_fidelity())


@pytest.mark.parametrize("tone, sign", [("a", 1), ("b", -1)])
def test_phase_covariance(calibrated, pair, tone, sign):
    delta = 0.7
    p0 = getattr(calibrated.stage(2).drive, "tone_" + tone).phase
    rho = S.conditional_two_photon_state(calibrated.with_phase(2, tone, p0 + delta)).rho
    ratio = rho[2, 1] / pair.rho[2, 1]
    assert ratio == pytest.approx(np.exp(1j * sign * delta), abs=1e-8)
    assert np.max(np.abs(np.diag(rho) - np.diag(pair.rho))) < 1e-8


@pytest.mark.parametrize("target", ["psi+", "psi-"])
def test_phase_lock_reaches_target(calibrated, pair, target):
    locked = S.calibrate_phase(calibrated, target)
    st = S.conditional_two_photon_state(locked)
    assert st.fidelity(target) == pytest.approx(pair.best_bell_fidelity(), abs=1e-6)
    assert abs(math.remainder(st.coherence_phase() - S.BELL_PHASES[target], TWO_PI)) < 1e-6


def test_phase_lock_rejects_unknown_target(calibrated):
    with pytest.raises(ConfigurationError):
        S.calibrate_phase(calibrated, "phi+")


def test_valid_density_across_toggles(calibrated):
    for tog in (ErrorToggles(stark_asymmetry=False), ErrorToggles(drift=True),
                ErrorToggles(zeeman_mismatch=TWO_PI * 0.2),
                ErrorToggles(zeeman_mismatch=TWO_PI * 0.2, zeeman_model="detuning")):
        _assert_density(S.conditional_two_photon_state(calibrated.replace(toggles=tog)).rho)


def test_drift_costs_its_infidelity(calibrated, pair):
    st = S.conditional_two_photon_state(
        calibrated.replace(toggles=ErrorToggles(drift=True, drift_infidelity=0.01)))
    loss = pair.best_bell_fidelity() - st.best_bell_fidelity()
    assert loss == pytest.approx(0.02 * abs(pair.rho[1, 2]), rel=1e-9)


def test_efficiency_monotone_in_stage_two_rabi(calibrated):
    effs = [S.conditional_two_photon_state(calibrated.scaled(2, s)).stage_efficiencies[1]
            for s in (0.25, 0.5, 0.75, 1.0)]
    assert np.all(np.diff(effs) > 0)


def test_larger_photon_cutoff_changes_little(calibrated, pair):
    st = S.conditional_two_photon_state(calibrated.replace(n_max=2))
    # stage 1 never holds two photons in one mode
    assert np.max(np.abs(st.ion_photon.rho - pair.ion_photon.rho)) < 1e-4
    assert st.stage_efficiencies[0] == pytest.approx(pair.stage_efficiencies[0], rel=1e-4)
    # stage 2 can refill a mode before it empties; a 1e-3 effect on the pair
    assert np.max(np.abs(st.rho - pair.rho)) < 1e-3
    assert st.efficiency == pytest.approx(pair.efficiency, rel=2e-3)
    assert st.best_bell_fidelity() == pytest.approx(pair.best_bell_fidelity(), abs=2e-4)


# --------------------------------------------------------------------------
# Photon shapes


@pytest.fixture(scope="module")
def shapes(calibrated):
    return S.photon_shape(calibrated, 1), S.photon_shape(calibrated, 2)


def test_shape_normalization_and_balance(shapes):
    for sh in shapes:
        assert sh.area("sigma+") + sh.area("sigma-") == pytest.approx(1.0, abs=1e-6)
        assert sh.area("sigma+") == pytest.approx(0.5, abs=1e-3)
        assert sh.area("sigma-") == pytest.approx(0.5, abs=1e-3)
        assert np.all(sh.total() >= 0)


def test_photons_do_not_overlap(shapes):
    assert S.temporal_overlap(*shapes) < 1e-3


def test_window_captures_the_photon(calibrated, shapes):
    # a one microsecond longer window adds less than 0.1 % emission
    long = calibrated.with_stage(1, window=4.0)
    steps = list(long.steps)
    steps[2] = Wait(2.0)
    long = long.replace(steps=tuple(steps)).with_stage(2, window=4.0)
    p_long = S.photon_shape(long, 1).probability
    assert shapes[0].probability >= 0.999 * p_long


def test_drives_off_gives_zero_shapes(calibrated):
    off = calibrated.drives_off()
    for k in (1, 2):
        sh = S.photon_shape(off, k)
        assert sh.probability == 0.0
        assert not np.any(sh.total())


def test_delay_distribution_is_centred(calibrated):
    dist = S.delay_distribution(calibrated)
    w, tau = np.asarray(dist.weights), np.asarray(dist.samples)
    assert w.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.sum(w * tau) == pytest.approx(0.0, abs=1e-9)


def test_zeeman_dephasing_matches_delay_average(calibrated, pair):
    delta = TWO_PI * 0.2
    st = S.conditional_two_photon_state(
        calibrated.replace(toggles=ErrorToggles(zeeman_mismatch=delta)))
    expected = S.delay_distribution(calibrated).mean_cos(delta)
    assert abs(st.rho[1, 2]) / abs(pair.rho[1, 2]) == pytest.approx(expected, rel=1e-9)
    assert np.allclose(np.diag(st.rho), np.diag(pair.rho), atol=1e-12)


# --------------------------------------------------------------------------
# Sampled experiment


def test_sampling_deterministic(calibrated):
    a = S.sample_experiment(calibrated, 60, seed=5)
    b = S.sample_experiment(calibrated, 60, seed=5)
    assert a == b
    c = S.sample_experiment(calibrated, 60, seed=6)
    assert a != c or not a


def test_sampling_drives_off_is_empty(calibrated):
    assert S.sample_experiment(calibrated.drives_off(), 50, seed=1) == []


def test_sampling_rejects_no_shots(calibrated):
    with pytest.raises(ValueError):
        S.sample_experiment(calibrated, 0, seed=1)


@pytest.mark.slow
def test_sampled_counts_match_pair_state():
    # stronger coupling keeps the shot count affordable; 2e4 shots, Z basis
    from ionphoton import tomography as T
    params = SystemParams.from_mhz(g0_mhz_over_2pi=3.0, cavity_detuning_mhz_over_2pi=-60)
    cfg = S.calibrate(S.protocol_config().replace(params=params))
    st = S.conditional_two_photon_state(cfg)
    n_shots = 20000
    ps = T.post_select(S.sample_experiment(cfg, n_shots, seed=11), cfg.detection)
    cnt = T.count_events(ps.events, "Z")
    n = cnt.total
    acc = ps.tallies["accepted"]
    mean = n_shots * st.efficiency
    assert abs(acc - mean) <= 4 * math.sqrt(mean) + 0.03 * mean
    p = T.outcome_probabilities(st.rho, "Z", cfg.detection).reshape(-1)
    obs = np.array([cnt.n_pp, cnt.n_pm, cnt.n_mp, cnt.n_mm])
    sd = np.sqrt(n * p * (1 - p)) + 1.0
    assert np.all(np.abs(obs - n * p) <= 3 * sd)
