import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ionphoton import tomography as T
from ionphoton.tomography import (ClickRecord, CorrelationCounts, DetectionModel,
                                  WaveplateSetting)

S2 = math.sqrt(2)


def bell(target):
    s = 1 if target == "psi+" else -1
    v = np.array([0, 1, s, 0], dtype=complex) / S2
    return np.outer(v, v.conj())


def random_state(seed, rank=4):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    r = a @ a.conj().T
    return r / np.trace(r)


# --------------------------------------------------------------------------
# Waveplates


def test_waveplate_unitary_examples():
    u = T.waveplate_unitary(WaveplateSetting(0.0, 0.0))
    assert np.allclose(u, np.diag(np.diag(u)))
    assert abs(np.linalg.det(u)) == pytest.approx(1.0)
    d = T.waveplate_unitary(WaveplateSetting(0.0, math.pi / 8)) @ T.H
    assert abs(np.vdot(np.array([1, 1]) / S2, d)) ** 2 == pytest.approx(1.0, abs=1e-12)
    c = T.waveplate_unitary(WaveplateSetting(math.pi / 4, 0.0)) @ T.H
    assert abs(c[0]) ** 2 == pytest.approx(0.5) and abs(c[1]) ** 2 == pytest.approx(0.5)
    assert abs(np.vdot(c, np.array([1, 1j]) / S2)) ** 2 in (
        pytest.approx(1.0, abs=1e-12), pytest.approx(0.0, abs=1e-12))


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_waveplate_unitarity_and_wrapping(q, h):
    s = WaveplateSetting(q, h)
    assert 0 <= s.qwp_angle < math.pi and 0 <= s.hwp_angle < math.pi
    u = T.waveplate_unitary(s)
    assert np.allclose(u @ u.conj().T, np.eye(2), atol=1e-12)


@pytest.mark.parametrize("basis", T.BASES)
def test_basis_round_trip(basis):
    model = DetectionModel()
    u = T.waveplate_unitary(T.basis_settings(basis))
    plus, minus = T.EIGENSTATES[basis]
    for vec, port in ((plus, 0), (minus, 1)):
        p = abs((u @ vec)[port]) ** 2
        assert p * (1 - model.leakage) + (1 - p) * model.leakage >= \
            1 - 1 / model.extinction_ratio - 1e-9


def test_basis_examples_at_infinite_extinction():
    u = T.waveplate_unitary(T.basis_settings("X"))
    assert abs((u @ (np.array([1, 1]) / S2))[0]) ** 2 >= 0.999
    u = T.waveplate_unitary(T.basis_settings("Y"))
    r = T.SIGMA_TO_JONES[:, 0]
    assert abs((u @ r)[0]) ** 2 >= 0.999
    with pytest.raises(ValueError):
        T.basis_settings("Q")


def test_z_basis_port_probability_with_extinction():
    model = DetectionModel()
    # an H photon after the collection optics reaches T with 1 - 1/extinction
    u = T.waveplate_unitary(T.basis_settings("Z"))
    assert abs((u @ T.H)[0]) ** 2 * (1 - model.leakage) == pytest.approx(1 - 1 / 15000)


# --------------------------------------------------------------------------
# Model validation


def test_detection_model_invariants():
    with pytest.raises(ValueError):
        DetectionModel(extinction_ratio=0.5)
    with pytest.raises(ValueError):
        DetectionModel(detection_efficiency=0.0)
    with pytest.raises(ValueError):
        DetectionModel(windows=((0, 3), (2, 5)))
    with pytest.raises(ValueError):
        DetectionModel(dark_count_rate=-1)
    assert DetectionModel.ideal().leakage == 0.0


# --------------------------------------------------------------------------
# Detection


def test_ideal_psi_minus_z_basis_perfect_anticorrelation():
    c = T.detect(bell("psi-"), "Z", DetectionModel.ideal(), seed=0, n_shots=2000)
    assert c.n_pp == c.n_mm == 0 and c.total == 2000


def test_ideal_psi_minus_x_basis_only_anticorrelated():
    c = T.detect(bell("psi-"), "X", DetectionModel.ideal(), seed=1, n_shots=2000)
    assert c.n_pp == c.n_mm == 0


def test_extinction_leakage_fraction():
    model = DetectionModel(extinction_ratio=15000)
    n = 1_000_000
    p = T._with_leakage(T.outcome_probabilities(bell("psi-"), "Z", model), model.leakage)
    rng = np.random.default_rng(4)
    out = rng.multinomial(n, p.reshape(-1))
    frac = (out[0] + out[3]) / n
    expect = 2 / 15000 * (1 - 1 / 15000)
    assert abs(frac - expect) <= 3 * math.sqrt(expect * (1 - expect) / n)


def test_extinction_leakage_through_click_pipeline():
    model = DetectionModel(extinction_ratio=15000)
    n = 200_000
    c = T.detect(bell("psi-"), "Z", model, seed=5, n_shots=n)
    frac = (c.n_pp + c.n_mm) / c.total
    expect = 2 / 15000 * (1 - 1 / 15000)
    assert abs(frac - expect) <= 3 * math.sqrt(expect / n)


@pytest.mark.parametrize("basis", T.BASES)
def test_born_rule_frequencies(basis):
    rho = random_state(10, rank=1)
    n = 100_000
    model = DetectionModel.ideal()
    c = T.detect(rho, basis, model, seed=7, n_shots=n)
    p = T.outcome_probabilities(rho, basis, model).reshape(-1)
    got = np.array([c.n_pp, c.n_pm, c.n_mp, c.n_mm]) / n
    assert np.all(np.abs(got - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-12)


@pytest.mark.parametrize("basis", T.BASES)
def test_perfect_bell_correct_outcome_probability(basis):
    # the reference for a perfect Bell state at extinction 15000
    model = DetectionModel(extinction_ratio=15000)
    target = {"Z": -1, "X": 1, "Y": 1}[basis]  # Psi+ correlators
    p = T._with_leakage(T.outcome_probabilities(bell("psi+"), basis, model), model.leakage)
    correct = p[0, 0] + p[1, 1] if target > 0 else p[0, 1] + p[1, 0]
    eps = 1 / 15000
    assert correct == pytest.approx((1 - eps) ** 2 + eps ** 2, abs=1e-12)
    assert correct == pytest.approx(1 - 2 / 15000, abs=1e-7)
    n = 200_000
    c = T.detect(bell("psi+"), basis, model, seed=8, n_shots=n)
    got = (c.n_pp + c.n_mm if target > 0 else c.n_pm + c.n_mp) / c.total
    assert abs(got - correct) <= 3 * math.sqrt(correct * (1 - correct) / n) + 1e-6


def test_detect_deterministic_per_seed():
    m = DetectionModel(dark_count_rate=0.01, detection_efficiency=0.7)
    a = T.detect(bell("psi+"), "X", m, seed=3, n_shots=5000)
    b = T.detect(bell("psi+"), "X", m, seed=3, n_shots=5000)
    assert a == b


def test_efficiency_and_dark_counts_are_applied():
    m = DetectionModel(detection_efficiency=0.5)
    c = T.detect(bell("psi+"), "Z", m, seed=2, n_shots=20000)
    assert c.total / 20000 == pytest.approx(0.25, abs=0.02)
    m = DetectionModel(dark_count_rate=0.2)
    clicks = T.simulate_clicks(bell("psi+"), "Z", m, 2000, np.random.default_rng(0))
    sel = T.post_select(clicks, m)
    assert sel.tallies["double_click"] > 0
    assert all(c.timestamp_us >= 0 for c in clicks)


# --------------------------------------------------------------------------
# Post-selection


def test_post_select_rules():
    m = DetectionModel()
    clicks = [ClickRecord(0, 1, "T", 1.0), ClickRecord(0, 2, "R", 7.0),
              ClickRecord(1, 1, "T", 4.5), ClickRecord(1, 2, "R", 7.0),
              ClickRecord(2, 1, "T", 1.0), ClickRecord(2, 1, "R", 1.5),
              ClickRecord(2, 2, "R", 7.0),
              ClickRecord(3, 1, "T", 1.0)]
    sel = T.post_select(clicks, m)
    assert sel.events == [(0, "T", "R")]
    assert sel.tallies == {"accepted": 1, "outside_window": 1, "double_click": 1,
                           "missing_photon": 1}
    assert T.post_select([], m).events == []


# --------------------------------------------------------------------------
# Estimators


def test_correlation_examples():
    assert T.correlation_expectation(CorrelationCounts("Z", 0, 10, 5, 0))[0] == -1
    assert T.correlation_expectation(CorrelationCounts("Z", 5, 5, 5, 5))[0] == 0
    v, e = T.correlation_expectation(CorrelationCounts("Z", 4, 43, 44, 3))
    assert v == pytest.approx(-80 / 94, abs=1e-12)
    assert v == pytest.approx(-0.851, abs=5e-4)
    assert e == pytest.approx(0.054, abs=1e-3)
    # an accepted-event total of 92 can represent -0.87 +- 0.05
    v, e = T.correlation_expectation(CorrelationCounts("Z", 3, 43, 43, 3))
    assert v == pytest.approx(-0.87, abs=0.005) and e == pytest.approx(0.05, abs=0.005)
    with pytest.raises(ValueError):
        T.correlation_expectation(CorrelationCounts("Z"))


def test_counts_merge_and_validation():
    a = CorrelationCounts("X", 1, 2, 3, 4)
    b = CorrelationCounts("X", 4, 3, 2, 1)
    assert (a + b) == (b + a) == CorrelationCounts("X", 5, 5, 5, 5)
    with pytest.raises(ValueError):
        a + CorrelationCounts("Y")
    with pytest.raises(ValueError):
        CorrelationCounts("X", -1)


def test_bootstrap_matches_binomial_error():
    events = [(i, "T", "T") for i in range(30)] + [(i, "T", "R") for i in range(30, 100)]
    c = T.count_events(events, "X")
    _, e = T.correlation_expectation(c)
    assert T.bootstrap_expectation(events, "X", 4000, 1) == pytest.approx(e, rel=0.1)


def test_bell_fidelity_values():
    f, _ = T.bell_fidelity(-0.72, -0.68, -0.87, "psi-")
    assert f == pytest.approx(0.8175, abs=1e-12)
    f, _ = T.bell_fidelity(0.70, 0.39, -0.70, "psi+")
    assert f == pytest.approx(0.6975, abs=1e-12)
    assert T.bell_fidelity(-1, -1, -1, "psi-")[0] == 1
    _, e = T.bell_fidelity((0, 0.04), (0, 0.04), (0, 0.04))
    assert e == pytest.approx(0.25 * math.sqrt(3) * 0.04)
    with pytest.raises(ValueError):
        T.bell_fidelity(1.2, 0, 0)
    with pytest.raises(ValueError):
        T.bell_fidelity(0, 0, 0, "phi+")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.sampled_from(["psi+", "psi-"]))
def test_bell_fidelity_of_physical_states_in_unit_interval(seed, rank, target):
    rho = random_state(seed, rank)
    ex = [T.pauli_expectation(rho, b) for b in ("X", "Y", "Z")]
    f, _ = T.bell_fidelity(*ex, target)
    assert -1e-12 <= f <= 1 + 1e-12


def test_maximally_mixed_gives_quarter():
    ex = [T.pauli_expectation(np.eye(4) / 4, b) for b in ("X", "Y", "Z")]
    assert T.bell_fidelity(*ex, "psi-")[0] == pytest.approx(0.25, abs=1e-15)


def test_pauli_expectations_of_bell_states():
    for target, sx in (("psi+", 1), ("psi-", -1)):
        rho = bell(target)
        assert T.pauli_expectation(rho, "Z") == pytest.approx(-1)
        assert T.pauli_expectation(rho, "X") == pytest.approx(sx)
        assert T.pauli_expectation(rho, "Y") == pytest.approx(sx)


# --------------------------------------------------------------------------
# Serialization


def test_click_csv_and_jsonl_round_trip():
    clicks = T.simulate_clicks(bell("psi+"), "X", DetectionModel(dark_count_rate=0.05), 50,
                               np.random.default_rng(9))
    text = T.clicks_to_csv(clicks)
    assert text.splitlines()[0] == "shot,slot,detector,timestamp_us"
    back = T.clicks_from_csv(text)
    # timestamps are written at 1e-9 us resolution; a second pass is exact
    assert T.clicks_to_csv(back) == text
    assert [(c.shot, c.slot, c.detector) for c in back] == \
        [(c.shot, c.slot, c.detector) for c in clicks]
    assert max(abs(a.timestamp_us - b.timestamp_us) for a, b in zip(back, clicks)) <= 5e-10
    assert T.clicks_from_jsonl(T.clicks_to_jsonl(back)) == back


def test_counts_json_schema():
    import json

    out = json.loads(T.counts_to_json([CorrelationCounts("Y", 1, 2, 3, 4)]))
    assert out == [{"basis": "Y", "label": "R/L", "n_pp": 1, "n_pm": 2, "n_mp": 3,
                    "n_mm": 4}]
