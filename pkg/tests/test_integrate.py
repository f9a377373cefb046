import math

import numpy as np
import pytest

from ionphoton.integrate import IntegrationError, ORDER, integrate, integrate_fixed


def rotation(t, y):
    return np.array([-1j * y[0]])


def test_exponential_and_oscillation():
    sol = integrate(lambda t, y: -0.7 * y, 0.0, [1.0], 3.0, rtol=1e-11, atol=1e-13)
    assert sol.final[0].real == pytest.approx(math.exp(-2.1), abs=1e-10)
    sol = integrate(rotation, 0.0, [1.0], 10.0, rtol=1e-11, atol=1e-13)
    assert sol.final[0] == pytest.approx(np.exp(-10j), abs=1e-9)


def test_t_eval_lands_on_requested_times():
    ts = np.linspace(0, 2, 7)
    sol = integrate(lambda t, y: -y, 0.0, [1.0], 2.0, rtol=1e-10, atol=1e-12, t_eval=ts)
    assert np.array_equal(sol.t, ts)
    for t, y in zip(sol.t, sol.y):
        assert y[0].real == pytest.approx(math.exp(-t), abs=1e-9)


def test_max_step_is_respected():
    # a pulse that a large step would jump over
    def f(t, y):
        return np.array([1.0 if 5.0 < t < 5.1 else 0.0], dtype=complex)

    sol = integrate(f, 0.0, [0.0], 10.0, max_step=0.02)
    assert sol.final[0].real == pytest.approx(0.1, abs=1e-2)


def test_fixed_step_order():
    exact = np.exp(-2j)
    errs = [abs(integrate_fixed(rotation, 0.0, [1.0], 2.0, n)[0] - exact) for n in (10, 20)]
    ratio = errs[0] / errs[1]
    assert 2 ** ORDER / 2 <= ratio <= 2 ** ORDER * 2


def test_tolerance_halving_within_error_estimate():
    a = integrate(rotation, 0.0, [1.0], 5.0, rtol=1e-7, atol=1e-9)
    b = integrate(rotation, 0.0, [1.0], 5.0, rtol=5e-8, atol=5e-10)
    assert abs(a.final[0] - b.final[0]) < a.error_estimate


def test_step_underflow_raises_with_time():
    with pytest.raises(IntegrationError) as exc:
        integrate(lambda t, y: y ** 2, 0.0, [1.0], 2.0)
    assert exc.value.t == pytest.approx(1.0, abs=1e-3)


def test_backwards_interval_rejected():
    with pytest.raises(ValueError):
        integrate(rotation, 1.0, [1.0], 0.0)
