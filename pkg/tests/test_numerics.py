import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iidob.errors import QuadratureError, StepError
from iidob.numerics import QuadRule, central_diff, gl_points, hermite, quad_gl, rk4_step, sdirk3_step


def test_rk4_zero_field_keeps_state():
    s = np.array([0.3, -2.0, 7.0])
    assert np.array_equal(rk4_step(lambda t, y: np.zeros_like(y), 0.0, s, 0.1), s)


def test_rk4_growth_matches_taylor_polynomial():
    h = 0.1
    got = rk4_step(lambda t, y: y, 0.0, np.array([1.0]), h)[0]
    assert got == pytest.approx(1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24, abs=1e-15)
    assert got == pytest.approx(1.1051708333, abs=1e-10)


def _decay_error(dt):
    y = np.array([1.0])
    for k in range(int(round(1 / dt))):
        y = rk4_step(lambda t, y: -y, k * dt, y, dt)
    return abs(y[0] - math.exp(-1))


def test_rk4_fourth_order_on_decay():
    e1, e2 = _decay_error(1e-2), _decay_error(1e-3)
    assert math.log10(e1 / e2) >= 3.9


def test_rk4_rejects_nonfinite_stage():
    with pytest.raises(StepError) as err:
        rk4_step(lambda t, y: y / (t - 0.05), 0.0, np.ones(1), 0.1)
    assert err.value.stage == 2


def test_quad_constant_and_orientation():
    assert quad_gl(lambda t: 1.0, 0.0, 3.0) == pytest.approx(3.0, abs=1e-14)
    assert quad_gl(lambda t: t, 1.0, 0.0) == pytest.approx(-0.5, abs=1e-15)


def test_quad_two_nodes_exact_for_cubic_degree():
    assert quad_gl(lambda t: t * t, 0.0, 1.0, QuadRule(nodes=2)) == pytest.approx(1 / 3, abs=1e-15)


def test_quad_reports_location_of_bad_sample():
    with pytest.raises(QuadratureError):
        quad_gl(lambda t: 1.0 / (t - t) if t > 0.5 else 0.0, 0.0, 1.0)


def test_zero_length_interval_integrates_to_zero():
    t, w = gl_points(0.0, 0.0, QuadRule())
    assert np.all(w == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.floats(-3, 3), st.floats(-3, 3),
       st.lists(st.floats(-2, 2), min_size=1, max_size=16))
def test_quad_exact_up_to_degree_2k_minus_1(k, a, b, coefs):
    coefs = coefs[:2 * k]
    poly = np.polynomial.Polynomial(coefs)
    anti = poly.integ()
    got = quad_gl(poly, a, b, QuadRule(nodes=k, segment_length=10.0))
    assert got == pytest.approx(anti(b) - anti(a), abs=1e-10 * (1 + abs(anti(b)) + abs(anti(a))))


def test_central_diff_examples():
    assert central_diff(lambda x: 4.0, [1.0, 2.0], 0) == 0.0
    assert central_diff(lambda x: x[0] ** 2, [3.0], 0, step=1e-6) == pytest.approx(6.0, abs=1e-6)
    assert central_diff(lambda x: x[0] * x[1], [2.0, 5.0], 1) == pytest.approx(2.0, abs=1e-6)


def _sdirk_error(dt, lam=-2.0, horizon=1.0):
    y = np.array([1.0, 0.0])
    A = np.array([[lam, 1.0], [-1.0, lam]])
    for k in range(int(round(horizon / dt))):
        y = sdirk3_step(lambda t, z: A @ z, lambda t, z: A, k * dt, y, dt, tol=1e-14)
    from scipy.linalg import expm
    return np.max(np.abs(y - expm(A * horizon) @ np.array([1.0, 0.0])))


def test_sdirk3_third_order():
    e1, e2 = _sdirk_error(0.05), _sdirk_error(0.025)
    assert math.log2(e1 / e2) > 2.8


@pytest.mark.parametrize("z", [-1e3, -1e6, -1e9])
def test_sdirk3_stability_function_vanishes_at_infinity(z):
    # L-stability: R(z) = O(1/z) as z -> -inf
    dt = 1e-3
    lam = z / dt
    y = sdirk3_step(lambda t, v: lam * v, lambda t, v: np.array([[lam]]), 0.0, np.array([1.0]), dt)
    assert abs(y[0]) <= 10.0 / abs(z)


def test_sdirk3_nonlinear_logistic():
    # y' = y (1 - y) has the closed form y = 1 / (1 + 9 e^-t) from y(0) = 0.1
    dt, y = 0.01, np.array([0.1])
    for k in range(200):
        y = sdirk3_step(lambda t, z: z * (1 - z), lambda t, z: np.array([[1 - 2 * z[0]]]), k * dt, y, dt,
                        tol=1e-13)
    assert y[0] == pytest.approx(1 / (1 + 9 * math.exp(-2.0)), abs=1e-8)


def test_hermite_reproduces_cubic():
    p = np.polynomial.Polynomial([0.5, -1.0, 2.0, 3.0])
    dp = p.deriv()
    dt, t0 = 0.3, 1.1
    for s in (0.0, 0.25, 0.6, 1.0):
        got = hermite(p(t0), p(t0 + dt), dp(t0), dp(t0 + dt), dt, s)
        assert got == pytest.approx(p(t0 + s * dt), abs=1e-13)
