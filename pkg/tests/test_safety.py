import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iidob import safety
from iidob.dfilter import FilterParams, zeta
from iidob.errors import ConfigError, InfeasibleQPError
from iidob.models import make_example1, make_manipulator
from iidob.numerics import central_diff
from iidob.observer import ObserverGains, validate_gains
from iidob.safety import (build_chain, constraint_pair, eval_h_iota, robust_cbf_constraint, solve_qp_multi,
                          solve_qp_single, validate_theorem2)

EX1 = make_example1()
ARM = make_manipulator()
REP = validate_gains(ObserverGains(eta=100.0), 2, 1.001, 8.0, 26.0, 1)
ZETA = zeta(FilterParams(50.0, 1.0), REP.kappa)


def kkt_oracle(A, b, v_nom):
    """Projection of v_nom onto {b + A v >= 0} by enumerating every face."""
    k, m = A.shape
    best, best_obj = None, np.inf
    for size in range(0, k + 1):
        for S in itertools.combinations(range(k), size):
            if size:
                As = A[list(S)]
                mu, *_ = np.linalg.lstsq(As @ As.T, -(b[list(S)] + As @ v_nom), rcond=None)
                v = v_nom + As.T @ mu
            else:
                v = v_nom.copy()
            if np.min(b + A @ v) < -1e-10:
                continue
            obj = float((v - v_nom) @ (v - v_nom))
            if obj < best_obj:
                best, best_obj = v, obj
    return best


def test_chain_examples():
    assert len(build_chain(EX1.barriers[0], EX1.model)) == 1
    rng = np.random.default_rng(0)
    chain = build_chain(ARM.barriers[0], ARM.model, [rng.uniform(-1, 1, 4) for _ in range(5)])
    assert np.array_equal(chain[1][1](np.zeros(4)), [25, 0, 1, 0])


def test_chain_gradients_match_differences():
    rng = np.random.default_rng(1)
    for b in ARM.barriers:
        for _ in range(100):
            x = rng.uniform(-2, 2, 4)
            for hk, gk in b.chain:
                g = gk(x)
                fd = np.array([central_diff(hk, x, j) for j in range(4)])
                assert np.allclose(fd, g, rtol=1e-6, atol=1e-6)


def test_h_iota_example():
    b = EX1.barriers[0]
    assert b.lambdas[0] == 50.0 and REP.omega == pytest.approx(24.18)
    h = eval_h_iota(b, EX1.model, np.zeros(2), np.zeros(2), 1.0, np.zeros(2), 100.0, REP.omega)
    assert h == pytest.approx(0 - 2 / (2 * 50) - 24.18 + 50, abs=1e-12)
    assert h == pytest.approx(25.8, abs=1e-12)


def test_h_iota_derivative_in_filtered_estimate_is_gradient():
    b = ARM.barriers[1]
    x = np.array([0.2, -0.3, 0.5, 1.0])
    u = np.array([0.4, -0.6])
    df = np.array([0.0, 0.0, 0.3, -0.2])
    for j in range(4):
        d = central_diff(lambda z: eval_h_iota(b, ARM.model, x, u, 1.1, z, 300.0, 5.0), df, j)
        assert d == pytest.approx(b.chain[1][1](x)[j], abs=1e-7)


def test_psi1_example1_is_row_of_g():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.uniform(-1, 1, 2)
        pair = constraint_pair(EX1.barriers[0], EX1.model, x, np.zeros(2), 1.0, np.zeros(2), np.zeros(2),
                               0.0, np.zeros(2), REP, ZETA)
        assert np.array_equal(pair.psi1, [1.0, 0.0])


def test_psi1_matches_difference_of_h_iota_in_u():
    rng = np.random.default_rng(3)
    rep = validate_gains(ObserverGains(gamma=250, eta=100, c=5, theta=50, k1=20, k2=20), 4, 1.001, 11, 37, 2)
    zt = zeta(FilterParams(250.0, 1.0), rep.kappa)
    for _ in range(100):
        b = ARM.barriers[rng.integers(4)]
        x = rng.uniform(-1, 1, 4)
        u, df = rng.uniform(-3, 3, 2), rng.uniform(-1, 1, 4)
        pair = constraint_pair(b, ARM.model, x, u, 1.2, df, df, 0.0, np.zeros(4), rep, zt)
        fd = np.array([central_diff(lambda z: eval_h_iota(b, ARM.model, x, z, 1.2, df, zt, rep.omega), u, j)
                       for j in range(2)])
        assert np.allclose(pair.psi1, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))


def test_qp_single_examples():
    res = solve_qp_single(1.0, np.array([0.0, 1.0]), np.zeros(2))
    assert np.array_equal(res.v, [0, 0]) and res.active == [False]
    res = solve_qp_single(-1.0, np.array([1.0, 0.0]), np.zeros(2))
    assert np.allclose(res.v, [1, 0]) and res.active == [True]


def test_qp_keeps_nominal_bit_for_bit_when_satisfied():
    vn = np.array([0.1 + 1e-17, np.pi])
    assert solve_qp_multi([(5.0, np.array([1.0, 1.0])), (0.0, np.array([0.0, 0.0]))], vn).v.tobytes() == vn.tobytes()


def test_qp_multi_examples():
    pairs = [(-1.0, np.array([1.0, 0.0]))]
    assert np.array_equal(solve_qp_multi(pairs, np.zeros(2)).v, solve_qp_single(-1.0, pairs[0][1], np.zeros(2)).v)
    res = solve_qp_multi([(-1.0, np.array([1.0, 0.0])), (-1.0, np.array([0.0, 1.0]))], np.zeros(2))
    assert np.allclose(res.v, [1.0, 1.0]) and res.active == [True, True]


def test_qp_infeasible_raises_with_certificate():
    with pytest.raises(InfeasibleQPError) as err:
        solve_qp_single(-1.0, np.zeros(2), np.zeros(2))
    assert err.value.certificate["psi0"] == -1.0
    with pytest.raises(InfeasibleQPError):
        solve_qp_multi([(-1.0, np.array([1.0, 0.0])), (-1.0, np.array([-1.0, 0.0]))], np.zeros(2))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(2, 3), st.integers(0, 2**32 - 1))
def test_qp_multi_matches_oracle(k, m, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(k, m))
    v0 = rng.normal(size=m)
    b = -A @ v0 + rng.uniform(0, 1, k)     # v0 is feasible
    vn = rng.normal(scale=3, size=m)
    res = solve_qp_multi(list(zip(b, A)), vn)
    assert np.min(b + A @ res.v) >= -1e-9
    assert np.linalg.norm(res.v - kkt_oracle(A, b, vn)) <= 1e-8


def test_theorem2_rate_examples():
    b = EX1.barriers[0]
    checks = validate_theorem2(b, EX1.model, REP, ZETA, EX1.x0, EX1.u0, 1.001, np.zeros(2), np.zeros(2),
                               np.zeros(2))
    names = {c.name: c for c in checks}
    assert names["h1: lambda_iota < 2 kappa"].passed and names["h1: lambda_iota < 2 kappa"].margin == 126
    assert names["h1: lambda_(iota-1) < zeta"].passed and names["h1: lambda_(iota-1) < zeta"].margin == 50


def test_theorem2_zero_initial_error_reduces_to_barrier_sign():
    b = EX1.barriers[0]
    checks = validate_theorem2(b, EX1.model, REP, ZETA, EX1.x0, EX1.u0, 1.001, np.ones(2), np.ones(2),
                               np.zeros(2))
    c = [c for c in checks if "V_f" in c.name][0]
    assert c.margin == pytest.approx(b.h(EX1.x0)) and c.passed


def test_theorem2_large_top_rate_fails_by_name():
    from iidob.models import _affine_barrier
    b = _affine_barrier("hx", [1.0, 0.0], 1.0, (50.0, 200.0), 1.0, 1.0)
    checks = validate_theorem2(b, EX1.model, REP, ZETA, EX1.x0, EX1.u0, 1.001, np.zeros(2), np.zeros(2))
    bad = [c.name for c in checks if not c.passed]
    assert "hx: lambda_iota < 2 kappa" in bad
    with pytest.raises(ConfigError):
        constraint_pair(b, EX1.model, EX1.x0, EX1.u0, 1.0, np.zeros(2), np.zeros(2), 0.0, np.zeros(2), REP, ZETA)


def test_robust_margin_example():
    b = EX1.barriers[0]
    x = np.array([1.0, 0.0])
    p0, p1 = robust_cbf_constraint(b, EX1.model, x, 8.0, 0.0)
    nominal = b.grad_h(x) @ EX1.model.f(x)
    assert nominal - p0 == pytest.approx(8.0)
    assert np.array_equal(p1, [1.0, 0.0])
