import math

import numpy as np
import pytest

from iidob.errors import ContractError
from iidob.models import (TwoLinkArm, eval_augmented, eval_disturbance, eval_plant, make_example1,
                          make_manipulator, make_scenario, relative_degree_check, total_disturbance)
from iidob.numerics import rk4_step

EX1 = make_example1()
ARM = make_manipulator()


def test_plant_examples():
    m = EX1.model
    assert np.array_equal(eval_plant(m, [0, 0], [0, 0], 0.0), [0.0, 0.0])
    assert np.allclose(eval_plant(m, [1, 2], [0, 0], 0.0), [2.0, 2.0])
    want = [2 + 1 + 3, 2 + (1 + math.sin(1) ** 2) + 6]
    assert np.allclose(eval_plant(m, [1, 2], [1, 1], 3.0), want, atol=1e-14)


def test_plant_dimension_mismatch():
    with pytest.raises(ContractError):
        eval_plant(EX1.model, [1, 2, 3], [0, 0], 0.0)


def test_augmented_stacks_plant_and_v():
    m = EX1.model
    assert np.array_equal(eval_augmented(m, [0, 0], [0, 0], [0, 0], 0.0), np.zeros(4))
    out = eval_augmented(m, [0.3, -1], [2, 1], [5, -7], 1.5)
    assert np.array_equal(out[:2], eval_plant(m, [0.3, -1], [2, 1], 1.5))
    assert np.array_equal(out[2:], [5.0, -7.0])


def test_augmented_conserves_u_without_input():
    m = EX1.model
    y = np.array([0.2, -0.4, 1.5, -2.5])
    for k in range(100):
        y = rk4_step(lambda t, s: eval_augmented(m, s[:2], s[2:], np.zeros(2), 0.0), k * 0.01, y, 0.01)
    assert np.array_equal(y[2:], [1.5, -2.5])


def test_example1_constants():
    sig = EX1.disturbance
    assert (sig.omega0, sig.omega1) == (8.0, 26.0)
    assert np.array_equal(EX1.x0, [-0.5, -0.5])
    w, wd = eval_disturbance(sig, 0.0)
    assert w[0] == pytest.approx(5.0) and wd[0] == pytest.approx(17.0)
    for x in ([0.0, 0.0], [3.0, -2.0]):
        assert np.array_equal(EX1.model.dp(np.array(x))[0], np.eye(2))


def test_example1_disturbance_peak_exceeds_stated_bound():
    # the stated omega0 = 8 is not a bound for the stated waveform; its grid max is 9.3698
    b = EX1.disturbance.check_bounds(20.0, 1e-3)
    assert b["w_max"] == pytest.approx(9.3698, abs=1e-4)
    assert not b["omega0_ok"]
    assert b["wdot_max"] <= 26.0


def test_total_disturbance_is_p_times_w():
    x = np.array([0.7, -1.2])
    assert np.allclose(total_disturbance(EX1.model, x, 3.0), x * 3.0)


def test_manipulator_constants():
    sig = ARM.disturbance
    assert (sig.omega0, sig.omega1) == (11.0, 37.0)
    for b in ARM.barriers:
        assert b.iota == 2
    x = np.zeros(4)
    vals = [b.h(x) for b in ARM.barriers]
    assert vals == [1.0, 1.5, 1.2, 1.0]
    # boundaries: q1 = -1, q1 = 1.5, q2 = -1.2, q2 = 1
    edges = [(0, -1.0), (0, 1.5), (1, -1.2), (1, 1.0)]
    for b, (j, q) in zip(ARM.barriers, edges):
        xx = np.zeros(4)
        xx[j] = q
        assert b.h(xx) == pytest.approx(0.0, abs=1e-15)


def test_manipulator_jacobian_singular_at_straight_elbow():
    arm = ARM.params["arm"]
    for q1 in (-0.7, 0.0, 1.3):
        assert abs(np.linalg.det(arm.jacobian(np.array([q1, 0.0])))) < 1e-14
    assert abs(np.linalg.det(arm.jacobian(np.array([0.2, 0.9])))) > 0.1


def test_manipulator_chain_example():
    b = ARM.barriers[0]
    x = np.array([0.3, -0.2, 0.5, 0.1])
    assert b.chain[1][0](x) == pytest.approx(0.5 + 25 * (0.3 + 1))
    assert np.array_equal(b.chain[1][1](x), [25, 0, 1, 0])


@pytest.mark.parametrize("name", ["example1", "manipulator"])
def test_dp_matches_finite_differences(name):
    model = make_scenario(name).model
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(-2, 2, model.n)
        dp = model.dp(x)
        for j in range(model.n):
            s = 1e-6 * (1 + abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += s
            xm[j] -= s
            col = (model.p(xp) - model.p(xm)) / (2 * s)   # d p / d x_j, shape (n, l)
            for i in range(model.l):
                err = abs(dp[i][:, j] - col[:, i])
                # relative error, absolute below unit magnitude
                worst = max(worst, float(np.max(err / np.maximum(np.abs(col[:, i]), 1.0))))
    assert worst <= 1e-4


@pytest.mark.parametrize("name", ["example1", "manipulator"])
def test_parts_agrees_with_separate_functions(name):
    model = make_scenario(name).model
    X = np.random.default_rng(5).uniform(-2, 2, (50, model.n))
    f, g, p, dp = model.parts(X)
    assert np.allclose(f, model.f(X), atol=1e-13)
    assert np.allclose(g, model.g(X), atol=1e-13)
    assert np.allclose(p, model.p(X), atol=1e-13)
    assert np.allclose(dp, model.dp(X), atol=1e-13)
    for k in range(5):
        f1, g1, p1, dp1 = model.parts(X[k])
        assert np.allclose(f1, model.f(X[k]), atol=1e-13) and np.allclose(dp1, model.dp(X[k]), atol=1e-13)


@pytest.mark.parametrize("name", ["example1", "manipulator"])
def test_relative_degree_conditions(name):
    sc = make_scenario(name)
    rng = np.random.default_rng(11)
    samples = [rng.uniform(-2, 2, sc.model.n) for _ in range(1000)]
    for b in sc.barriers:
        rd = relative_degree_check(sc.model, b, samples)
        assert rd["ok"], (b.name, rd)
        assert rd["low_order_max"] <= 1e-10


def test_manipulator_energy_conserved_under_gravity_compensation():
    # tau = G(q), F_d = 0: kinetic energy is conserved by M' - 2C skew symmetry
    arm = TwoLinkArm()
    model = ARM.model

    def rhs(t, x):
        return model.f(x) + model.g(x) @ arm.gravity(x[:2])

    x = np.array([0.3, -0.8, 1.2, -0.5])
    e0 = arm.energy(x)[0]
    dt = 5e-4
    worst = 0.0
    for k in range(int(round(10.0 / dt))):
        x = rk4_step(rhs, k * dt, x, dt)
        if k % 200 == 0:
            worst = max(worst, abs(arm.energy(x)[0] - e0))
    worst = max(worst, abs(arm.energy(x)[0] - e0))
    assert worst <= 1e-3


def test_manipulator_free_fall_conserves_total_energy():
    # tau = 0, F_d = 0: kinetic plus potential energy is conserved
    arm = TwoLinkArm()
    model = ARM.model
    x = np.array([0.4, 0.6, 0.0, 0.0])
    e0 = sum(arm.energy(x))
    dt = 5e-4
    for k in range(4000):
        x = rk4_step(lambda t, s: model.f(s), k * dt, x, dt)
    assert abs(sum(arm.energy(x)) - e0) <= 1e-3
