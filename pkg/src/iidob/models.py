"""Disturbed control-affine plants, disturbance signals and the built-in scenarios.

Every evaluator is batched: ``x`` may carry leading batch axes, so ``f(x)``
returns ``(..., n)``, ``g(x)`` ``(..., n, m)``, ``p(x)`` ``(..., n, l)`` and
``dp(x)`` ``(..., l, n, n)`` where ``dp(x)[..., i, :, :]`` is the Jacobian of
the i-th column of ``p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, ModelError

Array = np.ndarray


@dataclass(frozen=True)
class SystemModel:
    name: str
    n: int
    m: int
    l: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    p: Callable[[Array], Array]
    dp: Callable[[Array], Array]
    # optional joint evaluator joint(x, with_dp) -> (f, g, p, dp or None) sharing intermediates
    joint: Optional[Callable[..., tuple]] = None

    def parts(self, x, with_dp: bool = True):
        if self.joint is not None:
            return self.joint(x, with_dp)
        return self.f(x), self.g(x), self.p(x), (self.dp(x) if with_dp else None)


@dataclass(frozen=True)
class DisturbanceSignal:
    """Disturbance w(t) with its derivative.

    ``wdot`` is for oracle and diagnostic code only; nothing on the
    estimation or control path may call it.
    """

    w: Callable[[float], Array]
    wdot: Callable[[float], Array]
    omega0: float
    omega1: float

    def check_bounds(self, horizon: float, dt: float) -> dict:
        t = np.arange(0.0, horizon + 0.5 * dt, dt)
        wmax = max(float(np.linalg.norm(self.w(ti))) for ti in t)
        wdmax = max(float(np.linalg.norm(self.wdot(ti))) for ti in t)
        return {
            "w_max": wmax,
            "wdot_max": wdmax,
            "omega0": self.omega0,
            "omega1": self.omega1,
            "omega0_ok": wmax <= self.omega0,
            "omega1_ok": wdmax <= self.omega1,
        }


@dataclass(frozen=True)
class Barrier:
    """Barrier h_0 with relative degree ``iota`` and its pre-derived top of chain.

    ``chain`` lists ``(h_k, grad_h_k)`` for k = 0..iota-1 where h_k is built with
    the rates ``lambdas[:k]``; entry 0 is h_0 itself.  ``lambdas`` holds
    lambda_0..lambda_iota.
    """

    name: str
    iota: int
    lambdas: tuple
    chain: tuple
    rho: float = 1.0
    rho_tilde: float = 1.0

    @property
    def h(self):
        return self.chain[0][0]

    @property
    def grad_h(self):
        return self.chain[0][1]


@dataclass(frozen=True)
class Scenario:
    name: str
    model: SystemModel
    disturbance: DisturbanceSignal
    x0: Array
    u0: Array
    barriers: tuple = ()
    x_ref: Optional[Callable[[float], Array]] = None
    xdot_ref: Optional[Callable[[float], Array]] = None
    horizon: float = 20.0
    dt: float = 1e-3
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ContractError("horizon must be positive")
        if np.shape(self.x0) != (self.model.n,) or np.shape(self.u0) != (self.model.m,):
            raise ContractError("initial state/input dimensions do not match the model")


def _check(vec, size, what):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (size,):
        raise ContractError(f"{what} must have shape ({size},), got {vec.shape}")
    return vec


def eval_plant(model: SystemModel, x, u, w) -> Array:
    x = _check(x, model.n, "x")
    u = _check(u, model.m, "u")
    w = _check(np.atleast_1d(w), model.l, "w")
    return model.f(x) + model.g(x) @ u + model.p(x) @ w


def eval_augmented(model: SystemModel, x, u, v, w) -> Array:
    v = _check(v, model.m, "v")
    return np.concatenate([eval_plant(model, x, u, w), v])


def total_disturbance(model: SystemModel, x, w) -> Array:
    return model.p(np.asarray(x, dtype=float)) @ np.atleast_1d(np.asarray(w, dtype=float))


def eval_disturbance(sig: DisturbanceSignal, t: float):
    if t < 0:
        raise ContractError("t must be nonnegative")
    return sig.w(t), sig.wdot(t)


def lie_derivatives(model: SystemModel, grad, x):
    """(L_f, L_g, L_p) of a scalar with gradient ``grad`` at ``x``."""
    gr = np.asarray(grad(x), dtype=float)
    return gr @ model.f(x), gr @ model.g(x), gr @ model.p(x)


# --- shared disturbance waveform ------------------------------------------

def _wave(t):
    return 5 * np.sin(t) + 2 * np.cos(2 * t) + 4 * np.sin(3 * t) + 3 * np.cos(4 * t)


def _wave_dot(t):
    return 5 * np.cos(t) - 4 * np.sin(2 * t) + 12 * np.cos(3 * t) - 12 * np.sin(4 * t)


def _affine_barrier(name, a, b, lambdas, rho, rho_tilde):
    a = np.asarray(a, dtype=float)
    chain = ((lambda x, a=a, b=b: float(a @ x + b), lambda x, a=a: a.copy()),)
    return Barrier(name, 1, tuple(lambdas), chain, rho, rho_tilde)


# --- Example 1 -------------------------------------------------------------

def _ex1_f(x):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    out[..., 0] = x[..., 1]
    out[..., 1] = x[..., 0] * x[..., 1]
    return out


def _ex1_g(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0 + np.sin(x[..., 0]) ** 2
    return out


def _ex1_p(x):
    return np.asarray(x, dtype=float)[..., :, None].copy()


_EYE2 = np.eye(2)
_EYE2.setflags(write=False)


def _ex1_dp(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return _EYE2[None]
    return np.broadcast_to(_EYE2, x.shape[:-1] + (1, 2, 2))


def _ex1_joint(x, with_dp=True):
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    f = np.empty(x.shape)
    f[..., 0] = x2
    f[..., 1] = x1 * x2
    g = np.zeros(x.shape[:-1] + (2, 2))
    g[..., 0, 0] = 1.0
    g[..., 1, 1] = 1.0 + np.sin(x1) ** 2
    dp = None
    if with_dp:
        dp = np.zeros(x.shape[:-1] + (1, 2, 2))
        dp[..., 0, 0, 0] = dp[..., 0, 1, 1] = 1.0
    return f, g, x[..., :, None].copy(), dp


def make_example1(lambdas=(50.0, 50.0), rho=1.0, rho_tilde=1.0, horizon=20.0, dt=1e-3) -> Scenario:
    """Two-state academic example with a state-dependent disturbance gain."""
    model = SystemModel("example1", 2, 2, 1, _ex1_f, _ex1_g, _ex1_p, _ex1_dp, _ex1_joint)
    sig = DisturbanceSignal(
        w=lambda t: np.array([_wave(t)]),
        wdot=lambda t: np.array([_wave_dot(t)]),
        omega0=8.0,
        omega1=26.0,
    )
    barriers = (
        _affine_barrier("h1", [1.0, 0.0], 1.0, lambdas, rho, rho_tilde),   # x1 >= -1
        _affine_barrier("h2", [0.0, -1.0], 1.0, lambdas, rho, rho_tilde),  # x2 <= 1
    )
    return Scenario(
        name="example1",
        model=model,
        disturbance=sig,
        x0=np.array([-0.5, -0.5]),
        u0=np.zeros(2),
        barriers=barriers,
        x_ref=lambda t: np.array([2 * np.sin(t), 2 * np.cos(t)]),
        xdot_ref=lambda t: np.array([2 * np.cos(t), -2 * np.sin(t)]),
        horizon=horizon,
        dt=dt,
    )


# --- two-link planar manipulator -------------------------------------------

@dataclass(frozen=True)
class ManipulatorParams:
    """Point masses at the distal end of each link; SI units."""

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    grav: float = 9.8


class TwoLinkArm:
    """M(q) q'' + C(q, q') q' + G(q) = tau + J(q)^T F_d, state (q1, q2, q1', q2')."""

    def __init__(self, prm: ManipulatorParams = ManipulatorParams()):
        self.prm = prm

    def inertia(self, q):
        P = self.prm
        c2 = np.cos(q[..., 1])
        M = np.empty(q.shape[:-1] + (2, 2))
        M[..., 0, 0] = (P.m1 + P.m2) * P.l1**2 + P.m2 * P.l2**2 + 2 * P.m2 * P.l1 * P.l2 * c2
        M[..., 0, 1] = M[..., 1, 0] = P.m2 * P.l2**2 + P.m2 * P.l1 * P.l2 * c2
        M[..., 1, 1] = P.m2 * P.l2**2
        return M

    def inertia_inv(self, q):
        M = self.inertia(q)
        det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] ** 2
        if np.any(det <= 0):
            raise ModelError("inertia matrix is singular")
        inv = np.empty_like(M)
        inv[..., 0, 0] = M[..., 1, 1] / det
        inv[..., 1, 1] = M[..., 0, 0] / det
        inv[..., 0, 1] = inv[..., 1, 0] = -M[..., 0, 1] / det
        return inv

    def dinertia_dq2(self, q):
        P = self.prm
        k = P.m2 * P.l1 * P.l2 * np.sin(q[..., 1])
        dM = np.zeros(q.shape[:-1] + (2, 2))
        dM[..., 0, 0] = -2 * k
        dM[..., 0, 1] = dM[..., 1, 0] = -k
        return dM

    def coriolis_times_qdot(self, q, dq):
        P = self.prm
        k = P.m2 * P.l1 * P.l2 * np.sin(q[..., 1])
        return np.stack([-k * dq[..., 1] * (2 * dq[..., 0] + dq[..., 1]), k * dq[..., 0] ** 2], axis=-1)

    def gravity(self, q):
        P = self.prm
        c1 = np.cos(q[..., 0])
        c12 = np.cos(q[..., 0] + q[..., 1])
        return np.stack([(P.m1 + P.m2) * P.grav * P.l1 * c1 + P.m2 * P.grav * P.l2 * c12,
                         P.m2 * P.grav * P.l2 * c12], axis=-1)

    def jacobian(self, q):
        P = self.prm
        s1, c1 = np.sin(q[..., 0]), np.cos(q[..., 0])
        s12, c12 = np.sin(q[..., 0] + q[..., 1]), np.cos(q[..., 0] + q[..., 1])
        J = np.empty(q.shape[:-1] + (2, 2))
        J[..., 0, 0] = -P.l1 * s1 - P.l2 * s12
        J[..., 0, 1] = -P.l2 * s12
        J[..., 1, 0] = P.l1 * c1 + P.l2 * c12
        J[..., 1, 1] = P.l2 * c12
        return J

    def djacobian(self, q):
        """d J / d q_k stacked on a leading axis of length 2."""
        P = self.prm
        s1, c1 = np.sin(q[..., 0]), np.cos(q[..., 0])
        s12, c12 = np.sin(q[..., 0] + q[..., 1]), np.cos(q[..., 0] + q[..., 1])
        d1 = np.empty(q.shape[:-1] + (2, 2))
        d1[..., 0, 0] = -P.l1 * c1 - P.l2 * c12
        d1[..., 0, 1] = -P.l2 * c12
        d1[..., 1, 0] = -P.l1 * s1 - P.l2 * s12
        d1[..., 1, 1] = -P.l2 * s12
        d2 = np.empty_like(d1)
        d2[..., 0, 0] = d2[..., 0, 1] = -P.l2 * c12
        d2[..., 1, 0] = d2[..., 1, 1] = -P.l2 * s12
        return d1, d2

    def energy(self, x):
        """Kinetic and potential energy (potential zero at q1 = q1 + q2 = 0 heights)."""
        P = self.prm
        x = np.asarray(x, dtype=float)
        q, dq = x[..., :2], x[..., 2:]
        kin = 0.5 * np.einsum("...i,...ij,...j->...", dq, self.inertia(q), dq)
        pot = (P.m1 + P.m2) * P.grav * P.l1 * np.sin(q[..., 0]) + P.m2 * P.grav * P.l2 * np.sin(q[..., 0] + q[..., 1])
        return kin, pot

    def parts(self, x, with_dp: bool = True):
        """f, g, p and (optionally) dp in one pass."""
        x = np.asarray(x, dtype=float)
        q, dq = x[..., :2], x[..., 2:]
        batch = x.shape[:-1]
        P = self.prm
        Minv = self.inertia_inv(q)
        s1, c1 = np.sin(q[..., 0]), np.cos(q[..., 0])
        s12, c12 = np.sin(q[..., 0] + q[..., 1]), np.cos(q[..., 0] + q[..., 1])
        k = P.m2 * P.l1 * P.l2 * np.sin(q[..., 1])
        rhs = np.empty(batch + (2,))
        rhs[..., 0] = -k * dq[..., 1] * (2 * dq[..., 0] + dq[..., 1]) + (P.m1 + P.m2) * P.grav * P.l1 * c1 \
            + P.m2 * P.grav * P.l2 * c12
        rhs[..., 1] = k * dq[..., 0] ** 2 + P.m2 * P.grav * P.l2 * c12
        f = np.empty(batch + (4,))
        f[..., :2] = dq
        f[..., 2:] = -(Minv @ rhs[..., None])[..., 0]
        g = np.zeros(batch + (4, 2))
        g[..., 2:, :] = Minv
        JT = np.empty(batch + (2, 2))
        JT[..., 0, 0] = -P.l1 * s1 - P.l2 * s12
        JT[..., 1, 0] = -P.l2 * s12
        JT[..., 0, 1] = P.l1 * c1 + P.l2 * c12
        JT[..., 1, 1] = P.l2 * c12
        MJ = Minv @ JT
        p = np.zeros(batch + (4, 2))
        p[..., 2:, :] = MJ
        if not with_dp:
            return f, g, p, None
        d1 = np.empty(batch + (2, 2))
        d1[..., 0, 0] = -P.l1 * c1 - P.l2 * c12
        d1[..., 1, 0] = -P.l2 * c12
        d1[..., 0, 1] = -P.l1 * s1 - P.l2 * s12
        d1[..., 1, 1] = -P.l2 * s12
        d2 = np.empty(batch + (2, 2))
        d2[..., 0, 0] = d2[..., 1, 0] = -P.l2 * c12
        d2[..., 0, 1] = d2[..., 1, 1] = -P.l2 * s12
        dM = np.zeros(batch + (2, 2))
        dM[..., 0, 0] = -2 * k
        dM[..., 0, 1] = dM[..., 1, 0] = -k
        dP = (Minv @ d1, -Minv @ dM @ MJ + Minv @ d2)
        dp = np.zeros(batch + (2, 4, 4))
        for j in range(2):
            dp[..., :, 2:, j] = np.swapaxes(dP[j], -1, -2)
        return f, g, p, dp

    # control-affine pieces
    def f(self, x):
        x = np.asarray(x, dtype=float)
        q, dq = x[..., :2], x[..., 2:]
        rhs = self.coriolis_times_qdot(q, dq) + self.gravity(q)
        acc = -np.einsum("...ij,...j->...i", self.inertia_inv(q), rhs)
        return np.concatenate([dq, acc], axis=-1)

    def g(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (4, 2))
        out[..., 2:, :] = self.inertia_inv(x[..., :2])
        return out

    def p(self, x):
        x = np.asarray(x, dtype=float)
        q = x[..., :2]
        out = np.zeros(x.shape[:-1] + (4, 2))
        out[..., 2:, :] = self.inertia_inv(q) @ np.swapaxes(self.jacobian(q), -1, -2)
        return out

    def dp(self, x):
        x = np.asarray(x, dtype=float)
        q = x[..., :2]
        Minv = self.inertia_inv(q)
        JT = np.swapaxes(self.jacobian(q), -1, -2)
        dJT = [np.swapaxes(d, -1, -2) for d in self.djacobian(q)]
        dMq2 = self.dinertia_dq2(q)
        # d(M^-1 J^T)/dq_k = -M^-1 dM_k M^-1 J^T + M^-1 dJ^T_k ; dM/dq1 = 0
        dP = [Minv @ dJT[0], -Minv @ dMq2 @ Minv @ JT + Minv @ dJT[1]]
        out = np.zeros(x.shape[:-1] + (2, 4, 4))
        for k in range(2):
            # column i of p is (0, (M^-1 J^T)[:, i]); row block 2:4, column k
            out[..., :, 2:, k] = np.swapaxes(dP[k], -1, -2)
        return out


def _joint_barrier(name, joint, sign, offset, lambdas, rho, rho_tilde):
    """h_0 = sign*q_joint + offset for the arm; relative degree two."""
    a = np.zeros(4)
    a[joint] = sign
    lam0 = lambdas[0]

    def h0(x):
        return float(sign * x[joint] + offset)

    def h1(x):
        return float(sign * x[2 + joint] + lam0 * (sign * x[joint] + offset))

    grad1 = np.zeros(4)
    grad1[joint] = lam0 * sign
    grad1[2 + joint] = sign
    chain = ((h0, lambda x: a.copy()), (h1, lambda x: grad1.copy()))
    return Barrier(name, 2, tuple(lambdas), chain, rho, rho_tilde)


def make_manipulator(lambdas=(25.0, 30.0, 50.0), rho=1.0, rho_tilde=1.0, horizon=10.0, dt=5e-4,
                     prm: ManipulatorParams = ManipulatorParams()) -> Scenario:
    """Two-link planar arm with an end-effector force disturbance."""
    arm = TwoLinkArm(prm)
    model = SystemModel("manipulator", 4, 2, 2, arm.f, arm.g, arm.p, arm.dp, joint=arm.parts)
    sig = DisturbanceSignal(
        w=lambda t: np.full(2, _wave(t)),
        wdot=lambda t: np.full(2, _wave_dot(t)),
        omega0=11.0,
        omega1=37.0,
    )
    barriers = (
        _joint_barrier("h1", 0, 1.0, 1.0, lambdas, rho, rho_tilde),    # q1 >= -1
        _joint_barrier("h2", 0, -1.0, 1.5, lambdas, rho, rho_tilde),   # q1 <= 1.5
        _joint_barrier("h3", 1, 1.0, 1.2, lambdas, rho, rho_tilde),    # q2 >= -1.2
        _joint_barrier("h4", 1, -1.0, 1.0, lambdas, rho, rho_tilde),   # q2 <= 1
    )
    return Scenario(
        name="manipulator",
        model=model,
        disturbance=sig,
        x0=np.zeros(4),
        u0=np.zeros(2),
        barriers=barriers,
        x_ref=lambda t: np.array([2 * np.sin(t), 2 * np.sin(t), 2 * np.cos(t), 2 * np.cos(t)]),
        xdot_ref=lambda t: np.array([2 * np.cos(t), 2 * np.cos(t), -2 * np.sin(t), -2 * np.sin(t)]),
        horizon=horizon,
        dt=dt,
        params={"arm": arm},
    )


SCENARIOS = {"example1": make_example1, "manipulator": make_manipulator}


def make_scenario(name: str, **kwargs) -> Scenario:
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise ContractError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return factory(**kwargs)


def relative_degree_check(model: SystemModel, barrier: Barrier, samples: Sequence[Array], tol=1e-10):
    """Check that u and w stay out of h_0..h_{iota-2} and show up in h_{iota-1}.

    Returns a dict with the largest |L_g h_k|, |L_p h_k| for k <= iota-2 and the
    largest |L_g h_{iota-1}|, |L_p h_{iota-1}| over the samples.
    """
    low = 0.0
    top_g = top_p = 0.0
    for x in samples:
        for k, (_, grad) in enumerate(barrier.chain):
            _, lg, lp = lie_derivatives(model, grad, x)
            if k <= barrier.iota - 2:
                low = max(low, float(np.max(np.abs(lg))), float(np.max(np.abs(lp))))
            else:
                top_g = max(top_g, float(np.max(np.abs(lg))))
                top_p = max(top_p, float(np.max(np.abs(lp))))
    return {"low_order_max": low, "top_g_max": top_g, "top_p_max": top_p,
            "ok": low <= tol and top_g > tol and top_p > tol}
