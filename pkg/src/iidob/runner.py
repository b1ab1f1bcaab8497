"""Closed-loop simulation: plant, observer, filter, tracking law and QP wired per step.

The coupled state is stacked as ``[x, u, r, xhat, xi, dhat_f, u_d^f]``.  At each
grid time the algebra (observer terms, constraints, QP) is evaluated once and v
is held over the step.  With v frozen, x and u do not depend on the estimator
states inside a step, so the default integrator advances (x, u) by classical
RK4 and then the stiff estimator block (r, xhat, dhat, dhat_f, u_d^f) by an
L-stable SDIRK method along the cubic Hermite interpolant of x.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dfilter, safety, tracking
from .config import SimConfig
from .errors import (ConfigError, ContractError, ControllerError, InfeasibleQPError, SimulationError,
                     StepError)
from .models import Scenario, make_scenario
from .numerics import QuadRule, hermite, rk4_step, sdirk3_step
from .observer import beta as beta_fn
from .observer import (BoundReport, local_terms, ObserverState, ObserverTerms, bound_envelopes, estimate_rates,
                       initial_state, observer_rhs, observer_terms, validate_gains)
from .safety import Check

log = logging.getLogger(__name__)

SAFETY_TOL = 1e-6
ENVELOPE_TOL = 1e-6


# --- setup -----------------------------------------------------------------------

@dataclass
class Setup:
    """Everything derived from a config before the first step."""

    cfg: SimConfig
    scenario: Scenario
    report: BoundReport
    zeta: float
    rule: QuadRule
    rows: Optional[np.ndarray] = None
    pos: Optional[np.ndarray] = None
    checks: list = field(default_factory=list)


def build_scenario(cfg: SimConfig) -> Scenario:
    return make_scenario(cfg.scenario, lambdas=cfg.lambdas, rho=cfg.rho, rho_tilde=cfg.rho_tilde,
                         horizon=cfg.horizon, dt=cfg.dt)


def prepare(cfg: SimConfig, scenario: Optional[Scenario] = None) -> Setup:
    """Check every design inequality; raise ConfigError naming the violated ones."""
    sc = scenario if scenario is not None else build_scenario(cfg)
    model = sc.model
    report = validate_gains(cfg.gains, model.n, cfg.r0, cfg.omega0, cfg.omega1, model.l)
    zt = dfilter.zeta(cfg.filter, report.kappa)
    bad = []
    for b in sc.barriers:
        if len(b.lambdas) != b.iota + 1:
            bad.append(f"{b.name}: need {b.iota + 1} rates lambda_0..lambda_iota, got {len(b.lambdas)}")
            continue
        if not b.lambdas[b.iota] < 2 * report.kappa:
            bad.append(f"{b.name}: lambda_iota < 2 kappa")
        if not b.lambdas[b.iota - 1] < zt:
            bad.append(f"{b.name}: lambda_(iota-1) < zeta")
        if not (b.rho > 0 and b.rho_tilde > 0):
            bad.append(f"{b.name}: rho > 0 and rho_tilde > 0")
    if bad:
        raise ConfigError("barrier rates violate: " + "; ".join(bad), bad)
    rng = np.random.default_rng(cfg.seed)
    samples = [sc.x0 + rng.uniform(-1, 1, model.n) for _ in range(8)]
    for b in sc.barriers:
        safety.build_chain(b, model, samples)
    if cfg.controller == "robust-cbf" and any(b.iota != 1 for b in sc.barriers):
        raise ConfigError("robust-cbf baseline needs relative-degree-one barriers")
    rows = pos = None
    if model.n > model.m:
        # second-order plant: track on the velocity rows with a shaped reference
        rows = np.arange(model.n - model.m, model.n)
        pos = np.arange(0, model.n - model.m)
        if cfg.position_gain is None or not cfg.position_gain > 0:
            raise ConfigError("position_gain must be positive for this scenario")
    setup = Setup(cfg, sc, report, zt, QuadRule(cfg.quad_nodes, cfg.quad_segment), rows, pos)
    setup.checks = static_checks(setup)
    return setup


def static_checks(setup: Setup) -> list:
    cfg, sc, rep = setup.cfg, setup.scenario, setup.report
    n = sc.model.n
    out = [
        Check("gamma > n/(2c) + theta", rep.kappa > 0, rep.kappa),
        Check("k2 > 1/(4 gamma - 2n/c - 4 theta)", cfg.gains.k2 > rep.k2_threshold, cfg.gains.k2 - rep.k2_threshold),
        Check("r(0) > 1", cfg.r0 > 1, cfg.r0 - 1),
        Check("chi > 0", rep.chi > 0, rep.chi),
        Check("T2 > 1/(4 kappa)", cfg.filter.T2 > 1 / (4 * rep.kappa), cfg.filter.T2 - 1 / (4 * rep.kappa)),
    ]
    # per-barrier rate conditions are reported with the initial-condition checks
    log.debug("static checks for n=%d: %d entries", n, len(out))
    return out


def initial_condition_checks(setup: Setup, z0=None) -> list:
    sc, cfg = setup.scenario, setup.cfg
    x0 = np.asarray(sc.x0, dtype=float)
    dhat0 = np.zeros(sc.model.n)
    if z0 is None and cfg.z0_bound is not None:
        z0 = np.array([float(cfg.z0_bound)])
    out = []
    for b in sc.barriers:
        out.extend(safety.validate_theorem2(b, sc.model, setup.report, setup.zeta, x0, sc.u0, cfg.r0,
                                            dhat0, dhat0, z0))
    return out


def oracle_z0(setup: Setup) -> np.ndarray:
    """z(0) from the true disturbance; the observer starts from a zero estimate."""
    sc = setup.scenario
    x0 = np.asarray(sc.x0, dtype=float)
    d0 = sc.model.p(x0) @ np.atleast_1d(sc.disturbance.w(0.0))
    return -d0 / setup.cfg.r0


# --- state layout ----------------------------------------------------------------

class Layout:
    """Slices of the stacked state; ``obs`` holds dhat (estimate form) or xi (literal form).

    Slot ``r`` stores r - 1, which stays positive and is resolved relative to its size.
    """

    def __init__(self, n, m):
        self.n, self.m = n, m
        o = 0
        self.x = slice(o, o + n); o += n
        self.u = slice(o, o + m); o += m
        self.r = o; o += 1
        self.xhat = slice(o, o + n); o += n
        self.obs = slice(o, o + n); o += n
        self.df = slice(o, o + n); o += n
        self.udf = slice(o, o + m); o += m
        self.size = o
        self.block = np.arange(self.xhat.start, self.size)


@dataclass
class StepAlgebra:
    """Algebraic signals at one grid time."""

    terms: ObserverTerms
    dhat: np.ndarray
    xi: np.ndarray
    r_dot: float
    df_dot: np.ndarray
    u_d: np.ndarray
    v_nom: np.ndarray
    v: np.ndarray
    h: np.ndarray
    psi0: np.ndarray
    psi1: np.ndarray
    active: np.ndarray
    x_d: np.ndarray


FAST = ("dx", "delta")


class ClosedLoop:
    """Right-hand side of the coupled ODE and the per-step algebra.

    With ``integrator="sdirk3"`` the observer is carried as (xhat, dhat) and
    the estimator block is integrated implicitly.  With ``integrator="rk4"``
    the literal (xhat, xi) state and ``observer_rhs`` go through classical RK4,
    which is only stable for small steps or mild gains.
    """

    def __init__(self, setup: Setup):
        self.s = setup
        self.cfg = setup.cfg
        self.sc = setup.scenario
        self.model = setup.scenario.model
        self.L = Layout(self.model.n, self.model.m)
        self.use_dhat = self.cfg.controller != "robust-cbf"
        self.literal = self.cfg.integrator == "rk4"

    # reference shaped for second-order plants
    def reference(self, t, x):
        xd = np.asarray(self.sc.x_ref(t), dtype=float)
        xdd = np.asarray(self.sc.xdot_ref(t), dtype=float)
        if self.s.rows is None:
            return xd, xdd
        return tracking.shaped_reference(x, xd, xdd, self.s.pos, self.s.rows, self.cfg.position_gain)

    def desired(self, t, x, r, dhat):
        xr, xrd = self.reference(t, x)
        dh = dhat if self.use_dhat else np.zeros_like(dhat)
        return tracking.desired_input(self.model, x, xr, xrd, r, dh, self.cfg.tracking, self.s.rows), xr

    def initial(self) -> np.ndarray:
        sc, cfg, L = self.sc, self.cfg, self.L
        x0 = np.asarray(sc.x0, dtype=float)
        u0 = np.asarray(sc.u0, dtype=float)
        st0 = initial_state(self.model, cfg.gains, x0, u0, cfg.r0, self.s.rule)
        y = np.zeros(L.size)
        y[L.x], y[L.u], y[L.r] = x0, u0, st0.r - 1.0
        y[L.xhat] = st0.xhat
        y[L.obs] = st0.xi if self.literal else 0.0  # dhat(0) = 0
        # start the surface filter at the desired input so the first v is not a spike
        y[L.udf] = self.desired(0.0, x0, st0.r, np.zeros(self.model.n))[0]
        return y

    def terms(self, y, want=FAST):
        L = self.L
        if want == FAST:
            return local_terms(self.model, self.cfg.gains, y[L.x], y[L.xhat], y[L.u])
        return observer_terms(self.model, self.cfg.gains, y[L.x], y[L.xhat], y[L.u], self.s.rule, want=want)

    def plant(self, t, y):
        L = self.L
        x, u = y[L.x], y[L.u]
        w = np.atleast_1d(self.sc.disturbance.w(t))
        f, g, p, _ = self.model.parts(x, with_dp=False)
        return f + g @ u + p @ w

    def rhs(self, t, y, v, terms=None):
        L, cfg, model = self.L, self.cfg, self.model
        x, u, r = y[L.x], y[L.u], 1.0 + float(y[L.r])
        # r >= 1 is checked on the grid; Newton iterates may wander below it
        out = np.empty(L.size)
        xdot = self.plant(t, y)
        out[L.x] = xdot
        out[L.u] = v
        if self.literal:
            if terms is None:
                terms = self.terms(y, want=("beta", "dx", "dxhat", "du", "delta"))
            st = ObserverState(y[L.xhat], y[L.obs], max(r, 1.0))
            rates = observer_rhs(st, model, cfg.gains, x, u, v, self.s.rule, terms)
            dhat = rates.dhat
            out[L.r], out[L.xhat], out[L.obs] = rates.r_dot, rates.xhat_dot, rates.xi_dot
        else:
            if terms is None:
                terms = self.terms(y)
            dhat = y[L.obs]
            er = estimate_rates(model, cfg.gains, x, y[L.xhat], dhat, r, u, xdot, terms)
            out[L.r], out[L.xhat], out[L.obs] = er.r_dot, er.xhat_dot, er.dhat_dot
        a = cfg.filter.T1 + cfg.filter.T2 * r * r * dfilter.dbeta_dx_norm(terms.dbeta_dx) ** 2
        out[L.df] = -a * (y[L.df] - dhat)
        u_d, _ = self.desired(t, x, r, dhat)
        out[L.udf] = tracking.surface_rhs(y[L.udf], u_d, cfg.tracking.eps)
        return out

    def block_jacobian(self, t, y, terms, ctx=None) -> np.ndarray:
        """Jacobian of the (xhat, dhat, dhat_f, u_d^f) rates in those coordinates, r held fixed.

        Derivatives of psi and the delta coefficients are dropped; they only
        enter multiplied by the small error xhat - x.
        """
        L, cfg, model = self.L, self.cfg, self.model
        n, m = model.n, model.m
        r = 1.0 + float(y[L.r])
        col_sq = np.sum(terms.deltas**2, axis=0)
        lam = (cfg.gains.k1 + cfg.gains.k2 * r * r) + 0.5 * cfg.gains.c * r * r * col_sq
        a = cfg.filter.T1 + cfg.filter.T2 * r * r * dfilter.dbeta_dx_norm(terms.dbeta_dx) ** 2
        J = np.zeros((3 * n + m, 3 * n + m))
        X, D, F, U = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n), slice(3 * n, None)
        J[X, X] = -np.diag(lam)
        J[X, D] = np.eye(n)
        J[D, D] = -np.diag(terms.dbeta_dx)
        J[F, D] = a * np.eye(n)
        J[F, F] = -a * np.eye(n)
        J[U, U] = -np.eye(m) / cfg.tracking.eps
        if self.use_dhat:
            if ctx is None:
                ctx = self.stage_context(t, y)
            idx = ctx["idx"]
            S = np.zeros((idx.size, n))
            S[np.arange(idx.size), idx] = 1.0
            J[U, D] = -(ctx["Gi"] @ S) / cfg.tracking.eps
        return J

    def algebra(self, t, y, terms=None) -> StepAlgebra:
        cfg, model, L = self.cfg, self.model, self.L
        x, u, r = y[L.x], y[L.u], 1.0 + float(y[L.r])
        df, udf = y[L.df], y[L.udf]
        if terms is None and self.literal:
            terms = self.terms(y, want=("beta", "dx", "dxhat", "du", "delta"))
        elif terms is None:
            # beta only feeds the logged xi in estimate form
            terms = self.terms(y)._replace(beta=beta_fn(model, cfg.gains, x, y[L.xhat], u, self.s.rule))
        e = y[L.xhat] - x
        col_sq = np.sum(terms.deltas**2, axis=0)
        r_dot = -cfg.gains.theta * (r - 1) + 0.5 * cfg.gains.c * r * float(np.sum(e * e * col_sq))
        if self.literal:
            xi = y[L.obs]
            dhat = xi + terms.beta
        else:
            dhat = y[L.obs]
            xi = dhat - terms.beta
        nb = dfilter.dbeta_dx_norm(terms.dbeta_dx)
        df_dot = dfilter.filter_rhs(df, cfg.filter, dhat, nb, r)
        u_d, xr = self.desired(t, x, r, dhat)
        v_nom = tracking.nominal_v(model, x, xr, u, udf, u_d, cfg.tracking, self.s.rows)
        nbar = len(self.sc.barriers)
        h = np.array([b.h(x) for b in self.sc.barriers])
        psi0 = np.zeros(nbar)
        psi1 = np.zeros((nbar, model.m))
        pairs = []
        if cfg.controller == "iidob-cbf-qp":
            fg_rows = model.parts(safety.fd_points(x)[0], with_dp=False)[:2]
            for k, b in enumerate(self.sc.barriers):
                cp = safety.constraint_pair(b, model, x, u, r, dhat, df, r_dot, df_dot, self.s.report, self.s.zeta,
                                            fg_rows)
                psi0[k], psi1[k] = cp.psi0, cp.psi1
                pairs.append((cp.psi0, cp.psi1))
        elif cfg.controller == "robust-cbf":
            for k, b in enumerate(self.sc.barriers):
                p0, p1, _ = safety.robust_v_constraint(b, model, x, u, cfg.omega0, cfg.rate_h, cfg.rate_b)
                psi0[k], psi1[k] = p0, p1
                pairs.append((p0, p1))
        if pairs:
            res = safety.solve_qp_multi(pairs, v_nom)
            v, active = res.v, np.array(res.active, dtype=bool)
        else:
            v, active = v_nom.copy(), np.zeros(nbar, dtype=bool)
        return StepAlgebra(terms, dhat, xi, r_dot, df_dot, u_d, v_nom, v, h, psi0, psi1, active,
                           np.asarray(self.sc.x_ref(t), dtype=float))

    def stage_context(self, t, y) -> dict:
        """Everything in the block rates that depends only on (t, x, u)."""
        L, model = self.L, self.model
        x, u = y[L.x], y[L.u]
        f, g, p, _ = model.parts(x, with_dp=False)
        fgu = f + g @ u
        w = np.atleast_1d(self.sc.disturbance.w(t))
        xr, xrd = self.reference(t, x)
        idx = np.arange(model.n) if self.s.rows is None else self.s.rows
        # the input block is conditioning-checked on the grid by ``desired``
        gi = g[idx]
        Gi = np.linalg.inv(gi) if gi.shape[0] == gi.shape[1] else np.linalg.pinv(gi)
        return {"x": x, "u": u, "fgu": fgu, "xdot": fgu + p @ w, "xr": xr, "xrd": xrd,
                "idx": idx, "Gi": Gi, "f_idx": f[idx], "g": g}

    def block_rates(self, ctx, r: float, zb, terms):
        """Rates of (xhat, dhat, dhat_f, u_d^f) for a given r, and the source sum(e^2 |delta_.j|^2) of r."""
        cfg, n = self.cfg, self.model.n
        g = cfg.gains
        xhat, dhat, df, udf = zb[:n], zb[n:2 * n], zb[2 * n:3 * n], zb[3 * n:]
        x = ctx["x"]
        e = xhat - x
        col_sq = np.sum(terms.deltas**2, axis=0)
        lam = (g.k1 + g.k2 * r * r) + 0.5 * g.c * r * r * col_sq
        out = np.empty(zb.size)
        out[:n] = ctx["fgu"] + dhat - lam * e
        out[n:2 * n] = terms.dbeta_dx * (ctx["xdot"] - ctx["fgu"] - dhat)
        a = cfg.filter.T1 + cfg.filter.T2 * r * r * float(np.sum(terms.dbeta_dx**2))
        out[2 * n:3 * n] = -a * (df - dhat)
        idx = ctx["idx"]
        dh = dhat[idx] if self.use_dhat else 0.0
        target = ctx["f_idx"] + (cfg.tracking.alpha1 + 0.5 * r * r) * (x - ctx["xr"])[idx] + dh - ctx["xrd"][idx]
        out[3 * n:] = (-ctx["Gi"] @ target - udf) / cfg.tracking.eps
        return out, float(np.sum(e * e * col_sq))

    def step(self, t, y, alg: StepAlgebra, dt):
        v = alg.v
        L = self.L
        if self.literal:
            def deriv(tt, yy):
                return self.rhs(tt, yy, v, alg.terms if yy is y else None)
            return rk4_step(deriv, t, y, dt)

        # plant and input first; they see only v inside the step
        xu = np.r_[L.x.start:L.u.stop]
        n = self.model.n

        def plant_rhs(tt, z):
            full = y.copy()
            full[xu] = z
            return np.concatenate([self.plant(tt, full), v])

        z0 = y[xu]
        z1 = rk4_step(plant_rhs, t, z0, dt)
        xd0 = self.plant(t, y)
        yend = y.copy()
        yend[xu] = z1
        xd1 = self.plant(t + dt, yend)
        blk = L.block
        q0 = float(y[L.r])
        ctxs = {}
        last = {}
        src = {}

        # r follows its grid slope inside the step; q = r - 1 is advanced afterwards
        def full_at(tt, zb):
            out = y.copy()
            out[L.x] = hermite(z0[:n], z1[:n], xd0, xd1, dt, (tt - t) / dt)
            out[L.u] = y[L.u] + (tt - t) * v
            out[L.r] = q0 + (tt - t) * alg.r_dot
            out[blk] = zb
            return out

        def fun(tt, zb):
            full = full_at(tt, zb)
            if tt not in ctxs:
                ctxs[tt] = self.stage_context(tt, full)
            terms = self.terms(full)
            last["key"], last["terms"] = (tt, zb.tobytes()), terms
            rates, src[tt] = self.block_rates(ctxs[tt], 1.0 + float(full[L.r]), zb, terms)
            return rates

        def jac(tt, zb):
            full = full_at(tt, zb)
            terms = last["terms"] if last.get("key") == (tt, zb.tobytes()) else self.terms(full)
            if tt not in ctxs:
                ctxs[tt] = self.stage_context(tt, full)
            return self.block_jacobian(tt, full, terms, ctxs[tt])

        out = yend.copy()
        out[blk] = sdirk3_step(fun, jac, t, y[blk], dt, tol=1e-8)
        # source at the grid point and at the converged stages, trapezoid in time
        c = self.cfg.gains.c
        e0 = y[L.xhat] - y[L.x]
        nodes = [(0.0, float(np.sum(e0 * e0 * np.sum(alg.terms.deltas**2, axis=0))))]
        nodes += sorted(((tt - t) / dt, sv) for tt, sv in src.items() if tt > t)
        s_bar = 0.0
        for (sa, va), (sb, vb) in zip(nodes[:-1], nodes[1:]):
            s_bar += 0.5 * (sb - sa) * (va + vb)
        s_bar /= nodes[-1][0]
        out[L.r] = advance_scaling(q0, self.cfg.gains.theta, 0.5 * c * s_bar, dt)
        return out


def advance_scaling(q0: float, theta: float, b: float, dt: float) -> float:
    """Exact step of q' = (b - theta) q + b for constant b >= 0; keeps q >= 0."""
    a = b - theta
    z = a * dt
    if z > 700.0:
        return math.inf  # past float range; the caller's finiteness check stops the run
    phi = math.expm1(z) / z if abs(z) > 1e-12 else 1.0
    return q0 * math.exp(z) + b * dt * phi


# --- logging ----------------------------------------------------------------------

class TrajectoryLog:
    """Column-oriented trajectory on a uniform grid.

    Column order: t, x*, xhat*, u*, r, dhat*, dhatf*, h*, psi0_*, psi1_<k>_<j>,
    active_*, v*, udf*, xi*, xd*; oracle runs append d*, z*, ed_norm, ef_norm,
    rho_z, rho_r, rho_f.
    """

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        self.index = {c: i for i, c in enumerate(self.columns)}
        self._rows: list = []
        self._data: Optional[np.ndarray] = None

    @staticmethod
    def layout(n, m, nbar, oracle):
        cols = ["t"]
        cols += [f"x{i + 1}" for i in range(n)]
        cols += [f"xhat{i + 1}" for i in range(n)]
        cols += [f"u{i + 1}" for i in range(m)]
        cols += ["r"]
        cols += [f"dhat{i + 1}" for i in range(n)]
        cols += [f"dhatf{i + 1}" for i in range(n)]
        cols += [f"h{k + 1}" for k in range(nbar)]
        cols += [f"psi0_{k + 1}" for k in range(nbar)]
        cols += [f"psi1_{k + 1}_{j + 1}" for k in range(nbar) for j in range(m)]
        cols += [f"active_{k + 1}" for k in range(nbar)]
        cols += [f"v{j + 1}" for j in range(m)]
        cols += [f"udf{j + 1}" for j in range(m)]
        cols += [f"xi{i + 1}" for i in range(n)]
        cols += [f"xd{i + 1}" for i in range(n)]
        if oracle:
            cols += [f"d{i + 1}" for i in range(n)]
            cols += [f"z{i + 1}" for i in range(n)]
            cols += ["ed_norm", "ef_norm", "rho_z", "rho_r", "rho_f"]
        return cols

    def append(self, row):
        row = np.asarray(row, dtype=float)
        if row.shape != (len(self.columns),):
            raise ContractError("log row has the wrong width")
        self._rows.append(row)
        self._data = None

    @property
    def data(self) -> np.ndarray:
        if self._data is None:
            self._data = (np.array(self._rows) if self._rows else np.empty((0, len(self.columns))))
        return self._data

    def __len__(self):
        return len(self._rows)

    def __getitem__(self, name):
        return self.data[:, self.index[name]]

    def group(self, prefix, count):
        return np.stack([self[f"{prefix}{i + 1}"] for i in range(count)], axis=1)

    def has(self, name):
        return name in self.index

    @classmethod
    def from_array(cls, columns, data):
        out = cls(columns)
        out._rows = [np.asarray(r, dtype=float) for r in np.atleast_2d(data)]
        return out


@dataclass
class RunResult:
    log: TrajectoryLog
    checks: list
    setup: Setup
    metrics: dict


def _row(t, y, alg: StepAlgebra, cl: ClosedLoop, oracle_vals):
    L = cl.L
    parts = [[t], y[L.x], y[L.xhat], y[L.u], [1.0 + y[L.r]], alg.dhat, y[L.df], alg.h, alg.psi0,
             alg.psi1.ravel(), alg.active.astype(float), alg.v, y[L.udf], alg.xi, alg.x_d]
    if oracle_vals is not None:
        parts.append(oracle_vals)
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def run(cfg: SimConfig, scenario: Optional[Scenario] = None, progress: bool = False) -> RunResult:
    """Simulate one closed loop over the configured horizon."""
    setup = prepare(cfg, scenario)
    sc, model = setup.scenario, setup.scenario.model
    cl = ClosedLoop(setup)
    L = cl.L
    n, m = model.n, model.m
    nbar = len(sc.barriers)
    dt = cfg.dt
    steps = int(round(cfg.horizon / dt))
    if not math.isclose(steps * dt, cfg.horizon, rel_tol=1e-9):
        raise ConfigError("horizon must be an integer multiple of dt")

    x0 = np.asarray(sc.x0, dtype=float)
    y = cl.initial()
    r0 = 1.0 + float(y[L.r])

    oracle = cfg.oracle
    env = None
    checks = list(setup.checks)
    if oracle:
        z0 = oracle_z0(setup)
        W0 = 0.5 * float(z0 @ z0) + 0.5 * r0**2
        rho_z, rho_r = bound_envelopes(setup.report, z0, W0)
        _, rho_f = dfilter.zeta_and_rho_f(cfg.filter, setup.report, float(np.linalg.norm(z0)))
        env = (rho_z, rho_r, rho_f)
        checks.extend(initial_condition_checks(setup, z0))
        bounds = sc.disturbance.check_bounds(cfg.horizon, dt)
        checks.append(Check("max |w| <= omega0", bounds["omega0_ok"], cfg.omega0 - bounds["w_max"],
                            f"max |w| = {bounds['w_max']:.6g}"))
        checks.append(Check("max |dw/dt| <= omega1", bounds["omega1_ok"], cfg.omega1 - bounds["wdot_max"],
                            f"max |dw/dt| = {bounds['wdot_max']:.6g}"))
    else:
        checks.extend(initial_condition_checks(setup))

    tlog = TrajectoryLog(TrajectoryLog.layout(n, m, nbar, oracle))

    def oracle_row(t, y, alg):
        if env is None:
            return None
        w = np.atleast_1d(sc.disturbance.w(t))
        d = model.p(y[L.x]) @ w
        r = 1.0 + y[L.r]
        z = (alg.xi + alg.terms.beta - d) / r
        ed = alg.dhat - d
        ef = y[L.df] - alg.dhat
        return np.concatenate([d, z, [np.linalg.norm(ed), np.linalg.norm(ef),
                                      env[0](t), env[1](t), env[2](t)]])

    for k in range(steps + 1):
        t = k * dt
        try:
            if not np.all(np.isfinite(y)):
                raise SimulationError(f"non-finite state at step {k} (t={t:.6g})", step=k)
            alg = cl.algebra(t, y)
            tlog.append(_row(t, y, alg, cl, oracle_row(t, y, alg)))
            if k < steps:
                y = cl.step(t, y, alg, dt)
        except SimulationError as exc:
            exc.log = tlog
            raise
        except (InfeasibleQPError, StepError, ControllerError, ContractError, FloatingPointError) as exc:
            err = SimulationError(f"step {k} (t={t:.6g}): {exc}", step=k)
            err.log = tlog
            raise err from exc
        if progress and k % 1000 == 0:
            log.info("t = %.3f", t)

    checks.extend(trajectory_checks(tlog, setup))
    return RunResult(tlog, checks, setup, summary_metrics(tlog, setup))


# --- post-run checks and metrics ---------------------------------------------------

def trajectory_checks(tlog: TrajectoryLog, setup: Setup) -> list:
    sc = setup.scenario
    nbar = len(sc.barriers)
    out = []
    if not np.all(np.isfinite(tlog.data)):
        out.append(Check("all log entries finite", False, float("nan")))
    for k in range(nbar):
        hmin = float(np.min(tlog[f"h{k + 1}"]))
        out.append(Check(f"min h{k + 1} >= -{SAFETY_TOL:g}", hmin >= -SAFETY_TOL, hmin))
    rmin = float(np.min(tlog["r"]))
    out.append(Check("r(t) >= 1", rmin >= 1 - 1e-9, rmin - 1))
    if tlog.has("rho_z"):
        n = sc.model.n
        t = tlog["t"]
        znorm = np.linalg.norm(tlog.group("z", n), axis=1)
        m1 = float(np.min(tlog["rho_z"] + ENVELOPE_TOL - znorm))
        out.append(Check("|z(t)| <= rho_z(t)", m1 >= 0, m1))
        m2 = float(np.min(tlog["rho_r"] + ENVELOPE_TOL - tlog["r"]))
        out.append(Check("r(t) <= rho_r(t)", m2 >= 0, m2))
        tail = t >= 0.75 * t[-1]
        ub = setup.report.ultimate_bound
        sup = float(np.max(tlog["ed_norm"][tail]))
        out.append(Check("sup |e_d| over final quarter <= ultimate bound", sup <= ub, ub - sup,
                         f"sup = {sup:.6g}, bound = {ub:.6g}"))
        m3 = float(np.min(tlog["rho_f"] + ENVELOPE_TOL - tlog["ef_norm"]))
        out.append(Check("|dhat_f - dhat| <= rho_f(t)", m3 >= 0, m3))
    return out


def tracking_error(tlog: TrajectoryLog, n: int) -> np.ndarray:
    return np.linalg.norm(tlog.group("x", n) - tlog.group("xd", n), axis=1)


def summary_metrics(tlog: TrajectoryLog, setup: Setup) -> dict:
    n = setup.scenario.model.n
    nbar = len(setup.scenario.barriers)
    err = tracking_error(tlog, n)
    if nbar:
        act = tlog.group("active_", nbar).astype(bool).any(axis=1)
    else:
        act = np.zeros(len(tlog), dtype=bool)
    out = {
        "tracking_error_mean": float(np.mean(err)),
        "tracking_error_inactive": float(np.mean(err[~act])) if np.any(~act) else float("nan"),
        "active_fraction": float(np.mean(act)),
        "min_h": [float(np.min(tlog[f"h{k + 1}"])) for k in range(nbar)],
        "final_state": tlog.group("x", n)[-1].tolist(),
    }
    if tlog.has("ed_norm"):
        t = tlog["t"]
        sel = t >= min(5.0, 0.25 * t[-1])
        out["estimation_error_mean"] = float(np.mean(tlog["ed_norm"][sel]))
    return out


# --- emitters ----------------------------------------------------------------------

def emit_csv(tlog: TrajectoryLog, path) -> Path:
    path = Path(path)
    if len(tlog) == 0:
        raise ContractError("cannot emit an empty log")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(tlog.columns) + "\n")
            np.savetxt(fh, tlog.data, fmt="%.17g", delimiter=",")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> TrajectoryLog:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TrajectoryLog.from_array(header, data)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, count)


def emit_svg(tlog: TrajectoryLog, channels: Sequence[str], path, width=720, height=420) -> Path:
    """Line plot of ``channels`` against t; an empty list draws the axes only."""
    path = Path(path)
    if len(tlog) == 0:
        raise ContractError("cannot plot an empty log")
    missing = [c for c in channels if not tlog.has(c)]
    if missing:
        raise ContractError(f"unknown channels: {missing}")
    t = tlog["t"]
    left, right, top, bottom = 70, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    if channels:
        vals = np.concatenate([tlog[c] for c in channels])
        lo, hi = float(np.min(vals)), float(np.max(vals))
    else:
        lo, hi = -1.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    t0, t1 = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0

    def sx(v):
        return left + (v - t0) / (t1 - t0) * pw

    def sy(v):
        return top + (hi - v) / (hi - lo) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for v in _ticks(t0, t1):
        parts.append(f'<text x="{sx(v):.1f}" y="{top + ph + 18}" font-size="11" text-anchor="middle">{v:.3g}</text>')
    for v in _ticks(lo, hi):
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" font-size="11" text-anchor="end">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 10}" font-size="12" text-anchor="middle">t</text>')
    # thin long series so files stay small
    stride = max(1, len(t) // 2000)
    for i, c in enumerate(channels):
        ys = tlog[c]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(t[::stride], ys[::stride]))
        col = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{left + pw - 4}" y="{top + 14 + 14 * i}" font-size="11" fill="{col}" '
                     f'text-anchor="end">{c}</text>')
    parts.append("</svg>")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def format_report(checks: Sequence[Check], metrics: Optional[dict] = None) -> str:
    lines = []
    for c in checks:
        tag = "PASS" if c.passed else "FAIL"
        extra = f"  ({c.detail})" if c.detail else ""
        lines.append(f"{tag}  {c.name}  margin={c.margin:.6g}{extra}")
    if metrics:
        for k, v in metrics.items():
            lines.append(f"metric  {k} = {v}")
    return "\n".join(lines) + "\n"


def emit_report(checks: Sequence[Check], path, metrics: Optional[dict] = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_report(checks, metrics))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def compare(cfg: SimConfig, controllers: Sequence[str] = ("iidob-cbf-qp", "robust-cbf", "nominal-only")) -> dict:
    """Run the same scenario under several controllers; returns name -> RunResult or error text."""
    out = {}
    for name in controllers:
        try:
            out[name] = run(cfg.replace(controller=name))
        except (ConfigError, SimulationError) as exc:
            out[name] = str(exc)
    return out


def comparison_table(results: dict) -> str:
    head = f"{'controller':<14} {'safe':>5} {'min h':>12} {'err mean':>12} {'err inactive':>13} {'active %':>9}"
    lines = [head]
    for name, res in results.items():
        if isinstance(res, str):
            lines.append(f"{name:<14} failed: {res}")
            continue
        mt = res.metrics
        mh = min(mt["min_h"]) if mt["min_h"] else float("nan")
        lines.append(f"{name:<14} {str(mh >= -SAFETY_TOL):>5} {mh:>12.5g} {mt['tracking_error_mean']:>12.5g} "
                     f"{mt['tracking_error_inactive']:>13.5g} {100 * mt['active_fraction']:>9.2f}")
    return "\n".join(lines) + "\n"
