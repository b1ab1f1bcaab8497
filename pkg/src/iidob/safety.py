"""Barrier chain, observer-based CBF constraint, QP safety filter and a worst-case baseline."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, InfeasibleQPError
from .models import Barrier, SystemModel, relative_degree_check
from .numerics import fd_step
from .observer import BoundReport

FEAS_TOL = 1e-9


# --- barrier chain -------------------------------------------------------------

def build_chain(barrier: Barrier, model: SystemModel, samples: Optional[Sequence[np.ndarray]] = None,
                check_tol: float = 1e-6):
    """Return the list of (h_k, grad h_k) for k < iota, validated at ``samples``.

    Validation covers the relative-degree conditions and the agreement of each
    pre-derived h_k with L_f h_{k-1} + lambda_{k-1} h_{k-1}.
    """
    if len(barrier.chain) != barrier.iota:
        raise ConfigError(f"{barrier.name}: chain has {len(barrier.chain)} levels, iota={barrier.iota}")
    if len(barrier.lambdas) != barrier.iota + 1:
        raise ConfigError(f"{barrier.name}: need iota+1 rates lambda_0..lambda_iota")
    if samples is not None:
        rd = relative_degree_check(model, barrier, samples)
        if not rd["ok"]:
            raise ConfigError(f"{barrier.name}: relative-degree check failed {rd}", ["r_I = r_D = iota"])
        for k in range(1, barrier.iota):
            hk, _ = barrier.chain[k]
            hp, gp = barrier.chain[k - 1]
            for x in samples:
                want = float(gp(x) @ model.f(x)) + barrier.lambdas[k - 1] * hp(x)
                if abs(hk(x) - want) > check_tol * (1 + abs(want)):
                    raise ConfigError(f"{barrier.name}: h_{k} disagrees with its recursive definition")
    return list(barrier.chain)


def _check_rates(barrier: Barrier, zeta: float):
    lam_top = barrier.lambdas[barrier.iota - 1]
    if not zeta > lam_top:
        raise ConfigError(f"{barrier.name}: need lambda_(iota-1) < zeta ({lam_top} vs {zeta})",
                          ["lambda_(iota-1) < zeta"])


def eval_h_iota(barrier: Barrier, model: SystemModel, x, u, r, dhat_f, zeta: float, omega: float) -> float:
    return float(_h_iota_rows(barrier, model, np.asarray(x, dtype=float)[None, :], u, r, dhat_f, zeta, omega)[0][0])


def _h_iota_rows(barrier: Barrier, model: SystemModel, X, u, r, dhat_f, zeta, omega, fg=None):
    """h_iota at each row of X; also returns f and g there (``fg`` supplies them precomputed)."""
    _check_rates(barrier, zeta)
    k = barrier.iota - 1
    hk, gk = barrier.chain[k]
    lam = barrier.lambdas[k]
    rt = barrier.rho_tilde
    f, g = fg if fg is not None else model.parts(X, with_dp=False)[:2]
    gr = np.array([gk(xx) for xx in X], dtype=float)
    hv = np.array([hk(xx) for xx in X], dtype=float)
    drift = np.einsum("ki,ki->k", gr, f + (g @ np.asarray(u, dtype=float)) + np.asarray(dhat_f, dtype=float))
    out = drift - (1 + r * r) * np.einsum("ki,ki->k", gr, gr) / (2 * rt * (zeta - lam)) - rt * omega + lam * hv
    return out, f, g


@dataclass
class ConstraintPair:
    psi0: float
    psi1: np.ndarray
    h_iota: float


def fd_points(x) -> tuple[np.ndarray, np.ndarray]:
    """Rows x, x + s_j e_j, x - s_j e_j used for the central differences of h_iota, and the steps."""
    x = np.asarray(x, dtype=float)
    n = x.size
    steps = np.array([fd_step(xj) for xj in x])
    X = np.repeat(x[None, :], 2 * n + 1, axis=0)
    X[1:n + 1][np.arange(n), np.arange(n)] += steps
    X[n + 1:][np.arange(n), np.arange(n)] -= steps
    return X, steps


def constraint_pair(barrier: Barrier, model: SystemModel, x, u, r, dhat, dhat_f, r_dot, dhat_f_dot,
                    report: BoundReport, zeta: float, fg_rows=None) -> ConstraintPair:
    """Affine condition psi0 + psi1 v >= 0 on the auxiliary input v.

    ``fg_rows`` may carry f and g at the rows of ``fd_points(x)``; they do not
    depend on the barrier, so callers with several barriers evaluate them once.
    """
    kappa, omega = report.kappa, report.omega
    lam_i = barrier.lambdas[barrier.iota]
    if not 4 * kappa - 2 * lam_i > 0:
        raise ConfigError(f"{barrier.name}: need lambda_iota < 2 kappa", ["lambda_iota < 2 kappa"])
    _check_rates(barrier, zeta)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dhat_f = np.asarray(dhat_f, dtype=float)
    k = barrier.iota - 1
    gr = np.asarray(barrier.chain[k][1](x), dtype=float)
    lam_k = barrier.lambdas[k]
    rho, rt = barrier.rho, barrier.rho_tilde

    # central differences of h_iota in x, all points in one batch
    X, steps = fd_points(x)
    hs, fs, gs = _h_iota_rows(barrier, model, X, u, r, dhat_f, zeta, omega, fg_rows)
    h_val = float(hs[0])
    dh_dx = (hs[1:model.n + 1] - hs[model.n + 1:]) / (2 * steps)
    dh_dr = -r * (gr @ gr) / (rt * (zeta - lam_k))
    fgu_d = fs[0] + gs[0] @ u + np.asarray(dhat, dtype=float)
    psi0 = (dh_dx @ fgu_d + dh_dr * r_dot + gr @ np.asarray(dhat_f_dot, dtype=float)
            - r * r * (dh_dx @ dh_dx) / (rho * (4 * kappa - 2 * lam_i)) - rho * omega + lam_i * h_val)
    psi1 = gr @ gs[0]
    return ConstraintPair(float(psi0), psi1, h_val)


# --- QP ------------------------------------------------------------------------

@dataclass
class QpResult:
    v: np.ndarray
    active: list
    objective: float


def solve_qp_single(psi0: float, psi1, v_nom) -> QpResult:
    """Closed-form minimiser of ||v - v_nom||^2 subject to psi0 + psi1 v >= 0."""
    v_nom = np.asarray(v_nom, dtype=float)
    psi1 = np.asarray(psi1, dtype=float)
    slack = psi0 + psi1 @ v_nom
    if slack >= 0:
        return QpResult(v_nom.copy(), [False], 0.0)
    nrm = psi1 @ psi1
    if nrm == 0.0:
        raise InfeasibleQPError(f"constraint with psi1 = 0 and psi0 = {psi0!r} < 0",
                                certificate={"psi0": float(psi0)})
    v = v_nom - (slack / nrm) * psi1
    d = v - v_nom
    return QpResult(v, [True], float(d @ d))


def solve_qp_multi(pairs, v_nom) -> QpResult:
    """Exact projection onto {v : psi0_k + psi1_k v >= 0 for all k} by active-set enumeration."""
    pairs = list(pairs)
    v_nom = np.asarray(v_nom, dtype=float)
    if not pairs:
        return QpResult(v_nom.copy(), [], 0.0)
    if len(pairs) == 1:
        return solve_qp_single(pairs[0][0], pairs[0][1], v_nom)
    b = np.array([float(p[0]) for p in pairs])
    A = np.array([np.asarray(p[1], dtype=float) for p in pairs])
    k, m = A.shape
    if k > 12:
        raise ContractError("active-set enumeration limited to 12 constraints")
    slack = b + A @ v_nom
    if np.all(slack >= 0):
        return QpResult(v_nom.copy(), [False] * k, 0.0)
    best = None
    worst_seen = np.inf
    for size in range(1, min(k, m) + 1):
        for S in itertools.combinations(range(k), size):
            S = list(S)
            As = A[S]
            mu = None
            if size == 1:
                nrm2 = float(As[0] @ As[0])
                if nrm2 <= 1e-24:
                    continue
                mu = np.array([-slack[S[0]] / nrm2])
            if mu is None:
                gram = As @ As.T
                # skip dependent constraint sets (Cholesky fails or pivots collapse)
                try:
                    chol = np.linalg.cholesky(gram)
                except np.linalg.LinAlgError:
                    continue
                if np.min(np.diag(chol)) ** 2 <= 1e-12 * max(np.trace(gram), 1e-300):
                    continue
                mu = -np.linalg.solve(gram, slack[S])
            if np.any(mu < -1e-12):
                continue
            v = v_nom + As.T @ mu
            viol = float(np.min(b + A @ v))
            worst_seen = min(worst_seen, viol) if viol < -FEAS_TOL else worst_seen
            if viol < -FEAS_TOL:
                continue
            d = v - v_nom
            obj = float(d @ d)
            if best is None or obj < best[1] - 1e-15:
                best = (v, obj, S)
    if best is None:
        raise InfeasibleQPError("no feasible point satisfies all barrier constraints",
                                certificate={"psi0": b.tolist(), "psi1": A.tolist(),
                                             "least_violation": float(worst_seen)})
    v, obj, S = best
    active = [i in S for i in range(k)]
    return QpResult(v, active, obj)


# --- initial-condition and rate validation --------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    detail: str = ""


def validate_theorem2(barrier: Barrier, model: SystemModel, report: BoundReport, zeta: float,
                      x0, u0, r0, dhat0, dhat_f0, z0=None) -> list:
    """Rate conditions and initial-condition conditions of the safety result.

    ``z0`` is the scaled estimation error at t=0 (oracle) or an upper bound on its norm.
    When it is None the z-dependent checks are reported with margin NaN.
    """
    it = barrier.iota
    lam = barrier.lambdas
    out = [
        Check(f"{barrier.name}: lambda_iota < 2 kappa", lam[it] < 2 * report.kappa, 2 * report.kappa - lam[it]),
        Check(f"{barrier.name}: lambda_(iota-1) < zeta", lam[it - 1] < zeta, zeta - lam[it - 1]),
    ]
    x0 = np.asarray(x0, dtype=float)
    for i in range(it - 1):
        hv = barrier.chain[i][0](x0)
        out.append(Check(f"{barrier.name}: h_{i}(x0) > 0", hv > 0, hv))
    ef0 = np.asarray(dhat_f0, dtype=float) - np.asarray(dhat0, dtype=float)
    if z0 is None:
        out.append(Check(f"{barrier.name}: h_(iota-1)(x0) - rho~ V_f(0) > 0", False, float("nan"), "z(0) unknown"))
        out.append(Check(f"{barrier.name}: h_iota(0) - rho/2 |z0|^2 > 0", False, float("nan"), "z(0) unknown"))
        return out
    z0sq = float(np.sum(np.square(z0)))
    vf0 = 0.5 * float(ef0 @ ef0) + 0.5 * z0sq
    m1 = barrier.chain[it - 1][0](x0) - barrier.rho_tilde * vf0
    out.append(Check(f"{barrier.name}: h_(iota-1)(x0) - rho~ V_f(0) > 0", m1 > 0, m1))
    if lam[it - 1] < zeta:
        hi = eval_h_iota(barrier, model, x0, u0, r0, dhat_f0, zeta, report.omega)
        m2 = hi - 0.5 * barrier.rho * z0sq
        out.append(Check(f"{barrier.name}: h_iota(0) - rho/2 |z0|^2 > 0", m2 > 0, m2))
    else:
        out.append(Check(f"{barrier.name}: h_iota(0) - rho/2 |z0|^2 > 0", False, float("nan"), "zeta too small"))
    return out


# --- worst-case baseline ---------------------------------------------------------

def robust_cbf_constraint(barrier: Barrier, model: SystemModel, x, omega0: float, rate: float):
    """Worst-case condition psi0 + psi1 u >= 0 for a relative-degree-one barrier."""
    if barrier.iota != 1:
        raise ConfigError("robust baseline supports relative-degree-one barriers only")
    x = np.asarray(x, dtype=float)
    gr = np.asarray(barrier.grad_h(x), dtype=float)
    psi0 = gr @ model.f(x) - np.linalg.norm(gr @ model.p(x)) * omega0 + rate * barrier.h(x)
    return float(psi0), gr @ model.g(x)


def robust_v_constraint(barrier: Barrier, model: SystemModel, x, u, omega0: float, rate_h: float, rate_b: float):
    """Lift the worst-case condition to the integrator input v.

    With b(x, u) = psi0(x) + psi1(x) u, enforce the worst case of
    db/dt + rate_b * b >= 0; b >= 0 then implies the worst-case condition on u.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)

    def b_of(xx):
        p0, p1 = robust_cbf_constraint(barrier, model, xx, omega0, rate_h)
        return p0 + p1 @ u

    b = b_of(x)
    db = np.empty(model.n)
    for j in range(model.n):
        s = fd_step(x[j])
        xp = x.copy()
        xm = x.copy()
        xp[j] += s
        xm[j] -= s
        db[j] = (b_of(xp) - b_of(xm)) / (2 * s)
    _, p1 = robust_cbf_constraint(barrier, model, x, omega0, rate_h)
    psi0 = db @ (model.f(x) + model.g(x) @ u) - np.linalg.norm(db @ model.p(x)) * omega0 + rate_b * b
    return float(psi0), p1, float(b)
