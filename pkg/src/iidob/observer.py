"""Immersion-and-invariance disturbance observer.

The observer state is (xhat, xi, r); the total-disturbance estimate is
``dhat = xi + beta(x, xhat, u)``.  ``beta`` stacks one-dimensional integrals of
``psi`` in which slot i runs from 0 to x_i and every other slot sits at xhat.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, ContractError
from .models import SystemModel
from .numerics import QuadRule, gl_points

FD_REL = 1e-6
DELTA_EPS = 1e-8


@dataclass(frozen=True)
class ObserverGains:
    gamma: float = 100.0
    eta: float = 1.0
    c: float = 0.5
    theta: float = 10.0
    k1: float = 10.0
    k2: float = 10.0


@dataclass
class ObserverState:
    xhat: np.ndarray
    xi: np.ndarray
    r: float

    def dhat(self, model, gains, x, u, rule=QuadRule()):
        return self.xi + beta(model, gains, x, self.xhat, u, rule)


def initial_state(model, gains, x0, u0, r0=1.001, rule=QuadRule()) -> ObserverState:
    """xhat(0) = x(0) and xi(0) = -beta so that dhat(0) = 0."""
    x0 = np.asarray(x0, dtype=float)
    b = beta(model, gains, x0, x0, u0, rule)
    return ObserverState(xhat=x0.copy(), xi=-b, r=float(r0))


def omega_constant(eta, omega0, omega1, l):
    return (omega1**2 + l * omega0**2 + l * omega0**4) / (2.0 * eta)


@dataclass(frozen=True)
class BoundReport:
    kappa: float
    omega: float
    chi: float
    theta: float
    k2_threshold: float

    @property
    def ultimate_bound(self) -> float:
        """Limit of ||dhat - d|| as t grows: sqrt(omega (theta + 2 omega) / (kappa chi))."""
        return math.sqrt(self.omega * (self.theta + 2 * self.omega) / (self.kappa * self.chi))


def gain_violations(gains: ObserverGains, n: int, r0: float = 1.001) -> list[str]:
    out = []
    for name in ("gamma", "eta", "c", "theta", "k1", "k2"):
        if not getattr(gains, name) > 0:
            out.append(f"{name} > 0")
    if out:
        return out
    if not gains.gamma > n / (2 * gains.c) + gains.theta:
        out.append("gamma > n/(2c) + theta")
    else:
        denom = 4 * gains.gamma - 2 * n / gains.c - 4 * gains.theta
        if not gains.k2 > 1.0 / denom:
            out.append("k2 > 1/(4 gamma - 2n/c - 4 theta)")
    if not r0 > 1:
        out.append("r(0) > 1")
    return out


def validate_gains(gains: ObserverGains, n: int, r0: float = 1.001,
                   omega0: float = 0.0, omega1: float = 0.0, l: int = 1) -> BoundReport:
    """Check the observer design inequalities and return the bound constants.

    Raises ConfigError listing every violated inequality.
    """
    bad = gain_violations(gains, n, r0)
    if bad:
        raise ConfigError("observer gains violate: " + "; ".join(bad), bad)
    kappa = gains.gamma - n / (2 * gains.c) - gains.theta
    chi = min(2 * kappa - 1 / (2 * gains.k2), 2 * gains.k1, gains.theta)
    return BoundReport(
        kappa=kappa,
        omega=omega_constant(gains.eta, omega0, omega1, l),
        chi=chi,
        theta=gains.theta,
        k2_threshold=1.0 / (4 * gains.gamma - 2 * n / gains.c - 4 * gains.theta),
    )


def bound_envelopes(report: BoundReport, z0, W0: float) -> tuple[Callable, Callable]:
    """Envelopes for ||z(t)|| and r(t)."""
    if not (report.kappa > 0 and report.chi > 0):
        raise ContractError("kappa and chi must be positive")
    z0sq = float(np.dot(np.ravel(z0), np.ravel(z0)))
    kappa, chi, omega, theta = report.kappa, report.chi, report.omega, report.theta

    def rho_z(t):
        return np.sqrt(z0sq * np.exp(-2 * kappa * np.asarray(t)) + omega / kappa)

    def rho_r(t):
        return np.sqrt(2 * W0 * np.exp(-chi * np.asarray(t)) + (theta + 2 * omega) / chi)

    return rho_z, rho_r


# --- psi ---------------------------------------------------------------------

def psi(model: SystemModel, gains: ObserverGains, x, u):
    """Observer gain function; batched over leading axes of ``x`` and ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f, g, p, dp = model.parts(x)
    fgu = f + np.matmul(g, u[..., None])[..., 0]
    # one product covers both dp.(f + g u) and dp.p
    cols = np.concatenate([fgu[..., :, None], p], axis=-1)
    ab = np.matmul(dp, cols[..., None, :, :])
    s = np.einsum("...ij,...ij->...", p, p) + np.einsum("...kij,...kij->...", ab, ab)
    return 0.5 * gains.eta * s + gains.gamma


def mixed_point(x, xhat, i):
    pt = np.array(xhat, dtype=float)
    pt[i] = x[i]
    return pt


# --- batched evaluation of everything the observer needs -----------------------

class ObserverTerms(NamedTuple):
    beta: np.ndarray          # (n,)
    dbeta_dx: np.ndarray      # (n,) diagonal entries
    dbeta_dxhat: np.ndarray   # (n, n)
    dbeta_du: np.ndarray      # (n, m)
    deltas: np.ndarray        # (n, n), deltas[i, j] = delta_ij
    psi_x: float              # psi(x, u)


class _Batch:
    """Collects psi query points, evaluates them in one call."""

    def __init__(self, n, m):
        self.xs, self.us = [], []
        self.size = 0
        self.n, self.m = n, m

    def add(self, xs, us):
        xs = np.atleast_2d(xs)
        us = np.broadcast_to(us, (xs.shape[0], self.m))
        sl = slice(self.size, self.size + xs.shape[0])
        self.xs.append(xs)
        self.us.append(us)
        self.size += xs.shape[0]
        return sl

    def run(self, model, gains):
        return psi(model, gains, np.concatenate(self.xs), np.concatenate(self.us))


@lru_cache(maxsize=16)
def _local_masks(n: int):
    """Slot masks (True = take xhat) for the mixed points, x itself and the telescoping path.

    Path point (i, j) has every slot k <= j, k != i switched; pairs run over
    j != i in row-major order.  Also returns the masks of the point preceding
    each path point.
    """
    k = np.arange(n)
    path = (k[None, None, :] <= k[None, :, None]) & (k[None, None, :] != k[:, None, None])
    before = path & (k[None, None, :] != k[None, :, None])
    I, J = np.nonzero(~np.eye(n, dtype=bool))
    masks = np.concatenate([~np.eye(n, dtype=bool), np.zeros((1, n), dtype=bool), path[I, J]])
    return masks, before[I, J], I, J


def local_terms(model: SystemModel, gains: ObserverGains, x, xhat, u) -> ObserverTerms:
    """dbeta/dx diagonal, deltas and psi(x) from a single batched psi call.

    Only the local points are needed, so this is what the integrator calls at
    every stage iterate.  beta and its xhat/u Jacobians come back as zeros.
    """
    n = x.shape[0]
    masks, before_masks, I, J = _local_masks(n)
    e = xhat - x
    small = np.abs(e[J]) <= DELTA_EPS
    pts = np.where(masks, xhat, x)
    if small.any():
        # derivative fallback: central differences around the point preceding the switch
        hxx = FD_REL * (1.0 + np.abs(x))
        prev_pts = np.where(before_masks[small], xhat, x)
        step = np.zeros_like(prev_pts)
        step[np.arange(step.shape[0]), J[small]] = hxx[J[small]]
        pts = np.concatenate([pts, prev_pts + step, prev_pts - step])
    vals = psi(model, gains, pts, u)
    if not np.isfinite(vals).all():
        raise ContractError("psi evaluated to a non-finite value")
    psi_x = float(vals[n])
    deltas = np.zeros((n, n))
    if n > 1:
        npair = n * (n - 1)
        pv = vals[n + 1:n + 1 + npair].reshape(n, n - 1)
        prior = np.empty_like(pv)
        prior[:, 0] = psi_x
        prior[:, 1:] = pv[:, :-1]
        dd = (prior - pv).ravel() / np.where(small, 1.0, e[J])
        if small.any():
            ns = int(small.sum())
            fd = vals[n + 1 + npair:]
            dd[small] = -(fd[:ns] - fd[ns:]) / (2 * hxx[J[small]])
        deltas[I, J] = dd
    return ObserverTerms(np.zeros(n), vals[:n].copy(), np.zeros((n, n)), np.zeros((n, model.m)), deltas, psi_x)


def observer_terms(model: SystemModel, gains: ObserverGains, x, xhat, u, rule: QuadRule = QuadRule(),
                   want=("beta", "dx", "dxhat", "du", "delta")) -> ObserverTerms:
    """Evaluate beta, its three Jacobians and the delta coefficients together."""
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = model.n, model.m
    if x.shape != (n,) or xhat.shape != (n,) or u.shape != (m,):
        raise ContractError("observer_terms: dimension mismatch")
    e = xhat - x
    masks, before_masks, I, J = _local_masks(n)
    if not ({"beta", "dxhat", "du"} & set(want)):
        return local_terms(model, gains, x, xhat, u)

    B = _Batch(n, m)

    # psi at the mixed points (diagonal of dbeta/dx), at x, and along the telescoping path
    s_local = B.add(np.where(masks, xhat, x), u)
    small = np.abs(e[J]) <= DELTA_EPS
    if "delta" in want and np.any(small):
        hxx = FD_REL * (1.0 + np.abs(x))
        prev_pts = np.where(before_masks[small], xhat, x)
        step = np.zeros_like(prev_pts)
        step[np.arange(step.shape[0]), J[small]] = hxx[J[small]]
        s_fdp = B.add(prev_pts + step, u)
        s_fdm = B.add(prev_pts - step, u)

    quad = []
    if {"beta", "dxhat", "du"} & set(want):
        hx = FD_REL * (1.0 + np.abs(xhat))
        hu = FD_REL * (1.0 + np.abs(u))
        for i in range(n):
            t, w = gl_points(0.0, x[i], rule)
            base = np.repeat(xhat[None, :], t.size, axis=0)
            base[:, i] = t
            entry = {"w": w}
            if "beta" in want:
                entry["val"] = B.add(base, u)
            if "dxhat" in want:
                js = [j for j in range(n) if j != i]
                pl, mi = [], []
                for j in js:
                    bp = base.copy()
                    bp[:, j] += hx[j]
                    bm = base.copy()
                    bm[:, j] -= hx[j]
                    pl.append(bp)
                    mi.append(bm)
                if js:
                    entry["xp"] = B.add(np.concatenate(pl), u)
                    entry["xm"] = B.add(np.concatenate(mi), u)
                entry["js"] = js
            if "du" in want:
                ups = np.repeat(u[None, :], m, axis=0) + np.diag(hu)
                ums = np.repeat(u[None, :], m, axis=0) - np.diag(hu)
                entry["up"] = B.add(np.repeat(base, m, axis=0), np.tile(ups, (t.size, 1)))
                entry["um"] = B.add(np.repeat(base, m, axis=0), np.tile(ums, (t.size, 1)))
            quad.append(entry)

    vals = B.run(model, gains)
    if not np.all(np.isfinite(vals)):
        raise ContractError("psi evaluated to a non-finite value")

    beta_v = np.zeros(n)
    dxhat = np.zeros((n, n))
    du = np.zeros((n, m))
    for i, entry in enumerate(quad):
        w = entry["w"]
        k = w.size
        if "val" in entry:
            beta_v[i] = w @ vals[entry["val"]]
        if entry.get("js"):
            js = entry["js"]
            vp = vals[entry["xp"]].reshape(len(js), k)
            vm = vals[entry["xm"]].reshape(len(js), k)
            for a, j in enumerate(js):
                dxhat[i, j] = w @ ((vp[a] - vm[a]) / (2 * hx[j]))
        if "up" in entry:
            vp = vals[entry["up"]].reshape(k, m)
            vm = vals[entry["um"]].reshape(k, m)
            du[i] = w @ ((vp - vm) / (2 * hu[None, :]))

    local = vals[s_local]
    psi_x = float(local[n])
    deltas = np.zeros((n, n))
    if "delta" in want and n > 1:
        pv = local[n + 1:].reshape(n, n - 1)
        prior = np.concatenate([np.full((n, 1), psi_x), pv[:, :-1]], axis=1).ravel()
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = -(pv.ravel() - prior) / e[J]
        if np.any(small):
            dd[small] = -(vals[s_fdp] - vals[s_fdm]) / (2 * hxx[J[small]])
        deltas[I, J] = dd
    dx = local[:n] if "dx" in want else np.zeros(n)
    return ObserverTerms(beta_v, np.array(dx), dxhat, du, deltas, psi_x)


# --- public single-purpose wrappers -------------------------------------------

def beta(model, gains, x, xhat, u, rule: QuadRule = QuadRule()):
    """beta_i = integral of psi over slot i from 0 to x_i, other slots at xhat; one psi call."""
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    n = x.shape[0]
    nodes = [gl_points(0.0, x[i], rule) for i in range(n)]
    sizes = [t.size for t, _ in nodes]
    pts = np.repeat(xhat[None, :], sum(sizes), axis=0)
    rows = np.repeat(np.arange(n), sizes)
    pts[np.arange(pts.shape[0]), rows] = np.concatenate([t for t, _ in nodes])
    vals = psi(model, gains, pts, np.asarray(u, dtype=float))
    if not np.isfinite(vals).all():
        raise ContractError("psi evaluated to a non-finite value")
    w = np.concatenate([w for _, w in nodes])
    return np.bincount(rows, weights=w * vals, minlength=n)


def dbeta_dx(model, gains, x, xhat, u):
    """Diagonal Jacobian of beta in x; exact by the fundamental theorem of calculus."""
    return np.diag(observer_terms(model, gains, x, xhat, u, want=("dx",)).dbeta_dx)


def dbeta_dxhat(model, gains, x, xhat, u, rule: QuadRule = QuadRule()):
    return observer_terms(model, gains, x, xhat, u, rule, want=("dxhat",)).dbeta_dxhat


def dbeta_du(model, gains, x, xhat, u, rule: QuadRule = QuadRule()):
    return observer_terms(model, gains, x, xhat, u, rule, want=("du",)).dbeta_du


def delta_coeffs(model, gains, x, xhat, u):
    """Matrix of delta_ij; Delta_j is ``np.diag(deltas[:, j])``."""
    return observer_terms(model, gains, x, xhat, u, want=("delta",)).deltas


def delta_residual(model, gains, x, xhat, u, deltas=None):
    """Residual of the telescoped identity for every row i."""
    x = np.asarray(x, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    if deltas is None:
        deltas = delta_coeffs(model, gains, x, xhat, u)
    e = xhat - x
    n = x.size
    mixed = np.repeat(xhat[None, :], n, axis=0)
    mixed[np.arange(n), np.arange(n)] = x
    lhs = psi(model, gains, mixed, u) - psi(model, gains, x, u)
    return lhs + deltas @ e


def lambda_gain(gains: ObserverGains, r: float, deltas) -> np.ndarray:
    if r < 1:
        raise ContractError("r must be >= 1")
    deltas = np.atleast_2d(np.asarray(deltas, dtype=float))
    col_sq = np.sum(deltas * deltas, axis=0)
    return np.diag((gains.k1 + gains.k2 * r * r) + 0.5 * gains.c * r * r * col_sq)


class ObserverRates(NamedTuple):
    xhat_dot: np.ndarray
    xi_dot: np.ndarray
    r_dot: float
    dhat: np.ndarray
    terms: ObserverTerms


def observer_rhs(state: ObserverState, model: SystemModel, gains: ObserverGains, x, u, v,
                 rule: QuadRule = QuadRule(), terms: ObserverTerms | None = None) -> ObserverRates:
    """Time derivatives of (xhat, xi, r) plus the current estimate dhat.

    Only measured quantities enter: x, u, v and the observer's own state.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if state.r < 1 - 1e-9:
        raise ContractError(f"r must stay >= 1, got {state.r!r}")
    if terms is None:
        terms = observer_terms(model, gains, x, state.xhat, u, rule)
    dhat = state.xi + terms.beta
    r = state.r
    e = state.xhat - x
    col_sq = np.sum(terms.deltas**2, axis=0)
    lam = (gains.k1 + gains.k2 * r * r) + 0.5 * gains.c * r * r * col_sq
    fgu = model.f(x) + model.g(x) @ u
    xhat_dot = fgu + dhat - lam * e
    xi_dot = -terms.dbeta_dx * (fgu + dhat) - terms.dbeta_du @ v - terms.dbeta_dxhat @ xhat_dot
    r_dot = -gains.theta * (r - 1) + 0.5 * gains.c * r * float(np.sum(e * e * col_sq))
    return ObserverRates(xhat_dot, xi_dot, r_dot, dhat, terms)


class EstimateRates(NamedTuple):
    xhat_dot: np.ndarray
    dhat_dot: np.ndarray
    r_dot: float
    lam: np.ndarray   # diagonal of Lambda
    psi_mixed: np.ndarray


def estimate_rates(model: SystemModel, gains: ObserverGains, x, xhat, dhat, r: float, u, xdot,
                   terms: ObserverTerms) -> EstimateRates:
    """Observer flow written for the estimate dhat = xi + beta instead of xi.

    Along any trajectory the chain rule gives
    dhat' = xi' + (dbeta/dx) x' + (dbeta/dxhat) xhat' + (dbeta/du) u', and the
    xhat and u terms cancel against the ones inside xi', leaving
    dhat' = diag(psi at mixed points) (x' - f - g u - dhat).
    ``xdot`` is the plant derivative, so this form belongs to the simulator;
    an implementation on hardware integrates ``observer_rhs`` instead.
    Only ``terms.dbeta_dx`` and ``terms.deltas`` are read.
    """
    x = np.asarray(x, dtype=float)
    e = np.asarray(xhat, dtype=float) - x
    col_sq = np.sum(terms.deltas**2, axis=0)
    lam = (gains.k1 + gains.k2 * r * r) + 0.5 * gains.c * r * r * col_sq
    fgu = model.f(x) + model.g(x) @ np.asarray(u, dtype=float)
    xhat_dot = fgu + dhat - lam * e
    dhat_dot = terms.dbeta_dx * (np.asarray(xdot, dtype=float) - fgu - dhat)
    r_dot = -gains.theta * (r - 1) + 0.5 * gains.c * r * float(np.sum(e * e * col_sq))
    return EstimateRates(xhat_dot, dhat_dot, r_dot, lam, terms.dbeta_dx)
