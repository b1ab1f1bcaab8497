"""Small numerical kernels: RK4 stepping, composite Gauss-Legendre, central differences."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import DifferentiationError, QuadratureError, StepError


@dataclass(frozen=True)
class QuadRule:
    """Composite Gauss-Legendre rule: ``nodes`` per segment, one segment per
    ``segment_length`` of integration length (at least one segment)."""

    nodes: int = 16
    segment_length: float = 1.0

    def __post_init__(self):
        if int(self.nodes) != self.nodes or self.nodes < 2:
            raise ValueError(f"QuadRule.nodes must be an integer >= 2, got {self.nodes}")
        if not self.segment_length > 0:
            raise ValueError("QuadRule.segment_length must be positive")

    def segments(self, length: float) -> int:
        return max(1, math.ceil(abs(length) / self.segment_length - 1e-12))


@lru_cache(maxsize=64)
def _leggauss(k: int):
    x, w = np.polynomial.legendre.leggauss(k)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gl_points(a: float, b: float, rule: QuadRule) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and (oriented) weights of the composite rule on [a, b].

    ``sum(w * fn(t))`` gives the oriented integral, so a > b flips the sign.
    """
    xs, ws = _leggauss(rule.nodes)
    nseg = rule.segments(b - a)
    edges = a + (b - a) * (np.arange(nseg + 1) / nseg)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    t = (mid[:, None] + half[:, None] * xs[None, :]).ravel()
    w = (half[:, None] * ws[None, :]).ravel()
    return t, w


def quad_gl(fn: Callable[[float], float], a: float, b: float, rule: QuadRule = QuadRule()) -> float:
    t, w = gl_points(a, b, rule)
    vals = np.array([fn(ti) for ti in t], dtype=float)
    bad = ~np.isfinite(vals)
    if bad.any():
        loc = float(t[np.argmax(bad)])
        raise QuadratureError(f"non-finite integrand at tau={loc!r}", location=loc)
    return float(np.dot(w, vals))


def fd_step(value: float, rel: float = 1e-6) -> float:
    return rel * (1.0 + abs(value))


def central_diff(fn: Callable[[np.ndarray], float], point, index: int, step: float | None = None) -> float:
    """Central difference of a scalar function along coordinate ``index``."""
    point = np.asarray(point, dtype=float)
    if step is None:
        step = fd_step(point[index])
    if not step > 0:
        raise ValueError("step must be positive")
    hi = point.copy()
    lo = point.copy()
    hi[index] += step
    lo[index] -= step
    fp, fm = fn(hi), fn(lo)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise DifferentiationError(f"non-finite sample while differentiating along index {index}")
    return float((fp - fm) / (2.0 * step))


def rk4_step(deriv: Callable[[float, np.ndarray], np.ndarray], t: float, state, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(state, dtype=float)

    def stage(k, tt, yy):
        d = np.asarray(deriv(tt, yy), dtype=float)
        if not np.all(np.isfinite(d)):
            raise StepError(f"non-finite derivative at RK4 stage {k} (t={tt!r})", stage=k)
        return d

    k1 = stage(1, t, y)
    k2 = stage(2, t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = stage(3, t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = stage(4, t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + k4) + (dt / 3.0) * (k2 + k3)


# L-stable, stiffly accurate 3-stage SDIRK of order 3
_SD_G = 0.43586652150845899942
_SD_C = (_SD_G, 0.5 * (1 + _SD_G), 1.0)
_SD_A = (
    (_SD_G,),
    (0.5 * (1 - _SD_G), _SD_G),
    (-(6 * _SD_G**2 - 16 * _SD_G + 1) / 4, (6 * _SD_G**2 - 20 * _SD_G + 5) / 4, _SD_G),
)


def sdirk3_step(fun: Callable[[float, np.ndarray], np.ndarray], jac: Callable[[float, np.ndarray], np.ndarray],
                t: float, state, dt: float, tol: float = 1e-10, maxiter: int = 12, atol=None) -> np.ndarray:
    """One step of an L-stable singly diagonally implicit RK method (order 3).

    Stages are solved by simplified Newton with one Jacobian for the whole
    step; if that stalls the step is redone with the Jacobian
    refreshed at every iterate.  Raises StepError with the stage number when
    both fail.  Newton stops once every |update| <= atol + tol*|Y|;
    ``atol`` defaults to ``tol`` and may be given per component.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    y = np.asarray(state, dtype=float)
    atol = np.broadcast_to(tol if atol is None else np.asarray(atol, dtype=float), y.shape)
    try:
        return _sdirk3(fun, jac, t, y, dt, tol, atol, maxiter, refresh=False)
    except StepError:
        return _sdirk3(fun, jac, t, y, dt, tol, atol, 2 * maxiter, refresh=True)


def _sdirk3(fun, jac, t, y, dt, tol, atol, maxiter, refresh):
    eye = np.eye(y.size)
    hg = dt * _SD_G
    ks: list[np.ndarray] = []
    Y = y
    lu = None
    # last measured contraction factor; lets later stages stop after one update
    rate_seen = None
    for i, (ci, row) in enumerate(zip(_SD_C, _SD_A)):
        tt = t + ci * dt
        base = y + dt * sum((a * k for a, k in zip(row[:-1], ks)), np.zeros_like(y))
        # predictor: extend the slope of the previous stage to this stage time
        Y = y + ci * dt * ks[-1] if ks else y.copy()
        if lu is None and not refresh:
            # all stages share the same diagonal, so one factorisation serves the step
            lu = lu_factor(eye - hg * jac(tt, Y))
        prev = np.inf
        for it in range(maxiter):
            F = np.asarray(fun(tt, Y), dtype=float)
            G = Y - base - hg * F
            if not np.all(np.isfinite(G)):
                raise StepError(f"non-finite residual in SDIRK stage {i + 1} (t={tt!r})", stage=i + 1)
            if refresh:
                dY = np.linalg.solve(eye - hg * jac(tt, Y), -G)
            else:
                dY = lu_solve(lu, -G, check_finite=False)
            Y = Y + dY
            size = np.max(np.abs(dY) / (atol + tol * np.abs(Y)))
            rate = size / prev
            if np.isfinite(prev) and rate < 1:
                rate_seen = rate
            if size <= 1.0:
                break
            if np.isfinite(prev):
                # the first update mostly removes predictor error, so judge from the third on
                if rate >= 1.0 and it >= 2 and not refresh:
                    raise StepError(f"simplified Newton stalled in SDIRK stage {i + 1}", stage=i + 1)
                # contraction estimate of the remaining error
                if rate < 1 and rate / (1 - rate) * size <= 1.0:
                    break
            elif rate_seen is not None:
                # first update of a later stage: use the earlier rate, floored to stay cautious
                eta = max(rate_seen, 1e-3)
                if eta / (1 - eta) * size <= 1.0:
                    break
            prev = size
        else:
            raise StepError(f"Newton did not converge in SDIRK stage {i + 1} (t={tt!r})", stage=i + 1)
        ks.append((Y - base) / hg)
    return Y


def hermite(y0, y1, d0, d1, dt: float, s: float):
    """Cubic Hermite interpolant at fraction ``s`` of a step from values and slopes."""
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return h00 * y0 + h10 * dt * d0 + h01 * y1 + h11 * dt * d1
