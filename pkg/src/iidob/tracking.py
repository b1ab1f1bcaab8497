"""Observer-based tracking law with a dynamic-surface filter on the desired input.

The filtered desired input u_d^f replaces analytic derivatives of u_d: its
derivative (u_d - u_d^f)/eps is fed straight into the nominal v.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ControllerError, ContractError

COND_LIMIT = 1e8


@dataclass(frozen=True)
class TrackingParams:
    alpha1: float = 50.0
    alpha2: float = 50.0
    eps: float = 1e-3

    def __post_init__(self):
        if not (self.alpha1 > 0 and self.alpha2 > 0 and self.eps > 0):
            raise ContractError("tracking parameters must be positive")
        if self.eps * self.alpha2 > 0.1:
            warnings.warn(f"surface time constant eps={self.eps} is not small against 1/alpha2", stacklevel=2)


def _rows(model, rows):
    return np.arange(model.n) if rows is None else np.asarray(rows, dtype=int)


def desired_input(model, x, x_d, xd_dot, r, dhat, params: TrackingParams, rows: Optional[Sequence[int]] = None):
    """u_d = -g^+ (f + (alpha1 + r^2/2) e_x + dhat - xd_dot) over ``rows``.

    ``rows`` restricts the law to a subsystem whose input block is square and
    invertible (used for second-order plants); default is every state row.
    """
    x = np.asarray(x, dtype=float)
    idx = _rows(model, rows)
    G = model.g(x)[idx]
    if G.shape[0] > G.shape[1]:
        raise ControllerError(f"g has no right inverse: {G.shape[0]} rows but {G.shape[1]} inputs")
    ex = (x - np.asarray(x_d, dtype=float))[idx]
    target = model.f(x)[idx] + (params.alpha1 + 0.5 * r * r) * ex + np.asarray(dhat)[idx] - np.asarray(xd_dot)[idx]
    if G.shape[0] == G.shape[1]:
        # 1-norm condition number; cheaper than an SVD on every call
        try:
            Ginv = np.linalg.inv(G)
        except np.linalg.LinAlgError:
            raise ControllerError("g is singular") from None
        cond = np.linalg.norm(G, 1) * np.linalg.norm(Ginv, 1)
        if not cond < COND_LIMIT:
            raise ControllerError(f"g is ill conditioned (cond={cond:.3g})")
        return -Ginv @ target
    cond = np.linalg.cond(G)
    if not cond < COND_LIMIT:
        raise ControllerError(f"g is ill conditioned (cond={cond:.3g})")
    sol, *_ = np.linalg.lstsq(G, -target, rcond=None)
    return sol


def surface_rhs(u_df, u_d, eps: float):
    if not eps > 0:
        raise ContractError("eps must be positive")
    return (np.asarray(u_d, dtype=float) - np.asarray(u_df, dtype=float)) / eps


def nominal_v(model, x, x_d, u, u_df, u_d, params: TrackingParams, rows: Optional[Sequence[int]] = None):
    """v_nom = -alpha2 (u - u_d^f) + d/dt u_d^f - g^T e_x."""
    x = np.asarray(x, dtype=float)
    idx = _rows(model, rows)
    ex = (x - np.asarray(x_d, dtype=float))[idx]
    udf_dot = surface_rhs(u_df, u_d, params.eps)
    return -params.alpha2 * (np.asarray(u, dtype=float) - u_df) + udf_dot - model.g(x)[idx].T @ ex


def shaped_reference(x, x_d, xd_dot, pos, vel, gain):
    """Velocity reference with position feedback for second-order plants.

    Returns a reference whose velocity rows are ``qdot_d - gain (q - q_d)`` and
    whose derivative rows are ``qddot_d - gain (qdot - qdot_d)``.
    """
    pos = np.asarray(pos, dtype=int)
    vel = np.asarray(vel, dtype=int)
    xr = np.array(x_d, dtype=float)
    xrd = np.array(xd_dot, dtype=float)
    xr[vel] = x_d[vel] - gain * (x[pos] - x_d[pos])
    xrd[vel] = xd_dot[vel] - gain * (x[vel] - x_d[vel])
    return xr, xrd
