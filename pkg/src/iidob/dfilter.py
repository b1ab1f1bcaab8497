"""Low-pass filter giving a disturbance estimate with a known derivative."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .observer import BoundReport


@dataclass(frozen=True)
class FilterParams:
    T1: float = 50.0
    T2: float = 1.0


def filter_rhs(dhat_f, params: FilterParams, dhat, dbeta_dx_norm: float, r: float) -> np.ndarray:
    if r < 1 - 1e-9:
        raise ContractError("r must be >= 1")
    gain = params.T1 + params.T2 * r * r * dbeta_dx_norm**2
    return -gain * (np.asarray(dhat_f, dtype=float) - np.asarray(dhat, dtype=float))


def dbeta_dx_norm(dbeta_dx_diag) -> float:
    """Frobenius norm of the diagonal dbeta/dx, from its diagonal entries."""
    return float(np.sqrt(np.sum(np.square(dbeta_dx_diag))))


def zeta(params: FilterParams, kappa: float) -> float:
    if not params.T2 > 1.0 / (4.0 * kappa):
        raise ConfigError(f"filter needs T2 > 1/(4 kappa) = {1 / (4 * kappa):.6g}, got T2={params.T2}",
                          ["T2 > 1/(4 kappa)"])
    return min(2 * params.T1, 2 * kappa - 1.0 / (2 * params.T2))


def zeta_and_rho_f(params: FilterParams, report: BoundReport, z0norm: float):
    """Return zeta and the envelope t -> bound on ||dhat_f - dhat||."""
    zt = zeta(params, report.kappa)
    sat = 2 * report.omega / zt
    z0sq = float(z0norm) ** 2

    def rho_f(t):
        return np.sqrt((z0sq - sat) * np.exp(-zt * np.asarray(t)) + sat)

    return zt, rho_f
