"""Change-of-measure ledger for drift-controlled simulations.

A ledger accumulates, along one path, the Kullback-Leibler half-integral
``(1/2) int |eta|^2 ds`` of the drift distortion ``eta`` and the log density
exponent ``int eta . dW - (1/2) int |eta|^2 ds``.  Quadrature is the
left-endpoint Riemann sum on the simulation grid, consistent with the Euler
scheme treating ``eta`` as predictable; with that convention the exponential
weight has mean exactly one in discrete time as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GirsanovLedger",
    "accumulate",
    "pinsker_tv_bound",
    "diff_lower_bound",
    "importance_weight",
]

_MAX_LOG = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class GirsanovLedger:
    """Per-path change-of-measure totals.

    ``kl_half_integral`` is non-decreasing along a path; a ledger with no
    distortion stays identically zero.
    """

    kl_half_integral: float = 0.0
    log_exponent: float = 0.0
    t_elapsed: float = 0.0


def accumulate(ledger: GirsanovLedger, eta, dw, dt: float) -> GirsanovLedger:
    """Fold one step of drift distortion ``eta`` against the increment ``dw``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    dw = np.atleast_1d(np.asarray(dw, dtype=float))
    if not np.all(np.isfinite(eta)):
        raise ValueError("non-finite drift distortion passed to the ledger")
    if eta.shape != dw.shape:
        raise ValueError(f"eta shape {eta.shape} != increment shape {dw.shape}")
    quad = 0.5 * float(eta @ eta) * dt
    return GirsanovLedger(
        kl_half_integral=ledger.kl_half_integral + quad,
        log_exponent=ledger.log_exponent + float(eta @ dw) - quad,
        t_elapsed=ledger.t_elapsed + dt,
    )


def pinsker_tv_bound(kl: float) -> float:
    """Total-variation bound ``sqrt(kl / 2)`` from the KL divergence."""
    if kl < 0:
        raise ValueError(f"KL divergence must be non-negative, got {kl}")
    return math.sqrt(0.5 * kl)


def diff_lower_bound(mu_a: float, kl: float, n: float) -> float:
    """Lower bound ``mu_a/N - (kl + ln 2)/(N ln N)`` on the target-measure mass.

    May be negative when the KL cost swamps the probability; clamping is the
    caller's presentation choice.
    """
    if not 0.0 <= mu_a <= 1.0:
        raise ValueError(f"mu_a must be a probability, got {mu_a}")
    if kl < 0:
        raise ValueError(f"KL divergence must be non-negative, got {kl}")
    if not n > 1.0:
        raise ValueError(f"N must exceed 1, got {n}")
    return mu_a / n - (kl + math.log(2.0)) / (n * math.log(n))


def importance_weight(ledger: GirsanovLedger) -> float:
    """Exponential weight ``exp(log_exponent)`` relating controlled and plain laws."""
    if ledger.log_exponent > _MAX_LOG:
        raise OverflowError(
            f"importance weight overflows: log exponent {ledger.log_exponent:.6g}"
        )
    return math.exp(ledger.log_exponent)
