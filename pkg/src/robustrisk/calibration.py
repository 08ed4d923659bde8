"""Normalization constant for the worst-case density on a loss sample.

The constant c centers the density map so that the reweighted sample
averages to one.  The map c -> K(c) (sample mean of the density values) is
continuous and non-increasing, strictly decreasing wherever some sample
point lies inside the active interval, so a sign-bracketing bisection is
unconditionally convergent.  The exponential family admits a closed form
through a log-sum-exp, which doubles as the overflow-safe route for large
theta * loss products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .divergences import Divergence, DivergenceOverflowError, z_of_loss

__all__ = ["CalibrationResult", "CalibrationError", "normalization_K", "solve_c"]

_MAX_DOUBLINGS = 200
_MAX_BISECT = 300


class CalibrationError(RuntimeError):
    """No normalizing constant found for this divergence and sample."""


@dataclass(frozen=True)
class CalibrationResult:
    c: float
    theta: float
    residual: float
    iterations: int
    method: str


def _probs(probs: Optional[np.ndarray], n: int) -> np.ndarray:
    if probs is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(probs, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"probs must have shape ({n},), got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("probs must be nonnegative and sum to 1")
    return p


def normalization_K(
    div: Divergence,
    theta: float,
    c: float,
    losses: np.ndarray,
    probs: Optional[np.ndarray] = None,
) -> float:
    """Sample mean of the worst-case density values at constant ``c``."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("losses must be non-empty")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    p = _probs(probs, losses.size)
    vals = np.asarray(z_of_loss(div, theta, c, losses))
    return float(np.dot(p, vals))


def _k_or_inf(div, theta, c, losses, probs) -> float:
    # overflow in g means the mean is astronomically large, which is all the
    # bracketing logic needs to know
    try:
        return normalization_K(div, theta, c, losses, probs)
    except DivergenceOverflowError:
        return np.inf


def solve_c(
    div: Divergence,
    theta: float,
    losses: np.ndarray,
    tol: float = 1e-10,
    probs: Optional[np.ndarray] = None,
) -> CalibrationResult:
    """Solve K(c) = 1 for the normalizing constant.

    Exponential-family divergences use the log-sum-exp closed form; anything
    else gets bracket expansion followed by bisection on the monotone K.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("losses must be non-empty")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    p = _probs(probs, losses.size)

    if div.kl_scale is not None and div.a == -np.inf:
        d = div.kl_scale
        lse = float(logsumexp(theta * losses / d, b=p))
        c = (d / theta) * (lse - 1.0)
        residual = abs(normalization_K(div, theta, c, losses, probs) - 1.0)
        return CalibrationResult(
            c=c, theta=theta, residual=residual, iterations=0, method="closed_form_kl"
        )

    # initial guess: exact for a single atom, decent anywhere
    c = float(np.dot(p, losses) - float(div.f_prime(np.array(1.0))) / theta)
    span = float(np.ptp(losses))
    step = max(1.0, span)

    c_lo, k_lo = c, _k_or_inf(div, theta, c, losses, probs)
    doublings = 0
    while k_lo < 1.0:
        c_lo -= step
        step *= 2.0
        doublings += 1
        if doublings > _MAX_DOUBLINGS:
            raise CalibrationError(
                "bracket expansion failed on the low side; the divergence "
                "cannot push this sample's mean density up to one"
            )
        k_lo = _k_or_inf(div, theta, c_lo, losses, probs)

    step = max(1.0, span)
    c_hi, k_hi = c, _k_or_inf(div, theta, c, losses, probs)
    doublings = 0
    while k_hi > 1.0:
        c_hi += step
        step *= 2.0
        doublings += 1
        if doublings > _MAX_DOUBLINGS:
            raise CalibrationError(
                "bracket expansion failed on the high side; K(c) stays above "
                "one for arbitrarily large c"
            )
        k_hi = _k_or_inf(div, theta, c_hi, losses, probs)

    best_c, best_res = c_hi, abs(k_hi - 1.0)
    if abs(k_lo - 1.0) < best_res:
        best_c, best_res = c_lo, abs(k_lo - 1.0)
    iterations = 0
    while best_res > tol and iterations < _MAX_BISECT:
        iterations += 1
        mid = 0.5 * (c_lo + c_hi)
        k_mid = _k_or_inf(div, theta, mid, losses, probs)
        if abs(k_mid - 1.0) < best_res:
            best_c, best_res = mid, abs(k_mid - 1.0)
        if k_mid >= 1.0:
            c_lo = mid
        else:
            c_hi = mid
        if c_hi - c_lo < 1e-300:
            break
    if best_res > tol:
        raise CalibrationError(
            f"bisection stalled at residual {best_res:.3e} (tol {tol:.1e}); "
            "the sample puts no mass inside the active interval near c"
        )
    return CalibrationResult(
        c=best_c,
        theta=theta,
        residual=best_res,
        iterations=iterations,
        method="bisection",
    )
