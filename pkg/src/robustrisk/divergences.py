"""Convex divergence generators and the calculus the solvers need.

A divergence is described by the quintuple (f, f', f'', g, a): the generator
f on (0, inf) with f(1) = 0, its first two derivatives, the inverse g of f'
on range(f') = (a, inf), and the lower edge a = f'(0+).  User-defined
divergences supply the full quintuple; f' is never inverted numerically.

``f`` is extended to x = 0 by continuity where the limit exists, because
truncated worst-case densities genuinely reach zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import xlogy

__all__ = [
    "Divergence",
    "DivergenceOverflowError",
    "kl",
    "scaled_kl",
    "chi_squared",
    "from_name",
    "z_of_loss",
    "divergence_of_weights",
    "conjugate_term",
    "validate_divergence",
]

_EXP_LIMIT = 700.0  # largest exponent fed to exp; beyond this we refuse


class DivergenceOverflowError(OverflowError):
    """Raised instead of silently producing inf in g."""

    def __init__(self, exponent: float):
        self.exponent = float(exponent)
        super().__init__(
            f"exponent {exponent:.6g} exceeds {_EXP_LIMIT:g} in g; "
            "shift c upward, recenter the losses, or lower theta"
        )


@dataclass(frozen=True)
class Divergence:
    """Generator f with derivatives, the inverse g of f', and a = f'(0+).

    ``kl_scale`` flags the exponential family f(x) = d * x * ln(x) (constant
    x f''(x) = d); several fast paths key off it.
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    f_prime: Callable[[np.ndarray], np.ndarray]
    f_second: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    a: float
    kl_scale: Optional[float] = None


def _guarded_exp(exponent: np.ndarray) -> np.ndarray:
    exponent = np.asarray(exponent, dtype=float)
    if exponent.size and np.max(exponent) > _EXP_LIMIT:
        raise DivergenceOverflowError(float(np.max(exponent)))
    return np.exp(exponent)


def kl() -> Divergence:
    """Kullback-Leibler: f(x) = x ln x, g(y) = exp(y - 1)."""
    return replace(scaled_kl(1.0), name="kl")


def scaled_kl(d: float) -> Divergence:
    """f(x) = d * x ln x; the constant-x*f'' family containing KL (d = 1)."""
    if d <= 0:
        raise ValueError(f"scale must be positive, got {d}")
    return Divergence(
        name=f"scaled_kl({d:g})",
        f=lambda x: d * xlogy(np.asarray(x, dtype=float), x),
        f_prime=lambda x: d * (np.log(x) + 1.0),
        f_second=lambda x: d / np.asarray(x, dtype=float),
        g=lambda y: _guarded_exp(np.asarray(y, dtype=float) / d - 1.0),
        a=-np.inf,
        kl_scale=d,
    )


def chi_squared() -> Divergence:
    """f(x) = (x - 1)^2 with range(f') = (-2, inf); exercises truncation."""
    return Divergence(
        name="chi2",
        f=lambda x: (np.asarray(x, dtype=float) - 1.0) ** 2,
        f_prime=lambda x: 2.0 * (np.asarray(x, dtype=float) - 1.0),
        f_second=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0),
        g=lambda y: 1.0 + np.asarray(y, dtype=float) / 2.0,
        a=-2.0,
    )


def from_name(name: str, **params) -> Divergence:
    """Resolve the configuration names 'kl', 'scaled_kl' (param d), 'chi2'."""
    if name == "kl":
        return kl()
    if name == "scaled_kl":
        return scaled_kl(float(params.get("d", 1.0)))
    if name == "chi2":
        return chi_squared()
    raise ValueError(f"unknown divergence name {name!r}")


def z_of_loss(
    div: Divergence, theta: float, c: float, x: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """Worst-case density value g(theta * (x - c)) on its domain, 0 outside.

    The domain is the open interval where theta * (x - c) > a; the boundary
    point itself maps to 0.
    """
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    arr = np.asarray(x, dtype=float)
    y = theta * (arr - c)
    out = np.zeros_like(y)
    inside = y > div.a
    if np.any(inside):
        out[inside] = div.g(y[inside])
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def divergence_of_weights(
    div: Divergence, weights: np.ndarray, probs: Optional[np.ndarray] = None
) -> float:
    """Sample divergence E[f(w)] of a normalized weight vector.

    ``probs`` carries atom probabilities for exact discrete inputs; the
    default is the uniform empirical measure.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    p = _norm_probs(probs, w.size)
    total = float(np.dot(p, w))
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"weights must average to 1, got {total!r}")
    return float(np.dot(p, div.f(w)))


def conjugate_term(div: Divergence, z: np.ndarray) -> np.ndarray:
    """z f'(z) - f(z), extended by continuity to -f(0) at z = 0."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z > 0
    out[pos] = z[pos] * div.f_prime(z[pos]) - div.f(z[pos])
    if np.any(~pos):
        out[~pos] = -float(div.f(np.array(0.0)))
    return out


def _norm_probs(probs: Optional[np.ndarray], n: int) -> np.ndarray:
    if probs is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(probs, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"probs must have shape ({n},), got {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("probs must be nonnegative and sum to 1")
    return p


def validate_divergence(div: Divergence, rel_tol: float = 1e-10) -> None:
    """Check the structural requirements on a sampled grid.

    Verifies f(1) = 0, strict convexity, the g(f'(x)) = x round trip on
    x in [1e-3, 1e3], and that f' keeps growing far out (so the calibration
    equation stays solvable for any loss distribution).
    """
    x = np.logspace(-3, 3, 121)
    f1 = float(div.f(np.array(1.0)))
    if abs(f1) > 1e-12:
        raise ValueError(f"{div.name}: f(1) = {f1!r}, expected 0")
    if not np.all(div.f_second(x) > 0):
        raise ValueError(f"{div.name}: f'' not strictly positive on the grid")
    y = div.f_prime(x)
    back = div.g(y)
    err = np.max(np.abs(back - x) / np.maximum(np.abs(x), 1.0))
    if err > rel_tol:
        raise ValueError(f"{div.name}: g(f'(x)) round trip error {err:.3e}")
    if not float(div.f_prime(np.array(1e6))) > float(div.f_prime(np.array(1e3))) + 1.0:
        raise ValueError(f"{div.name}: f' does not diverge at infinity")
