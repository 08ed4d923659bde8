"""Finite-difference route to the value and worst-case surfaces.

For one-dimensional Markov models under the KL reweighting and losses of the
accumulated-integral shape, the value surface u(t, x) solves a semilinear
parabolic equation with a squared-gradient term,

    u_t + mu (u_x + h) + (theta/2) sigma^2 (u_x + h)^2
        + (1/2) sigma^2 u_xx + h1 = 0,

and the worst-case surface v(t, x) solves the linear advection-diffusion
equation obtained by replacing the quadratic term with the adjusted drift
mu + theta sigma^2 (u_x + h) acting on (v_x + h).  Both step backward from
h0(T, .) with implicit (backward-Euler) diffusion; u lags its nonlinearity
through Picard iteration, v carries the advection in the tridiagonal system
with an automatic central-to-upwind switch when the cell Peclet number
exceeds 2.

Boundary condition at both ends: vanishing second derivative (linear
extrapolation), exact for affine solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_banded

from .losses import IntegralFormLoss, integral_prefix
from .paths import DiffusionSpec, PathBatch, TimeGrid

__all__ = [
    "PdeGrid",
    "PdeSolution",
    "PdeError",
    "solve_value_pde",
    "solve_worst_case_pde",
    "solve_robust_pde",
    "assemble_processes",
    "default_pde_grid",
    "value_gradient_from_solution",
]


class PdeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PdeGrid:
    """Rectangular solver grid; n_x counts interior nodes."""

    x_min: float
    x_max: float
    n_x: int = 200
    n_t: int = 200
    advection: str = "auto"  # central | upwind | auto
    picard_tol: float = 1e-10
    picard_max_iter: int = 50

    def __post_init__(self):
        if self.x_max <= self.x_min:
            raise ValueError("x_max must exceed x_min")
        if self.n_x < 50 or self.n_t < 50:
            raise ValueError("need n_x >= 50 and n_t >= 50")
        if self.advection not in ("central", "upwind", "auto"):
            raise ValueError(f"unknown advection mode {self.advection!r}")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x + 2)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x + 1)


def default_pde_grid(
    model: DiffusionSpec, t_end: float, n_x: int = 200, n_t: int = 200
) -> PdeGrid:
    """Domain centered on x0, six sigma-sqrt(T) wide plus drift displacement."""
    x0 = float(model.x0[0])
    probe = np.array([[x0]])
    sig = float(np.max(np.abs(np.asarray(model.diffusion(0.0, probe), dtype=float))))
    mu = float(np.asarray(model.drift(0.0, probe), dtype=float).ravel()[0])
    width = 6.0 * max(sig, 1e-8) * np.sqrt(t_end)
    shift = mu * t_end
    return PdeGrid(
        x_min=x0 + min(shift, 0.0) - width,
        x_max=x0 + max(shift, 0.0) + width,
        n_x=n_x,
        n_t=n_t,
    )


@dataclass
class PdeSolution:
    x: np.ndarray
    t: np.ndarray
    theta: float
    u: np.ndarray
    v: Optional[np.ndarray] = None
    picard_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    max_picard_residual: float = 0.0
    notices: List[str] = field(default_factory=list)

    def u_at(self, t: float, x: float) -> float:
        return _interp_surface(self.u, self.t, self.x, t, x)

    def v_at(self, t: float, x: float) -> float:
        if self.v is None:
            raise ValueError("worst-case surface not solved")
        return _interp_surface(self.v, self.t, self.x, t, x)


def _interp_surface(surface, tg, xg, t, x) -> float:
    ti = np.clip(np.searchsorted(tg, t) - 1, 0, tg.size - 2)
    frac = (t - tg[ti]) / (tg[ti + 1] - tg[ti])
    frac = min(max(frac, 0.0), 1.0)
    lo = np.interp(x, xg, surface[ti])
    hi = np.interp(x, xg, surface[ti + 1])
    return float((1 - frac) * lo + frac * hi)


def _coeff_1d(fn, t: float, x: np.ndarray) -> np.ndarray:
    out = np.asarray(fn(t, x[:, None]), dtype=float)
    if out.ndim == 3:
        out = out[:, 0, 0]
    return np.broadcast_to(out.reshape(-1) if out.ndim else out, x.shape).astype(float)


def _loss_field(fn, t: float, x: np.ndarray) -> np.ndarray:
    if fn is None:
        return np.zeros_like(x)
    return np.broadcast_to(np.asarray(fn(t, x), dtype=float), x.shape).astype(float)


def _gradient(w: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - w[:-2]) / (2.0 * dx)
    out[0] = (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * dx)
    out[-1] = (3.0 * w[-1] - 4.0 * w[-2] + w[-3]) / (2.0 * dx)
    return out


def _implicit_step(
    prev: np.ndarray,
    diff: np.ndarray,
    drift: Optional[np.ndarray],
    source: np.ndarray,
    dx: float,
    dt: float,
    upwind_mask: Optional[np.ndarray],
) -> np.ndarray:
    """One backward-Euler step of  w_t + drift w_x + diff w_xx + source = 0.

    Boundary nodes are eliminated through the zero-second-derivative closure
    w_0 = 2 w_1 - w_2 (and mirrored on the right), leaving a tridiagonal
    system on the interior.
    """
    n = prev.size
    c = dt * diff / dx**2
    lo = -c.copy()
    di = 1.0 + 2.0 * c
    up = -c.copy()
    if drift is not None:
        adt = dt * drift / dx
        if upwind_mask is None:
            upwind_mask = np.zeros(n, dtype=bool)
        central = ~upwind_mask
        lo += np.where(central, adt / 2.0, np.where(drift > 0, adt, 0.0))
        up += np.where(central, -adt / 2.0, np.where(drift > 0, 0.0, -adt))
        di += np.where(central, 0.0, np.abs(adt))
    b = prev + dt * source

    nn = n - 2
    ab = np.zeros((3, nn))
    rhs = b[1:-1].copy()
    ab[0, 1:] = up[1:-1][:-1]
    ab[1, :] = di[1:-1]
    ab[2, :-1] = lo[1:-1][1:]
    # fold the extrapolated boundary values into the edge rows
    ab[1, 0] += 2.0 * lo[1]
    ab[0, 1] += -lo[1]
    ab[1, -1] += 2.0 * up[-2]
    ab[2, -2] += -up[-2]
    inner = solve_banded((1, 1), ab, rhs)
    out = np.empty(n)
    out[1:-1] = inner
    out[0] = 2.0 * inner[0] - inner[1]
    out[-1] = 2.0 * inner[-1] - inner[-2]
    return out


def _check_domain(model: DiffusionSpec, grid: PdeGrid, t_end: float,
                  notices: List[str]) -> None:
    x0 = float(model.x0[0])
    if not grid.x_min < x0 < grid.x_max:
        raise PdeError(f"x0 = {x0} outside the grid [{grid.x_min}, {grid.x_max}]")
    probe = np.array([[x0]])
    sig = float(np.max(np.abs(np.asarray(model.diffusion(0.0, probe), dtype=float))))
    need = 5.0 * sig * np.sqrt(t_end)
    margin = min(x0 - grid.x_min, grid.x_max - x0)
    if margin < need:
        notices.append(
            f"domain margin {margin:.4g} below 5*sigma*sqrt(T) = {need:.4g}; "
            "boundary error may contaminate the interior"
        )


def solve_value_pde(
    model: DiffusionSpec,
    loss: IntegralFormLoss,
    theta: float,
    grid: PdeGrid,
    t_end: float,
) -> PdeSolution:
    """Backward solve of the semilinear value equation on [0, T].

    Diffusion is implicit; the drift and squared-gradient terms are lagged
    and Picard-iterated at every step until the sup-norm update falls below
    ``grid.picard_tol``.
    """
    if model.dim != 1:
        raise PdeError("the finite-difference route is one-dimensional only")
    if not isinstance(loss, IntegralFormLoss):
        raise PdeError("the finite-difference route needs an integral-form loss")
    notices: List[str] = []
    _check_domain(model, grid, t_end, notices)

    x = grid.x
    dx = grid.dx
    dt = t_end / grid.n_t
    tgrid = np.linspace(0.0, t_end, grid.n_t + 1)

    u = _loss_field(loss.h0, t_end, x) if loss.h0 is not None else np.zeros_like(x)
    slices = [u.copy()]
    iters = np.zeros(grid.n_t, dtype=int)
    worst_resid = 0.0

    for m in range(grid.n_t):
        t = t_end - (m + 1) * dt
        mu = _coeff_1d(model.drift, t, x)
        sig = _coeff_1d(model.diffusion, t, x)
        diff = 0.5 * sig**2
        h = _loss_field(loss.h, t, x)
        h1 = _loss_field(loss.h1, t, x)

        w = u.copy()
        converged = False
        for it in range(grid.picard_max_iter):
            wx = _gradient(w, dx)
            slope = wx + h
            source = mu * slope + 0.5 * theta * (sig * slope) ** 2 + h1
            w_new = _implicit_step(u, diff, None, source, dx, dt, None)
            resid = float(np.max(np.abs(w_new - w)))
            w = w_new
            iters[m] = it + 1
            if resid <= grid.picard_tol:
                converged = True
                worst_resid = max(worst_resid, resid)
                break
        if not converged:
            raise PdeError(
                f"Picard iteration stalled at step {m} (t = {t:.6g}), "
                f"residual {resid:.3e}; reduce the time step"
            )
        u = w
        slices.append(u.copy())

    return PdeSolution(
        x=x,
        t=tgrid,
        theta=theta,
        u=np.array(slices[::-1]),
        picard_iterations=iters[::-1].copy(),
        max_picard_residual=worst_resid,
        notices=notices,
    )


def solve_worst_case_pde(
    model: DiffusionSpec,
    loss: IntegralFormLoss,
    theta: float,
    grid: PdeGrid,
    value: PdeSolution,
) -> PdeSolution:
    """Backward solve of the worst-case surface given the value surface.

    The advection drift mu + theta sigma^2 (u_x + h) sits inside the
    tridiagonal system; cells whose Peclet number |a| dx / D exceeds 2 fall
    back to first-order upwinding (mode "auto").
    """
    if value.u.shape != (grid.n_t + 1, grid.n_x + 2):
        raise PdeError("value surface does not match the grid")
    t_end = float(value.t[-1])
    x = grid.x
    dx = grid.dx
    dt = t_end / grid.n_t
    notices = list(value.notices)
    switched = False

    v = _loss_field(loss.h0, t_end, x) if loss.h0 is not None else np.zeros_like(x)
    slices = [v.copy()]
    for m in range(grid.n_t):
        t = t_end - (m + 1) * dt
        idx = grid.n_t - (m + 1)  # value slice at the target time level
        mu = _coeff_1d(model.drift, t, x)
        sig = _coeff_1d(model.diffusion, t, x)
        diff = 0.5 * sig**2
        h = _loss_field(loss.h, t, x)
        h1 = _loss_field(loss.h1, t, x)
        ux = _gradient(value.u[idx], dx)
        a = mu + theta * sig**2 * (ux + h)

        if grid.advection == "central":
            mask = np.zeros_like(a, dtype=bool)
        elif grid.advection == "upwind":
            mask = np.ones_like(a, dtype=bool)
        else:
            peclet = np.abs(a) * dx / np.maximum(diff, 1e-300)
            mask = peclet > 2.0
            if mask.any() and not switched:
                switched = True
                notices.append(
                    f"cell Peclet exceeded 2 at step {m}; switched those "
                    "cells to upwind advection"
                )
        source = a * h + h1
        v = _implicit_step(v, diff, a, source, dx, dt, mask)
        slices.append(v.copy())

    return replace(value, v=np.array(slices[::-1]), notices=notices)


def solve_robust_pde(
    model: DiffusionSpec,
    loss: IntegralFormLoss,
    theta: float,
    grid: PdeGrid,
    t_end: float,
) -> PdeSolution:
    """Convenience wrapper solving the value and worst-case surfaces."""
    value = solve_value_pde(model, loss, theta, grid, t_end)
    return solve_worst_case_pde(model, loss, theta, grid, value)


def assemble_processes(
    solution: PdeSolution,
    batch: PathBatch,
    loss: IntegralFormLoss,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (U, V, eta) along simulated paths from the PDE surfaces.

    Returns arrays of shape (n_paths, n_nodes) plus a validity mask; path
    nodes must align with a subsampling of the solver's time levels, and
    states leaving the spatial domain are masked.  The accumulated integrals
    cancel in eta, leaving theta * (v - u).
    """
    if solution.v is None:
        raise PdeError("worst-case surface not solved")
    grid = batch.grid
    n_t = solution.t.size - 1
    if n_t % grid.n_steps != 0:
        raise PdeError(
            f"solver time levels ({n_t}) are not a multiple of path steps "
            f"({grid.n_steps})"
        )
    if abs(float(solution.t[-1]) - grid.t_end) > 1e-12 * max(1.0, grid.t_end):
        raise PdeError("solver horizon differs from the path grid horizon")
    stride = n_t // grid.n_steps

    states = batch.series(0)
    prefix = integral_prefix(loss, batch)
    n_paths, n_nodes = states.shape
    U = np.empty((n_paths, n_nodes))
    V = np.empty((n_paths, n_nodes))
    xg = solution.x
    valid = (states >= xg[0]) & (states <= xg[-1])
    for k in range(n_nodes):
        sl = k * stride
        U[:, k] = np.interp(states[:, k], xg, solution.u[sl])
        V[:, k] = np.interp(states[:, k], xg, solution.v[sl])
    eta = solution.theta * (V - U)
    U += prefix
    V += prefix
    U[~valid] = np.nan
    V[~valid] = np.nan
    eta[~valid] = np.nan
    return U, V, eta, valid


def value_gradient_from_solution(
    solution: PdeSolution,
) -> Callable[[float, np.ndarray], np.ndarray]:
    """Central-difference gradient of the value surface as a drift input.

    The returned callable takes (t, states) with states shaped (n, 1) and
    linearly interpolates in both time and space; queries outside the domain
    clamp to the edge.
    """
    dx = float(solution.x[1] - solution.x[0])
    ux = np.empty_like(solution.u)
    for i in range(solution.u.shape[0]):
        ux[i] = _gradient(solution.u[i], dx)
    tg, xg = solution.t, solution.x

    def gradient(t: float, x: np.ndarray) -> np.ndarray:
        pts = np.asarray(x, dtype=float)[:, 0]
        ti = int(np.clip(np.searchsorted(tg, t) - 1, 0, tg.size - 2))
        frac = (t - tg[ti]) / (tg[ti + 1] - tg[ti])
        frac = min(max(frac, 0.0), 1.0)
        lo = np.interp(pts, xg, ux[ti])
        hi = np.interp(pts, xg, ux[ti + 1])
        return ((1.0 - frac) * lo + frac * hi)[:, None]

    return gradient
