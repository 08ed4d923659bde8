"""Non-anticipative cumulative loss functionals on discretized paths.

Four concrete shapes are supported:

* ``TerminalLoss``    -- phi(X_T), realized only at the final node;
* ``IntegralFormLoss``-- h0(T, X_T) + integral(h1 dt) + integral(h dX),
  with left-point (Ito) sums for both integrals;
* ``RunningMaxLoss``  -- prefix maximum of phi along the path;
* ``CustomFoldLoss``  -- user accumulator folded left-to-right over steps.

Running values at node k use only nodes 0..k, so non-anticipativity holds by
construction.  Loss callables must broadcast over numpy arrays; for dim == 1
models they receive plain arrays, for dim > 1 the state carries a trailing
dimension axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .paths import PathBatch, TimeGrid

__all__ = [
    "TerminalLoss",
    "IntegralFormLoss",
    "RunningMaxLoss",
    "CustomFoldLoss",
    "LossSpec",
    "EvaluationError",
    "evaluate_terminal",
    "evaluate_running",
    "terminal_losses",
    "running_losses",
    "integral_prefix",
    "terminal_identity",
    "terminal_call",
    "asian_integral",
    "running_max",
]


class EvaluationError(RuntimeError):
    """Non-finite intermediate while accumulating a loss."""


@dataclass(frozen=True)
class TerminalLoss:
    """Loss realized at liquidation: zero before T, phi(X_T) at T."""

    phi: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class IntegralFormLoss:
    """h0(T, X_T) + integral(h1(t, X) dt) + integral(h(t, X) dX).

    ``None`` components are treated as zero.  The dX sum is the Ito
    (left-point) sum, and h0 enters only at the final node.
    """

    h0: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    h1: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    h: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class RunningMaxLoss:
    """Prefix maximum max_{s <= t} phi(X_s)."""

    phi: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CustomFoldLoss:
    """Left fold acc_{k+1} = step(t_k, x_k, x_{k+1}, acc_k) starting at init.

    The step function sees only the current transition, which enforces
    non-anticipativity structurally.  States arrive as floats for dim == 1
    and as vectors otherwise.
    """

    step: Callable[[float, object, object, float], float]
    init: float = 0.0


LossSpec = Union[TerminalLoss, IntegralFormLoss, RunningMaxLoss, CustomFoldLoss]


def terminal_identity() -> TerminalLoss:
    return TerminalLoss(phi=lambda x: x)


def terminal_call(strike: float) -> TerminalLoss:
    return TerminalLoss(phi=lambda x: np.maximum(x - strike, 0.0))


def asian_integral(t_end: float) -> IntegralFormLoss:
    """Time-average of the state: h1(t, x) = x / T."""
    return IntegralFormLoss(h1=lambda t, x: x / t_end)


def running_max() -> RunningMaxLoss:
    return RunningMaxLoss(phi=lambda x: x)


def _squeeze_state(states: np.ndarray) -> np.ndarray:
    # dim == 1 callables see plain (paths, nodes) arrays
    return states[:, :, 0] if states.shape[2] == 1 else states


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        if values.ndim == 1:
            raise EvaluationError(f"non-finite {what} value at path {int(bad[0])}")
        raise EvaluationError(
            f"non-finite {what} value at path {int(bad[0])}, step {int(bad[1])}"
        )


def _running_block(loss: LossSpec, states: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Running loss values, shape (n_paths, n_nodes)."""
    n_paths, n_nodes, _ = states.shape
    x = _squeeze_state(states)

    if isinstance(loss, TerminalLoss):
        out = np.zeros((n_paths, n_nodes))
        out[:, -1] = loss.phi(x[:, -1])
        _check_finite(out[:, -1], "terminal payoff")
        return out

    if isinstance(loss, IntegralFormLoss):
        out = _integral_prefix_block(loss, states, t)
        if loss.h0 is not None:
            h0_vals = np.asarray(loss.h0(t[-1], x[:, -1]), dtype=float)
            _check_finite(h0_vals, "h0")
            out[:, -1] = out[:, -1] + h0_vals
        return out

    if isinstance(loss, RunningMaxLoss):
        vals = np.asarray(loss.phi(x), dtype=float)
        _check_finite(vals, "running payoff")
        return np.maximum.accumulate(np.broadcast_to(vals, (n_paths, n_nodes)), axis=1)

    if isinstance(loss, CustomFoldLoss):
        scalar_state = states.shape[2] == 1
        out = np.empty((n_paths, n_nodes))
        for i in range(n_paths):
            acc = loss.init
            out[i, 0] = acc
            for k in range(n_nodes - 1):
                if scalar_state:
                    acc = loss.step(
                        float(t[k]), float(states[i, k, 0]),
                        float(states[i, k + 1, 0]), acc,
                    )
                else:
                    acc = loss.step(float(t[k]), states[i, k], states[i, k + 1], acc)
                if not np.isfinite(acc):
                    raise EvaluationError(
                        f"non-finite fold value at path {i}, step {k}"
                    )
                out[i, k + 1] = acc
        return out

    raise TypeError(f"unknown loss spec {type(loss).__name__}")


def _integral_prefix_block(
    loss: IntegralFormLoss, states: np.ndarray, t: np.ndarray
) -> np.ndarray:
    """Prefix sums of the dt- and dX-integrals (h0 excluded), (paths, nodes)."""
    n_paths, n_nodes, _ = states.shape
    x = _squeeze_state(states)
    increments = np.zeros((n_paths, n_nodes - 1))
    dt = np.diff(t)

    if loss.h1 is not None:
        h1_vals = np.asarray(loss.h1(t[None, :-1], x[:, :-1]), dtype=float)
        _check_finite(h1_vals, "h1")
        increments += np.broadcast_to(h1_vals, increments.shape) * dt[None, :]

    if loss.h is not None:
        h_vals = np.asarray(loss.h(t[None, :-1], x[:, :-1]), dtype=float)
        _check_finite(h_vals, "h")
        dx = np.diff(states, axis=1)  # (paths, steps, dim)
        if states.shape[2] == 1:
            hdx = np.broadcast_to(h_vals, increments.shape) * dx[:, :, 0]
        else:
            hdx = np.einsum("pkd,pkd->pk", np.broadcast_to(h_vals, dx.shape), dx)
        increments += hdx

    out = np.zeros((n_paths, n_nodes))
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return out


def _as_block(path: np.ndarray, grid: TimeGrid) -> np.ndarray:
    arr = np.asarray(path, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] != grid.n_nodes:
        raise ValueError(
            f"path has {arr.shape[0]} nodes, grid expects {grid.n_nodes}"
        )
    return arr[None, :, :]


def evaluate_running(loss: LossSpec, path: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Running loss along one path; element k is the value at node t_k."""
    return _running_block(loss, _as_block(path, grid), grid.nodes)[0]


def evaluate_terminal(loss: LossSpec, path: np.ndarray, grid: TimeGrid) -> float:
    """Total loss at T; identical to the last element of evaluate_running."""
    return float(evaluate_running(loss, path, grid)[-1])


def running_losses(loss: LossSpec, batch: PathBatch) -> np.ndarray:
    """Running loss values for every path in a batch, (n_paths, n_nodes)."""
    return _running_block(loss, batch.states, batch.grid.nodes)


def terminal_losses(loss: LossSpec, batch: PathBatch) -> np.ndarray:
    """Terminal loss per path, shape (n_paths,)."""
    return running_losses(loss, batch)[:, -1]


def integral_prefix(loss: IntegralFormLoss, batch: PathBatch) -> np.ndarray:
    """Accumulated integral(h1 dt) + integral(h dX) at every node, h0 excluded."""
    if not isinstance(loss, IntegralFormLoss):
        raise TypeError("integral_prefix requires an IntegralFormLoss")
    return _integral_prefix_block(loss, batch.states, batch.grid.nodes)
