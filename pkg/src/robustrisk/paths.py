"""Time grids and Euler-Maruyama simulation of diffusion paths.

Randomness is counter-based: every path owns a Philox stream keyed by
(seed, path index), so a path's Gaussian draws depend only on that pair.
Regenerating a batch with the same inputs is bit-for-bit reproducible no
matter how the work is chunked or how many threads run it.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "TimeGrid",
    "DiffusionSpec",
    "PathBatch",
    "SimulationError",
    "simulate_paths",
    "brownian_increments",
    "abm",
    "gbm_log",
    "derive_seed",
]

_SCHEME_TAG = "euler-maruyama/philox"
_CHUNK = 8192


class SimulationError(RuntimeError):
    """Non-finite drift or diffusion value encountered during stepping."""


def derive_seed(seed: int, label: str) -> int:
    """Derive a labelled 63-bit sub-seed from a master seed.

    Hash-based so distinct labels give unrelated streams and the mapping is
    stable across runs and platforms.
    """
    digest = hashlib.sha256(f"{label}:{int(seed)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_n = T."""

    t_end: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ValueError(f"t_end must exceed t_start, got {self.t_end}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_steps + 1)


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift/diffusion coefficient functions plus the initial state.

    ``drift(t, x)`` and ``diffusion(t, x)`` receive the scalar time and the
    state block ``x`` of shape (n, dim) and must return arrays broadcastable
    to (n, dim).  ``diffusion`` may alternatively return (n, dim, dim) full
    matrices; scalars are fine for dim == 1.
    """

    dim: int
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    x0: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.dim,):
            raise ValueError(f"x0 must have shape ({self.dim},), got {x0.shape}")
        object.__setattr__(self, "x0", x0)


def abm(mu: float, sigma: float, x0: float = 0.0) -> DiffusionSpec:
    """Arithmetic Brownian motion: dX = mu dt + sigma dW."""
    return DiffusionSpec(
        dim=1,
        drift=lambda t, x: np.full_like(x, mu),
        diffusion=lambda t, x: np.full_like(x, sigma),
        x0=np.array([x0]),
    )


def gbm_log(mu: float, sigma: float, x0_log: float = 0.0) -> DiffusionSpec:
    """Geometric Brownian motion simulated on the log state.

    The state is ln S, so the coefficients are the constant pair
    (mu - sigma^2/2, sigma) and Euler-Maruyama is exact in distribution.
    """
    return DiffusionSpec(
        dim=1,
        drift=lambda t, x: np.full_like(x, mu - 0.5 * sigma**2),
        diffusion=lambda t, x: np.full_like(x, sigma),
        x0=np.array([x0_log]),
    )


@dataclass(frozen=True)
class PathBatch:
    """Simulated trajectories with their RNG provenance.

    ``states`` has shape (n_paths, n_steps + 1, dim) and is read-only.
    """

    grid: TimeGrid
    n_paths: int
    states: np.ndarray = field(repr=False)
    seed: int
    scheme_tag: str = _SCHEME_TAG

    def __post_init__(self):
        self.states.flags.writeable = False

    def path(self, i: int) -> np.ndarray:
        """States of path ``i``, shape (n_steps + 1, dim)."""
        return self.states[i]

    def series(self, component: int = 0) -> np.ndarray:
        """2-D view (n_paths, n_nodes) of one state component."""
        return self.states[:, :, component]

    def dump_csv(self, fileobj) -> None:
        """Debug dump, one row per path, columns = grid nodes (dim 1 only)."""
        if self.states.shape[2] != 1:
            raise ValueError("CSV dump only supports dim == 1; use numpy.save")
        header = ",".join(repr(float(t)) for t in self.grid.nodes)
        fileobj.write("# t: " + header + "\n")
        for row in self.series(0):
            fileobj.write(",".join(repr(float(v)) for v in row) + "\n")


def _path_key(seed: int, path_index: int) -> np.ndarray:
    # 128-bit Philox key: one word for the seed, one for the path.
    return np.array(
        [np.uint64(np.int64(seed)), np.uint64(path_index)], dtype=np.uint64
    )


def _path_normals(seed: int, path_index: int, n_steps: int, dim: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=_path_key(seed, path_index)))
    return gen.standard_normal((n_steps, dim))


def brownian_increments(
    grid: TimeGrid, n_paths: int, seed: int, path_index: int
) -> np.ndarray:
    """Exact Brownian increments sqrt(dt) * xi used for one path.

    Deterministic in (seed, path_index); unaffected by how many other paths
    exist or in what order they are generated.
    """
    if not 0 <= path_index < n_paths:
        raise ValueError(f"path_index {path_index} out of range [0, {n_paths})")
    return np.sqrt(grid.dt) * _path_normals(seed, path_index, grid.n_steps, 1)[:, 0]


def _apply_diffusion(sig: np.ndarray, xi: np.ndarray, n: int, dim: int) -> np.ndarray:
    """Map a diffusion coefficient of any accepted shape onto noise xi (n, dim)."""
    sig = np.asarray(sig, dtype=float)
    if sig.ndim == 3:  # full (n, dim, dim) matrices
        return np.einsum("nij,nj->ni", sig, xi)
    return np.broadcast_to(sig, (n, dim)) * xi


def _simulate_chunk(
    spec: DiffusionSpec,
    grid: TimeGrid,
    seed: int,
    lo: int,
    hi: int,
    out: np.ndarray,
) -> None:
    n = hi - lo
    dim = spec.dim
    normals = np.empty((n, grid.n_steps, dim))
    for i in range(n):
        normals[i] = _path_normals(seed, lo + i, grid.n_steps, dim)

    sqdt = np.sqrt(grid.dt)
    x = np.broadcast_to(spec.x0, (n, dim)).copy()
    out[lo:hi, 0] = x
    nodes = grid.nodes
    for k in range(grid.n_steps):
        t = float(nodes[k])
        mu = np.asarray(spec.drift(t, x), dtype=float)
        sig = spec.diffusion(t, x)
        if not np.all(np.isfinite(mu)):
            bad = lo + int(np.argwhere(~np.isfinite(np.broadcast_to(mu, x.shape)))[0][0])
            raise SimulationError(
                f"non-finite drift at path {bad}, step {k}, state "
                f"{out[bad, k].tolist()}"
            )
        noise = _apply_diffusion(sig, normals[:, k], n, dim)
        if not np.all(np.isfinite(noise)):
            bad = lo + int(np.argwhere(~np.isfinite(noise))[0][0])
            raise SimulationError(
                f"non-finite diffusion at path {bad}, step {k}, state "
                f"{out[bad, k].tolist()}"
            )
        x = x + np.broadcast_to(mu, (n, dim)) * grid.dt + sqdt * noise
        out[lo:hi, k + 1] = x


def simulate_paths(
    spec: DiffusionSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    n_threads: int = 1,
) -> PathBatch:
    """Euler-Maruyama simulation of ``n_paths`` trajectories on ``grid``.

    X_{k+1} = X_k + mu(t_k, X_k) dt + sigma(t_k, X_k) sqrt(dt) xi_k with the
    xi_k drawn from the per-path counter-based streams.  ``n_threads`` only
    splits the work across path chunks; outputs are identical for any value.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    states = np.empty((n_paths, grid.n_steps + 1, spec.dim))
    bounds = list(range(0, n_paths, _CHUNK)) + [n_paths]
    chunks = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [
                pool.submit(_simulate_chunk, spec, grid, seed, lo, hi, states)
                for lo, hi in chunks
            ]
            for fut in futures:
                fut.result()
    else:
        for lo, hi in chunks:
            _simulate_chunk(spec, grid, seed, lo, hi, states)
    return PathBatch(grid=grid, n_paths=n_paths, states=states, seed=seed)
