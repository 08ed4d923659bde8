"""Conditional value/risk/budget processes along simulated paths.

The engine estimates the martingale triple behind the robust-loss
construction by cross-sectional least squares: terminal values are projected
onto basis functions of each node's features, giving per-path, per-node
estimates of the density Z, the conjugate component M and the loss-weighted
component W, from which the value process U, the worst-case risk V and the
budget eta = theta * (V - U) are assembled.

For the exponential family (KL and its scaled variants) the projection runs
in centered form: the conditional mean of the loss is fitted first and the
exponential tilt is applied to the residual.  That keeps the regression
targets O(1), removes the dominant curvature from the projection, and makes
the estimator exact (up to sampling noise) whenever the loss is conditionally
Gaussian with state-independent variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .divergences import Divergence, conjugate_term, kl, z_of_loss
from .losses import (
    IntegralFormLoss,
    LossSpec,
    RunningMaxLoss,
    integral_prefix,
    running_losses,
    terminal_losses,
)
from .paths import DiffusionSpec, PathBatch, TimeGrid, derive_seed, simulate_paths
from .calibration import solve_c
from .terminal import measure_at_zero

__all__ = [
    "RegressionConfig",
    "ProcessPanel",
    "PanelDiagnostics",
    "MartingaleDiagnostics",
    "GirsanovReport",
    "estimate_conditional_processes",
    "martingale_residual_check",
    "girsanov_resimulate",
    "Z_FLOOR",
]

Z_FLOOR = 1e-12

_FEATURE_TOKENS = ("state", "running_integral", "running_max")


@dataclass(frozen=True)
class RegressionConfig:
    """Basis for the cross-sectional projections.

    ``features`` is a subset of {"state", "running_integral", "running_max"};
    None selects state plus whatever running statistic matches the loss shape.
    State components enter as powers 1..degree, running features linearly.
    """

    degree: int = 2
    ridge: float = 0.0
    features: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"degree must be >= 0, got {self.degree}")
        if self.ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {self.ridge}")
        if self.features is not None:
            bad = set(self.features) - set(_FEATURE_TOKENS)
            if bad:
                raise ValueError(f"unknown feature tokens {sorted(bad)}")


@dataclass
class PanelDiagnostics:
    r2_z: np.ndarray
    r2_w: np.ndarray
    r2_m: np.ndarray
    n_features: np.ndarray
    se_u: np.ndarray
    se_v: np.ndarray
    masked_fraction: float
    estimator: str
    warnings: List[str] = field(default_factory=list)


@dataclass
class ProcessPanel:
    """Per-path, per-node process estimates plus fit diagnostics."""

    grid: TimeGrid
    theta: float
    divergence: str
    c: float
    U: np.ndarray
    V: np.ndarray
    eta: np.ndarray
    Z: np.ndarray
    M: np.ndarray
    W: np.ndarray
    valid: np.ndarray
    cfg: RegressionConfig
    diagnostics: PanelDiagnostics


def _auto_features(loss: LossSpec) -> Tuple[str, ...]:
    feats = ["state"]
    if isinstance(loss, IntegralFormLoss) and (loss.h1 is not None or loss.h is not None):
        feats.append("running_integral")
    if isinstance(loss, RunningMaxLoss):
        feats.append("running_max")
    return tuple(feats)


def _running_features(loss: LossSpec, batch: PathBatch, tokens: Tuple[str, ...]):
    extras: Dict[str, np.ndarray] = {}
    if "running_integral" in tokens:
        if not isinstance(loss, IntegralFormLoss):
            raise ValueError("running_integral feature needs an integral-form loss")
        extras["running_integral"] = integral_prefix(loss, batch)
    if "running_max" in tokens:
        extras["running_max"] = running_losses(loss, batch)
    return extras


def _design(
    batch: PathBatch,
    cfg: RegressionConfig,
    tokens: Tuple[str, ...],
    extras: Dict[str, np.ndarray],
    node: int,
) -> np.ndarray:
    cols = [np.ones(batch.n_paths)]
    if "state" in tokens:
        for comp in range(batch.states.shape[2]):
            x = batch.states[:, node, comp]
            for power in range(1, cfg.degree + 1):
                cols.append(x**power)
    for token in ("running_integral", "running_max"):
        if token in tokens:
            cols.append(extras[token][:, node])
    A = np.column_stack(cols)
    # exactly-constant columns (e.g. every feature at node 0) collapse onto
    # the intercept; drop them so the solve stays full rank
    keep = [0] + [
        j for j in range(1, A.shape[1]) if np.ptp(A[:, j]) > 0.0
    ]
    return A[:, keep]


@dataclass
class _Fit:
    fitted: np.ndarray
    coef: np.ndarray
    resid_std: float
    r2: float
    leverage: Optional[np.ndarray] = None


def _fit(A: np.ndarray, y: np.ndarray, ridge: float, warnings: List[str],
         node: int, want_leverage: bool = False) -> _Fit:
    n, p = A.shape
    if ridge > 0:
        gram = A.T @ A + ridge * np.eye(p)
        coef = np.linalg.solve(gram, A.T @ y)
    else:
        coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
        if rank < p:
            warnings.append(f"node {node}: rank-deficient design, ridge fallback")
            lam = 1e-10 * np.trace(A.T @ A) / p
            gram = A.T @ A + lam * np.eye(p)
            coef = np.linalg.solve(gram, A.T @ y)
    fitted = A @ coef
    resid = y - fitted
    dof = max(n - p, 1)
    resid_std = float(np.sqrt(resid @ resid / dof))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-300:
        r2 = 1.0 if float(resid @ resid) <= 1e-20 else 0.0
    else:
        r2 = 1.0 - float(resid @ resid) / ss_tot
    leverage = None
    if want_leverage:
        q, _ = np.linalg.qr(A)
        leverage = np.einsum("ij,ij->i", q, q)
    return _Fit(fitted, coef, resid_std, r2, leverage)


def estimate_conditional_processes(
    paths: PathBatch,
    loss: LossSpec,
    div: Divergence,
    theta: float,
    cfg: Optional[RegressionConfig] = None,
) -> ProcessPanel:
    """Estimate (U, V, eta, Z, M, W) on every grid node of a path batch.

    The terminal node is pinned exactly (U = V = terminal loss, eta = 0);
    interior nodes come from the least-squares projections.  Entries where
    the density estimate falls below ``Z_FLOOR`` are masked rather than
    imputed, since the assembled ratios are undefined there.
    """
    cfg = cfg or RegressionConfig()
    tokens = cfg.features if cfg.features is not None else _auto_features(loss)
    extras = _running_features(loss, paths, tokens)

    loss_T = terminal_losses(loss, paths)
    cal = solve_c(div, theta, loss_T)
    z_raw = np.asarray(z_of_loss(div, theta, cal.c, loss_T))
    # renormalize in-sample so the calibration residual cannot leak into the
    # downstream ratio identities
    scale = float(z_raw.mean())
    z_T = z_raw / scale
    m_T = conjugate_term(div, z_T)
    w_T = z_T * loss_T

    n_paths, n_nodes = paths.n_paths, paths.grid.n_nodes
    shape = (n_paths, n_nodes)
    U = np.empty(shape)
    V = np.empty(shape)
    Z = np.empty(shape)
    M = np.empty(shape)
    W = np.empty(shape)
    valid = np.ones(shape, dtype=bool)
    warnings: List[str] = []
    r2_z = np.full(n_nodes, np.nan)
    r2_w = np.full(n_nodes, np.nan)
    r2_m = np.full(n_nodes, np.nan)
    se_u = np.full(n_nodes, np.nan)
    se_v = np.full(n_nodes, np.nan)
    n_feat = np.zeros(n_nodes, dtype=int)

    exp_family = div.kl_scale is not None and div.a == -np.inf

    for k in range(n_nodes - 1):
        A = _design(paths, cfg, tokens, extras, k)
        n_feat[k] = A.shape[1]
        if exp_family:
            _fill_node_exponential(
                A, k, loss_T, div, theta, cal.c, scale, cfg, warnings,
                U, V, Z, M, W, valid, r2_z, r2_w, se_u, se_v,
            )
        else:
            _fill_node_direct(
                A, k, z_T, m_T, w_T, div, theta, cal.c, cfg, warnings,
                U, V, Z, M, W, valid, r2_z, r2_w, r2_m,
            )

    # terminal pinning
    last = n_nodes - 1
    Z[:, last] = z_T
    M[:, last] = m_T
    W[:, last] = w_T
    U[:, last] = loss_T
    V[:, last] = loss_T
    n_feat[last] = 0
    eta = theta * (V - U)
    eta[:, last] = 0.0

    masked = float(np.mean(~valid))
    U[~valid] = np.nan
    V[~valid] = np.nan
    eta[~valid] = np.nan

    diag = PanelDiagnostics(
        r2_z=r2_z,
        r2_w=r2_w,
        r2_m=r2_m,
        n_features=n_feat,
        se_u=se_u,
        se_v=se_v,
        masked_fraction=masked,
        estimator="exponential_centered" if exp_family else "direct",
        warnings=warnings,
    )
    return ProcessPanel(
        grid=paths.grid,
        theta=theta,
        divergence=div.name,
        c=cal.c,
        U=U,
        V=V,
        eta=eta,
        Z=Z,
        M=M,
        W=W,
        valid=valid,
        cfg=cfg,
        diagnostics=diag,
    )


def _fill_node_exponential(
    A, k, loss_T, div, theta, c, scale, cfg, warnings,
    U, V, Z, M, W, valid, r2_z, r2_w, se_u, se_v,
):
    d = div.kl_scale
    theta_eff = theta / d
    m = _fit(A, loss_T, cfg.ridge, warnings, k, want_leverage=True)
    resid = loss_T - m.fitted
    exponent = theta_eff * resid
    peak = float(np.max(exponent))
    if peak > 690.0:
        raise FloatingPointError(
            f"residual tilt exponent {peak:.1f} too large at node {k}; "
            "enrich the regression basis or lower theta"
        )
    tilt = np.exp(exponent)
    q = _fit(A, tilt, cfg.ridge, warnings, k, want_leverage=False)
    p = _fit(A, loss_T * tilt, cfg.ridge, warnings, k, want_leverage=False)

    ok = q.fitted > Z_FLOOR
    valid[:, k] &= ok
    q_safe = np.where(ok, q.fitted, 1.0)
    log_z = theta_eff * (m.fitted - c) - 1.0 + np.log(q_safe) - math.log(scale)
    Z[:, k] = np.where(ok, np.exp(log_z), 0.0)
    M[:, k] = d * Z[:, k]
    W[:, k] = np.where(ok, Z[:, k] * p.fitted / q_safe, 0.0)
    U[:, k] = m.fitted + (d / theta) * (np.log(q_safe) - math.log(scale))
    V[:, k] = p.fitted / q_safe
    r2_z[k] = q.r2
    r2_w[k] = p.r2
    # propagated fitted-value standard errors (root mean square over paths);
    # the m- and tilt-fit contributions are summed, which is conservative
    lev = np.sqrt(np.maximum(m.leverage, 0.0))
    band_u = lev * (m.resid_std + q.resid_std / (theta_eff * np.abs(q_safe)))
    band_v = lev * (p.resid_std + np.abs(V[:, k]) * q.resid_std) / np.abs(q_safe)
    se_u[k] = float(np.sqrt(np.mean(band_u[ok] ** 2))) if ok.any() else np.nan
    se_v[k] = float(np.sqrt(np.mean(band_v[ok] ** 2))) if ok.any() else np.nan


def _fill_node_direct(
    A, k, z_T, m_T, w_T, div, theta, c, cfg, warnings,
    U, V, Z, M, W, valid, r2_z, r2_w, r2_m,
):
    fz = _fit(A, z_T, cfg.ridge, warnings, k)
    fm = _fit(A, m_T, cfg.ridge, warnings, k)
    fw = _fit(A, w_T, cfg.ridge, warnings, k)
    z = np.maximum(fz.fitted, 0.0)
    ok = fz.fitted > Z_FLOOR
    valid[:, k] &= ok
    Z[:, k] = z
    M[:, k] = fm.fitted
    W[:, k] = fw.fitted
    z_safe = np.where(ok, z, 1.0)
    U[:, k] = (fm.fitted + div.f(z_safe)) / (theta * z_safe) + c
    V[:, k] = fw.fitted / z_safe
    r2_z[k] = fz.r2
    r2_m[k] = fm.r2
    r2_w[k] = fw.r2


@dataclass
class MartingaleDiagnostics:
    """Increment-regression residuals for the estimated martingale triple.

    ``max_abs_coef[target][k]`` is the largest fitted coefficient when the
    one-step increment of the target is regressed on the node-k basis;
    ``max_t_stat`` normalizes by standard errors that combine the increment
    noise with the panel's own level-fit estimation noise at both nodes
    (the panel values are fitted, so their coefficient noise re-enters the
    increment regression undamped; ignoring it alarms on healthy panels).
    A true martingale panel keeps every t-statistic at noise level.
    """

    nodes: np.ndarray
    max_abs_coef: Dict[str, np.ndarray]
    max_t_stat: Dict[str, np.ndarray]
    dual_value_uniform: float
    dual_value_worst_case: float
    dominance_slack: float
    dominance_ok: bool


def martingale_residual_check(
    panel: ProcessPanel, paths: PathBatch, loss: LossSpec
) -> MartingaleDiagnostics:
    """Regress realized one-step increments of (Z, M, W) on node features.

    Also checks the optimality direction: the penalized dual value of the
    uniform (suboptimal) density must not exceed the worst-case one beyond
    statistical slack.
    """
    cfg = panel.cfg
    tokens = cfg.features if cfg.features is not None else _auto_features(loss)
    extras = _running_features(loss, paths, tokens)
    n_nodes = paths.grid.n_nodes
    targets = {"Z": panel.Z, "M": panel.M, "W": panel.W}
    max_abs = {name: np.zeros(n_nodes - 1) for name in targets}
    max_t = {name: np.zeros(n_nodes - 1) for name in targets}
    scratch: List[str] = []

    for k in range(n_nodes - 1):
        A = _design(paths, cfg, tokens, extras, k)
        gram_diag = np.maximum(np.diag(np.linalg.pinv(A.T @ A)), 0.0)
        for name, arr in targets.items():
            dy = arr[:, k + 1] - arr[:, k]
            fit = _fit(A, dy, 0.0, scratch, k)
            level_k = float(np.std(arr[:, -1] - arr[:, k]))
            level_k1 = float(np.std(arr[:, -1] - arr[:, k + 1]))
            spread = np.sqrt(fit.resid_std**2 + level_k**2 + level_k1**2)
            se = np.sqrt(gram_diag) * spread
            se = np.where(se > 0, se, np.inf)
            max_abs[name][k] = float(np.max(np.abs(fit.coef)))
            max_t[name][k] = float(np.max(np.abs(fit.coef) / se))

    loss_T = terminal_losses(loss, paths)
    n = loss_T.size
    uniform = float(loss_T.mean())  # f(1) = 0, so no penalty term
    worst = float(np.nanmean(panel.U[:, 0]))
    se_uniform = float(loss_T.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    slack = worst + 4.0 * se_uniform + 1e-12 - uniform
    return MartingaleDiagnostics(
        nodes=paths.grid.nodes[:-1],
        max_abs_coef=max_abs,
        max_t_stat=max_t,
        dual_value_uniform=uniform,
        dual_value_worst_case=worst,
        dominance_slack=slack,
        dominance_ok=slack >= 0.0,
    )


@dataclass
class GirsanovReport:
    """Cross-check of the drift-adjusted simulation against reweighting.

    Assumes the tilted density process is a true martingale; the
    exponential-moment condition backing that assumption is not verified
    numerically.
    """

    theta: float
    n_paths: int
    seed: int
    v0_importance: float
    std_err_importance: float
    v0_drift_adjusted: float
    std_err_drift_adjusted: float
    gap: float
    combined_std_err: float
    within_tolerance: bool
    notes: str = (
        "drift adjustment assumes the tilted density is a true martingale "
        "(exponential-moment condition not verified)"
    )


def girsanov_resimulate(
    spec: DiffusionSpec,
    grid: TimeGrid,
    theta: float,
    value_gradient: Callable[[float, np.ndarray], np.ndarray],
    loss: LossSpec,
    n_paths: int,
    seed: int,
) -> GirsanovReport:
    """Simulate under the KL worst-case drift and compare to reweighting.

    The adjusted drift is mu + theta * sigma^2 * grad(U); its plain loss
    average must agree with the importance-weighted estimate from nominal
    paths, which is the same expectation computed two ways.
    """
    nominal = simulate_paths(spec, grid, n_paths, derive_seed(seed, "girsanov-nominal"))
    loss_T = terminal_losses(loss, nominal)
    if theta > 0:
        base = measure_at_zero(loss_T, kl(), theta)
        v0_iw, se_iw = base.V0, base.std_err_V0
    else:
        v0_iw = float(loss_T.mean())
        se_iw = float(loss_T.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0

    def adjusted_drift(t: float, x: np.ndarray) -> np.ndarray:
        mu = np.broadcast_to(np.asarray(spec.drift(t, x), dtype=float), x.shape)
        sig = np.asarray(spec.diffusion(t, x), dtype=float)
        grad = np.broadcast_to(np.asarray(value_gradient(t, x), dtype=float), x.shape)
        if sig.ndim == 3:
            cov = np.einsum("nij,nkj->nik", sig, sig)
            return mu + theta * np.einsum("nik,nk->ni", cov, grad)
        var = np.broadcast_to(sig, x.shape) ** 2
        return mu + theta * var * grad

    tilted_spec = DiffusionSpec(
        dim=spec.dim, drift=adjusted_drift, diffusion=spec.diffusion, x0=spec.x0
    )
    tilted = simulate_paths(
        tilted_spec, grid, n_paths, derive_seed(seed, "girsanov-tilted")
    )
    tilted_loss = terminal_losses(loss, tilted)
    v0_drift = float(tilted_loss.mean())
    se_drift = (
        float(tilted_loss.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    )
    gap = abs(v0_drift - v0_iw)
    combined = math.hypot(se_iw, se_drift)
    return GirsanovReport(
        theta=theta,
        n_paths=n_paths,
        seed=seed,
        v0_importance=v0_iw,
        std_err_importance=se_iw,
        v0_drift_adjusted=v0_drift,
        std_err_drift_adjusted=se_drift,
        gap=gap,
        combined_std_err=combined,
        within_tolerance=gap <= 4.0 * combined + 1e-12,
    )
