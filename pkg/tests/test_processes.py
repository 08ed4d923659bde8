import dataclasses

import numpy as np
import pytest

from robustrisk import (
    RegressionConfig,
    TerminalLoss,
    TimeGrid,
    abm,
    chi_squared,
    estimate_conditional_processes,
    gbm_log,
    girsanov_resimulate,
    kl,
    martingale_residual_check,
    measure_at_zero,
    simulate_paths,
    terminal_identity,
    terminal_losses,
)

SIGMA, THETA, T = 0.2, 1.0, 1.0


@pytest.fixture(scope="module")
def gaussian_setup():
    grid = TimeGrid(T, 25)
    batch = simulate_paths(abm(0.0, SIGMA), grid, n_paths=50_000, seed=2024)
    cfg = RegressionConfig(degree=1)
    panel = estimate_conditional_processes(
        batch, terminal_identity(), kl(), THETA, cfg
    )
    return grid, batch, panel


def test_constant_loss_panel_is_exact():
    grid = TimeGrid(T, 6)
    batch = simulate_paths(abm(0.0, SIGMA), grid, n_paths=500, seed=3)
    loss = TerminalLoss(phi=lambda x: np.full_like(x, 1.7))
    for div in (kl(), chi_squared()):
        panel = estimate_conditional_processes(batch, loss, div, THETA)
        assert np.allclose(panel.Z, 1.0, atol=1e-10)
        assert np.allclose(panel.U, 1.7, atol=1e-10)
        assert np.allclose(panel.V, 1.7, atol=1e-10)
        assert np.allclose(panel.eta, 0.0, atol=1e-10)
        assert panel.diagnostics.masked_fraction == 0.0


def test_terminal_pinning_exact(gaussian_setup):
    _, batch, panel = gaussian_setup
    loss_T = terminal_losses(terminal_identity(), batch)
    assert np.array_equal(panel.U[:, -1], loss_T)
    assert np.array_equal(panel.V[:, -1], loss_T)
    assert np.all(panel.eta[:, -1] == 0.0)


def test_gaussian_conditional_processes_match_closed_form(gaussian_setup):
    # conditional tilting of the remaining N(0, sigma^2 (T-t)) increment:
    # U(t) = X + theta sigma^2 (T-t)/2, V(t) = X + theta sigma^2 (T-t)
    grid, batch, panel = gaussian_setup
    x = batch.series(0)
    diag = panel.diagnostics
    assert diag.estimator == "exponential_centered"
    for k, t in enumerate(grid.nodes[:-1]):
        tau = T - t
        u_true = x[:, k] + THETA * SIGMA**2 * tau / 2.0
        v_true = x[:, k] + THETA * SIGMA**2 * tau
        rms_u = float(np.sqrt(np.mean((panel.U[:, k] - u_true) ** 2)))
        rms_v = float(np.sqrt(np.mean((panel.V[:, k] - v_true) ** 2)))
        assert rms_u <= 3.0 * diag.se_u[k], f"node {k}: {rms_u} vs {diag.se_u[k]}"
        assert rms_v <= 3.0 * diag.se_v[k], f"node {k}: {rms_v} vs {diag.se_v[k]}"


def test_eta_identity_and_nonnegativity(gaussian_setup):
    grid, batch, panel = gaussian_setup
    assert np.allclose(panel.eta, THETA * (panel.V - panel.U), atol=1e-12)
    # eta is a conditional divergence: true value theta^2 sigma^2 (T-t)/2 > 0
    n = batch.n_paths
    for k in range(grid.n_nodes - 1):
        se = panel.eta[:, k].std(ddof=1) / np.sqrt(n)
        assert panel.eta[:, k].mean() >= -4.0 * se


def test_tower_property_of_panel(gaussian_setup):
    grid, batch, panel = gaussian_setup
    n = batch.n_paths
    w_T = panel.W[:, -1]
    for k in range(grid.n_nodes):
        se_z = panel.Z[:, k].std(ddof=1) / np.sqrt(n)
        assert abs(panel.Z[:, k].mean() - 1.0) <= 4.0 * max(se_z, 1e-12)
        se_w = (panel.W[:, k] - w_T).std(ddof=1) / np.sqrt(n)
        assert abs(panel.W[:, k].mean() - w_T.mean()) <= 4.0 * max(se_w, 1e-12)


def test_kl_panel_never_masks(gaussian_setup):
    _, _, panel = gaussian_setup
    assert panel.diagnostics.masked_fraction == 0.0
    assert np.all(panel.valid)
    assert np.all(panel.Z >= 0.0)


def test_martingale_residuals_noise_level(gaussian_setup):
    grid, batch, panel = gaussian_setup
    diag = martingale_residual_check(panel, batch, terminal_identity())
    for name in ("Z", "M", "W"):
        assert np.all(diag.max_t_stat[name] <= 4.0), (
            name, diag.max_t_stat[name].max()
        )
    assert diag.dominance_ok
    assert diag.dual_value_uniform <= diag.dual_value_worst_case + 1e-10 \
        + 4.0 * terminal_losses(terminal_identity(), batch).std() / np.sqrt(batch.n_paths)


def test_corrupted_panel_trips_negative_control(gaussian_setup):
    grid, batch, panel = gaussian_setup
    bad_Z = panel.Z.copy()
    node = grid.n_nodes // 2
    bad_Z[:, node] += 0.1
    corrupted = dataclasses.replace(panel, Z=bad_Z)
    diag = martingale_residual_check(corrupted, batch, terminal_identity())
    assert diag.max_t_stat["Z"][node] > 4.0
    assert diag.max_t_stat["Z"][node - 1] > 4.0


def test_two_node_panel_matches_measure_at_zero():
    grid = TimeGrid(T, 1)
    batch = simulate_paths(abm(0.0, SIGMA), grid, n_paths=20_000, seed=77)
    loss_T = terminal_losses(terminal_identity(), batch)
    for div in (kl(), chi_squared()):
        panel = estimate_conditional_processes(
            batch, terminal_identity(), div, THETA
        )
        res = measure_at_zero(loss_T, div, THETA)
        # regression onto constants collapses to sample means
        assert np.allclose(panel.U[:, 0], res.U0, rtol=1e-11, atol=1e-13)
        assert np.allclose(panel.V[:, 0], res.V0, rtol=1e-11, atol=1e-13)
        assert np.allclose(panel.eta[:, 0], res.eta0, rtol=1e-10, atol=1e-12)


def test_generic_route_chi2_panel_invariants():
    grid = TimeGrid(T, 8)
    batch = simulate_paths(abm(0.0, SIGMA), grid, n_paths=20_000, seed=55)
    panel = estimate_conditional_processes(
        batch, terminal_identity(), chi_squared(), THETA, RegressionConfig(degree=2)
    )
    assert panel.diagnostics.estimator == "direct"
    ok = panel.valid
    assert np.allclose(
        panel.eta[ok], THETA * (panel.V - panel.U)[ok], atol=1e-12
    )
    assert np.all(panel.Z >= 0.0)
    # chi2 truncates: masked entries are flagged, never imputed
    assert np.isnan(panel.U[~ok]).all()
    n = batch.n_paths
    for k in range(grid.n_nodes):
        se_z = panel.Z[:, k].std(ddof=1) / np.sqrt(n)
        assert abs(panel.Z[:, k].mean() - 1.0) <= 4.0 * max(se_z, 1e-12)


def test_girsanov_abm_matches_adjusted_drift_mean():
    # gradient of the value surface is 1, so the worst-case drift is
    # mu + theta sigma^2 and E X_T = (mu + theta sigma^2) T
    mu = 0.05
    spec = abm(mu, SIGMA)
    grid = TimeGrid(T, 100)
    report = girsanov_resimulate(
        spec, grid, THETA, lambda t, x: 1.0, terminal_identity(),
        n_paths=40_000, seed=11,
    )
    assert report.within_tolerance
    target = (mu + THETA * SIGMA**2) * T
    assert abs(report.v0_drift_adjusted - target) <= 4.0 * report.std_err_drift_adjusted
    assert abs(report.v0_importance - target) <= 4.0 * report.std_err_importance
    assert "martingale" in report.notes


def test_girsanov_zero_theta_recovers_nominal():
    spec = abm(0.03, SIGMA)
    grid = TimeGrid(T, 50)
    report = girsanov_resimulate(
        spec, grid, 0.0, lambda t, x: 123.0, terminal_identity(),
        n_paths=20_000, seed=4,
    )
    assert report.within_tolerance
    assert abs(report.v0_drift_adjusted - 0.03 * T) <= 4.0 * report.std_err_drift_adjusted


def test_girsanov_gbm_log_state_self_consistency():
    # log-state GBM with identity loss on the log: gradient still 1
    spec = gbm_log(0.05, 0.25, x0_log=0.0)
    grid = TimeGrid(T, 100)
    report = girsanov_resimulate(
        spec, grid, 0.8, lambda t, x: 1.0, terminal_identity(),
        n_paths=40_000, seed=19,
    )
    assert report.within_tolerance


def test_regression_config_validation():
    with pytest.raises(ValueError):
        RegressionConfig(degree=-1)
    with pytest.raises(ValueError):
        RegressionConfig(ridge=-0.5)
    with pytest.raises(ValueError):
        RegressionConfig(features=("state", "bogus"))
