"""Batch front end: TOML run configs in, schema-stable CSV + manifest out.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  All
randomness flows from the single config seed; per-purpose seeds are derived
by labelled hashing, and --threads never changes any output byte.  Files are
written atomically (temp file + rename), and every CSV starts with one
commented timestamp line that determinism checks should skip.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .calibration import CalibrationError
from .divergences import Divergence, DivergenceOverflowError, from_name
from .losses import (
    EvaluationError,
    IntegralFormLoss,
    LossSpec,
    asian_integral,
    running_max,
    terminal_call,
    terminal_identity,
    terminal_losses,
)
from .paths import (
    DiffusionSpec,
    SimulationError,
    TimeGrid,
    abm,
    derive_seed,
    gbm_log,
    simulate_paths,
)
from .pde import (
    PdeError,
    PdeGrid,
    default_pde_grid,
    solve_robust_pde,
)
from .processes import (
    RegressionConfig,
    estimate_conditional_processes,
    martingale_residual_check,
)
from .terminal import feasible_measure_probe, measure_at_zero, theta_sweep

__all__ = ["main", "load_config", "RunConfig", "ConfigError"]

_NUMERICAL_ERRORS = (
    CalibrationError,
    PdeError,
    SimulationError,
    EvaluationError,
    DivergenceOverflowError,
    FloatingPointError,
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    digest: str
    seed: int
    mode: str  # "simulation" | "atoms"
    divergence: Divergence
    loss: LossSpec
    loss_name: str
    pde_loss: Optional[IntegralFormLoss]
    theta_value: Optional[float]
    theta_values: Optional[List[float]]
    model: Optional[DiffusionSpec] = None
    model_name: str = ""
    grid: Optional[TimeGrid] = None
    n_paths: int = 0
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    pde_grid: Optional[PdeGrid] = None
    atom_values: Optional[np.ndarray] = None
    atom_probs: Optional[np.ndarray] = None
    probe_trials: int = 200


def _need(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"[{section}] is missing required key {key!r}")
    return table[key]


def _build_loss(
    table: dict, horizon: Optional[float]
) -> Tuple[LossSpec, Optional[IntegralFormLoss], str]:
    name = _need(table, "name", "loss")
    if name == "terminal_identity":
        return terminal_identity(), IntegralFormLoss(h0=lambda t, x: x), name
    if name == "terminal_call":
        strike = float(_need(table, "strike", "loss"))
        pde = IntegralFormLoss(h0=lambda t, x: np.maximum(x - strike, 0.0))
        return terminal_call(strike), pde, f"terminal_call({strike:g})"
    if name == "asian_integral":
        if horizon is None:
            raise ConfigError("asian_integral needs a [grid] horizon")
        loss = asian_integral(horizon)
        return loss, loss, name
    if name == "running_max":
        return running_max(), None, name
    raise ConfigError(f"unknown loss name {name!r}")


def load_config(path: Path, seed_override: Optional[int] = None) -> RunConfig:
    """Parse and validate a run configuration file."""
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    digest = hashlib.sha256(raw).hexdigest()

    div_tab = doc.get("divergence", {"name": "kl"})
    divergence = _parse_divergence(div_tab)

    theta_tab = doc.get("theta")
    if theta_tab is None:
        raise ConfigError("missing [theta] section")
    theta_value = theta_tab.get("value")
    theta_values = theta_tab.get("values")
    if theta_value is None and not theta_values:
        raise ConfigError("[theta] needs 'value' or a non-empty 'values' list")
    if theta_value is not None:
        theta_value = float(theta_value)
        if theta_value <= 0:
            raise ConfigError("theta must be positive")
    if theta_values is not None:
        theta_values = [float(t) for t in theta_values]
        if not theta_values:
            raise ConfigError("[theta] values list is empty")
        if any(t <= 0 for t in theta_values):
            raise ConfigError("theta values must be positive")
        if any(b <= a for a, b in zip(theta_values, theta_values[1:])):
            raise ConfigError("theta values must be strictly ascending")

    horizon = doc.get("grid", {}).get("t_end")
    loss, pde_loss, loss_name = _build_loss(
        doc.get("loss", {"name": "terminal_identity"}),
        float(horizon) if horizon is not None else None,
    )

    cfg = RunConfig(
        digest=digest,
        seed=0,
        mode="",
        divergence=divergence,
        loss=loss,
        loss_name=loss_name,
        pde_loss=pde_loss,
        theta_value=theta_value,
        theta_values=theta_values,
        probe_trials=int(doc.get("probe", {}).get("n_trials", 200)),
    )

    if "atoms" in doc:
        atoms = doc["atoms"]
        values = np.asarray(_need(atoms, "values", "atoms"), dtype=float)
        if values.size == 0:
            raise ConfigError("[atoms] values must be non-empty")
        probs = atoms.get("probs")
        if probs is not None:
            probs = np.asarray(probs, dtype=float)
            if probs.shape != values.shape:
                raise ConfigError("[atoms] probs must match values in length")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
                raise ConfigError("[atoms] probs must be nonnegative and sum to 1")
            probs = probs / probs.sum()
        cfg.mode = "atoms"
        cfg.atom_values = values
        cfg.atom_probs = probs
        cfg.seed = int(atoms.get("seed", 0))
    else:
        model_tab = doc.get("model")
        grid_tab = doc.get("grid")
        mc_tab = doc.get("mc")
        if not (model_tab and grid_tab and mc_tab):
            raise ConfigError(
                "need [model], [grid] and [mc] sections (or [atoms] for "
                "discrete losses)"
            )
        cfg.mode = "simulation"
        cfg.model, cfg.model_name = _parse_model(model_tab)
        t_end = float(_need(grid_tab, "t_end", "grid"))
        n_steps = int(_need(grid_tab, "n_steps", "grid"))
        if t_end <= 0:
            raise ConfigError("grid t_end must be positive")
        if n_steps < 1:
            raise ConfigError("grid n_steps must be >= 1")
        cfg.grid = TimeGrid(t_end=t_end, n_steps=n_steps)
        cfg.n_paths = int(_need(mc_tab, "n_paths", "mc"))
        if cfg.n_paths < 1:
            raise ConfigError("mc n_paths must be >= 1")
        cfg.seed = int(_need(mc_tab, "seed", "mc"))

        reg = doc.get("regression", {})
        try:
            cfg.regression = RegressionConfig(
                degree=int(reg.get("degree", 2)),
                ridge=float(reg.get("ridge", 0.0)),
                features=tuple(reg["features"]) if "features" in reg else None,
            )
        except ValueError as exc:
            raise ConfigError(f"[regression]: {exc}") from exc

        if "pde" in doc:
            pde_tab = doc["pde"]
            try:
                cfg.pde_grid = PdeGrid(
                    x_min=float(_need(pde_tab, "x_min", "pde")),
                    x_max=float(_need(pde_tab, "x_max", "pde")),
                    n_x=int(pde_tab.get("n_x", 200)),
                    n_t=int(pde_tab.get("n_t", 200)),
                    advection=pde_tab.get("advection", "auto"),
                )
            except ValueError as exc:
                raise ConfigError(f"[pde]: {exc}") from exc

    if seed_override is not None:
        cfg.seed = int(seed_override)
    return cfg


def _parse_divergence(table: dict) -> Divergence:
    name = _need(table, "name", "divergence")
    try:
        if name == "scaled_kl":
            return from_name(name, d=float(_need(table, "d", "divergence")))
        return from_name(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_model(table: dict) -> Tuple[DiffusionSpec, str]:
    name = _need(table, "name", "model")
    mu = float(table.get("mu", 0.0))
    sigma = float(table.get("sigma", 0.0))
    x0 = float(table.get("x0", 0.0))
    if sigma < 0:
        raise ConfigError("model sigma must be >= 0")
    if name == "abm":
        return abm(mu, sigma, x0), name
    if name == "gbm_log":
        return gbm_log(mu, sigma, x0), name
    raise ConfigError(
        f"unknown model name {name!r} (custom coefficients are API-only)"
    )


# ---------------------------------------------------------------------------
# output plumbing


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(path: Path, command: str, header: Sequence[str],
         rows: Sequence[Sequence]) -> None:
    stamp = datetime.now(timezone.utc).isoformat()
    lines = [f"# robustrisk {command} {stamp}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _write_atomic(path, "\n".join(lines) + "\n")


def _versions() -> Dict[str, str]:
    import platform

    import scipy

    return {
        "robustrisk": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


@dataclass
class ResultManifest:
    command: str
    config_digest: str
    seed: int
    created_utc: str
    versions: Dict[str, str]
    outputs: List[str]
    headline: List[Dict[str, float]]

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest_{self.command}.json"
        _write_atomic(
            path,
            json.dumps(
                {
                    "command": self.command,
                    "config_digest": self.config_digest,
                    "seed": self.seed,
                    "created_utc": self.created_utc,
                    "versions": self.versions,
                    "outputs": self.outputs,
                    "headline": self.headline,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
        )
        return path


def _manifest(command: str, cfg: RunConfig, outputs: List[str],
              headline: List[Dict[str, float]]) -> ResultManifest:
    return ResultManifest(
        command=command,
        config_digest=cfg.digest,
        seed=cfg.seed,
        created_utc=datetime.now(timezone.utc).isoformat(),
        versions=_versions(),
        outputs=outputs,
        headline=headline,
    )


def _headline_row(result) -> Dict[str, float]:
    return {
        "theta": result.theta,
        "c": result.c,
        "U0": result.U0,
        "V0": result.V0,
        "eta0": result.eta0,
    }


_MEASURE_COLUMNS = (
    "theta", "c", "U0", "V0", "eta0", "nominal", "std_err_V0", "n_samples",
)


def _measure_row(r) -> tuple:
    return (r.theta, r.c, r.U0, r.V0, r.eta0, r.nominal, r.std_err_V0, r.n_samples)


def _config_losses(cfg: RunConfig, threads: int):
    """Terminal-loss sample (or atoms) described by the config."""
    if cfg.mode == "atoms":
        return cfg.atom_values, cfg.atom_probs, None
    batch = simulate_paths(
        cfg.model, cfg.grid, cfg.n_paths, derive_seed(cfg.seed, "paths"),
        n_threads=threads,
    )
    return terminal_losses(cfg.loss, batch), None, batch


def _single_theta(cfg: RunConfig) -> float:
    if cfg.theta_value is not None:
        return cfg.theta_value
    if cfg.theta_values and len(cfg.theta_values) == 1:
        return cfg.theta_values[0]
    raise ConfigError("this command needs a single theta ([theta] value)")


def cmd_measure(cfg: RunConfig, out_dir: Path, threads: int) -> ResultManifest:
    theta = _single_theta(cfg)
    losses, probs, _ = _config_losses(cfg, threads)
    result = measure_at_zero(losses, cfg.divergence, theta, probs=probs)
    probe = feasible_measure_probe(
        losses, cfg.divergence, theta, n_trials=cfg.probe_trials,
        seed=derive_seed(cfg.seed, "probe"), probs=probs,
    )
    path = out_dir / "measure.csv"
    _csv(path, "measure", _MEASURE_COLUMNS, [_measure_row(result)])
    manifest = _manifest("measure", cfg, [path.name], [_headline_row(result)])
    if probe.violations:
        manifest.headline[0]["probe_violations"] = float(len(probe.violations))
    return manifest


def cmd_sweep(cfg: RunConfig, out_dir: Path, threads: int) -> ResultManifest:
    if not cfg.theta_values:
        raise ConfigError("sweep needs [theta] values")
    losses, probs, _ = _config_losses(cfg, threads)
    results = theta_sweep(losses, cfg.divergence, cfg.theta_values, probs=probs)
    path = out_dir / "sweep.csv"
    _csv(path, "sweep", _MEASURE_COLUMNS, [_measure_row(r) for r in results])
    return _manifest("sweep", cfg, [path.name], [_headline_row(r) for r in results])


def cmd_process(cfg: RunConfig, out_dir: Path, threads: int) -> ResultManifest:
    if cfg.mode != "simulation":
        raise ConfigError("process needs a simulation config, not atoms")
    theta = _single_theta(cfg)
    batch = simulate_paths(
        cfg.model, cfg.grid, cfg.n_paths, derive_seed(cfg.seed, "paths"),
        n_threads=threads,
    )
    panel = estimate_conditional_processes(
        batch, cfg.loss, cfg.divergence, theta, cfg.regression
    )
    mart = martingale_residual_check(panel, batch, cfg.loss)

    nodes = cfg.grid.nodes
    rows = []
    for i in range(batch.n_paths):
        for k in range(cfg.grid.n_nodes):
            rows.append(
                (i, k, nodes[k], panel.U[i, k], panel.V[i, k],
                 panel.eta[i, k], panel.Z[i, k])
            )
    panel_path = out_dir / "panel.csv"
    _csv(panel_path, "process",
         ("path_id", "node_index", "t", "U", "V", "eta", "Z"), rows)

    diag_rows = []
    diag = panel.diagnostics
    for k in range(cfg.grid.n_nodes):
        if k < cfg.grid.n_nodes - 1:
            tz = mart.max_t_stat["Z"][k]
            tm = mart.max_t_stat["M"][k]
            tw = mart.max_t_stat["W"][k]
        else:
            tz = tm = tw = float("nan")
        diag_rows.append(
            (k, nodes[k], diag.r2_z[k], diag.r2_w[k], tz, tm, tw,
             float(np.mean(~panel.valid[:, k])))
        )
    diag_path = out_dir / "diagnostics.csv"
    _csv(diag_path, "process",
         ("node_index", "t", "r2_z", "r2_w", "mart_t_z", "mart_t_m",
          "mart_t_w", "masked_fraction"),
         diag_rows)

    node0 = {
        "theta": theta,
        "c": panel.c,
        "U0": float(np.nanmean(panel.U[:, 0])),
        "V0": float(np.nanmean(panel.V[:, 0])),
        "eta0": float(np.nanmean(panel.eta[:, 0])),
        "dominance_ok": float(mart.dominance_ok),
    }
    return _manifest("process", cfg, [panel_path.name, diag_path.name], [node0])


def cmd_pde(cfg: RunConfig, out_dir: Path, threads: int) -> ResultManifest:
    if cfg.mode != "simulation":
        raise ConfigError("pde needs a simulation config, not atoms")
    if cfg.pde_loss is None:
        raise ConfigError(
            f"loss {cfg.loss_name!r} has no integral form; the PDE route "
            "does not support it"
        )
    if cfg.divergence.kl_scale != 1.0:
        raise ConfigError("the PDE route supports the KL divergence only")
    theta = _single_theta(cfg)
    grid = cfg.pde_grid or default_pde_grid(cfg.model, cfg.grid.t_end)
    solution = solve_robust_pde(cfg.model, cfg.pde_loss, theta, grid, cfg.grid.t_end)

    x0 = float(cfg.model.x0[0])
    u0 = solution.u_at(0.0, x0)
    v0 = solution.v_at(0.0, x0)
    eta0 = theta * (v0 - u0)

    losses, probs, _ = _config_losses(cfg, threads)
    mc = measure_at_zero(losses, cfg.divergence, theta, probs=probs)

    u_path, v_path = out_dir / "pde_u.csv", out_dir / "pde_v.csv"
    rows_u, rows_v = [], []
    for ti, t in enumerate(solution.t):
        for xi, xv in enumerate(solution.x):
            rows_u.append((t, xv, solution.u[ti, xi]))
            rows_v.append((t, xv, solution.v[ti, xi]))
    _csv(u_path, "pde", ("t", "x", "u"), rows_u)
    _csv(v_path, "pde", ("t", "x", "v"), rows_v)

    gap_path = out_dir / "pde_vs_mc.csv"
    _csv(
        gap_path, "pde",
        ("quantity", "pde_value", "mc_value", "abs_gap", "mc_std_err"),
        [
            ("U0", u0, mc.U0, abs(u0 - mc.U0), mc.std_err_U0),
            ("V0", v0, mc.V0, abs(v0 - mc.V0), mc.std_err_V0),
            ("eta0", eta0, mc.eta0, abs(eta0 - mc.eta0), mc.std_err_eta0),
        ],
    )
    headline = [{"theta": theta, "c": mc.c, "U0": u0, "V0": v0, "eta0": eta0}]
    return _manifest(
        "pde", cfg, [u_path.name, v_path.name, gap_path.name], headline
    )


def _run(command: str, cfg: RunConfig, out_dir: Path, threads: int) -> List[ResultManifest]:
    if command == "measure":
        return [cmd_measure(cfg, out_dir, threads)]
    if command == "sweep":
        return [cmd_sweep(cfg, out_dir, threads)]
    if command == "process":
        return [cmd_process(cfg, out_dir, threads)]
    if command == "pde":
        return [cmd_pde(cfg, out_dir, threads)]
    if command == "all":
        manifests = []
        if cfg.theta_value is not None or len(cfg.theta_values or []) == 1:
            manifests.append(cmd_measure(cfg, out_dir, threads))
        if cfg.theta_values:
            manifests.append(cmd_sweep(cfg, out_dir, threads))
        if cfg.mode == "simulation":
            manifests.append(cmd_process(cfg, out_dir, threads))
            if cfg.pde_loss is not None and cfg.divergence.kl_scale == 1.0:
                manifests.append(cmd_pde(cfg, out_dir, threads))
        return manifests
    raise ConfigError(f"unknown command {command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="robustrisk",
        description="Worst-case loss measurement under divergence ambiguity",
    )
    parser.add_argument("command", choices=["measure", "sweep", "process", "pde", "all"])
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (speed only, never results)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, seed_override=args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        manifests = _run(args.command, cfg, args.out, max(args.threads, 1))
        for man in manifests:
            man.write(args.out)
            for row in man.headline:
                summary = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(row.items()))
                print(f"{man.command}: {summary}")
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
