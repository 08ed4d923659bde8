"""Worst-case expected loss and divergence budgets under model uncertainty.

The package measures how bad a path-dependent loss can get when the model
generating the paths is only trusted up to a divergence ball, and what
divergence budget the adversary spends to get there.  Two independent
computational routes are provided: reweighted Monte Carlo with
regression-based conditional processes, and a finite-difference solver for
one-dimensional Markov models.
"""

from .calibration import CalibrationError, CalibrationResult, normalization_K, solve_c
from .divergences import (
    Divergence,
    DivergenceOverflowError,
    chi_squared,
    conjugate_term,
    divergence_of_weights,
    from_name,
    kl,
    scaled_kl,
    validate_divergence,
    z_of_loss,
)
from .losses import (
    CustomFoldLoss,
    EvaluationError,
    IntegralFormLoss,
    RunningMaxLoss,
    TerminalLoss,
    asian_integral,
    evaluate_running,
    evaluate_terminal,
    integral_prefix,
    running_losses,
    running_max,
    terminal_call,
    terminal_identity,
    terminal_losses,
)
from .paths import (
    DiffusionSpec,
    PathBatch,
    SimulationError,
    TimeGrid,
    abm,
    brownian_increments,
    derive_seed,
    gbm_log,
    simulate_paths,
)
from .pde import (
    PdeError,
    PdeGrid,
    PdeSolution,
    assemble_processes,
    default_pde_grid,
    solve_robust_pde,
    solve_value_pde,
    solve_worst_case_pde,
    value_gradient_from_solution,
)
from .processes import (
    GirsanovReport,
    MartingaleDiagnostics,
    ProcessPanel,
    RegressionConfig,
    estimate_conditional_processes,
    girsanov_resimulate,
    martingale_residual_check,
)
from .terminal import (
    ProbeReport,
    RobustResult,
    feasible_measure_probe,
    measure_at_zero,
    theta_sweep,
    worst_case_weights,
)

__version__ = "0.1.0"
