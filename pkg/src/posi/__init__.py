"""Bayesian inference after model selection with the randomized Group LASSO.

The pipeline: solve the randomized group-sparse selection problem, freeze the
selection event, build the surrogate selection-informed posterior, sample it
with a preconditioned Langevin chain, and report credible intervals for the
selected coefficients and group functionals, alongside naive and
data-splitting baselines.
"""

__version__ = "0.1.0"

from .adjust import (
    AdjustmentParams,
    bar_parameters,
    build_adjustment,
    conditional_parameters,
    jacobian_grad,
    log_jacobian,
    orthonormal_completion,
    selection_maps,
)
from .baselines import BaselineFit, SplitConfig, naive_inference, split_inference
from .groupsolve import (
    SolveOptions,
    augment_for_overlap,
    check_stationarity,
    freeze_selection,
    selected_columns,
    solve,
    standardize_groups,
)
from .model import (
    ConfigError,
    Dataset,
    EmptySelectionError,
    GroupStructure,
    NumericalError,
    PosiError,
    RandomizationConfig,
    SelectionRecord,
    draw_randomization,
    effective_sigma,
    load_dataset,
    parse_groups,
    save_dataset,
)
from .posterior import (
    GaussianPrior,
    InnerSolution,
    McAdjustment,
    PosteriorSpec,
    adjustment_mc_oracle,
    grad_log_posterior,
    log_posterior,
    solve_inner,
)
from .sampler import (
    Chain,
    ChainConfig,
    IntervalReport,
    IntervalRow,
    credible_intervals,
    functional_intervals,
    run_chain,
    write_chain_csv,
)
from .simlab import (
    MetricsRow,
    ScenarioConfig,
    generate_instance,
    penalty_weights,
    run_experiment,
)
