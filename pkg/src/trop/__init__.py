"""Panel causal inference with triply robust estimation.

Estimate average effects on the treated in balanced panels by combining
exponential-decay unit and time weights with a nuclear-norm-regularized
factor adjustment, all tuned by leave-one-out cross validation; compare
against DID, SC, DIFP, SDID, and MC; calibrate semi-synthetic placebo
studies from any seed panel; and bootstrap standard errors.
"""

from .baselines import CounterfactualGrid, did, mc, sc, sdid
from .diagnostics import (
    DiagnosticReport,
    diagnostic_report,
    factor_gain,
    split_half_fe_test,
    weight_concentration,
)
from .errors import TropError
from .estimator import (
    AttResult,
    TuningGrid,
    default_grid,
    estimate_att,
    estimate_cell,
    estimate_cell_with_covariates,
    loocv_q,
    tune,
)
from .inference import BootstrapResult, bootstrap_variance
from .panel import (
    BlockAssignment,
    Panel,
    detect_block,
    load_panel,
    normalize_outcomes,
    save_panel,
)
from .simlab import (
    DgpSpec,
    SimReport,
    ablate,
    calibrate,
    generate,
    run_study,
    sweep,
)
from .theory import (
    BiasReport,
    FactorGroundTruth,
    balancing_counterfactual,
    bias_formulas,
    covariate_bias_check,
    noise_decomposition,
    rank_one_mask,
    triple_robustness_check,
)
from .weights import CellWeights, TuningTriple, cell_weights, normalize_to_simplex

__version__ = "0.1.0"
