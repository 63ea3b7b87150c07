"""Doubly weighted M-estimation of treatment effects with missing outcomes."""

from .binary import (
    BinaryFit,
    MultinomialFit,
    fit_binary_response,
    fit_missingness,
    fit_multinomial_propensity,
    fit_propensity,
)
from .data import Dataset, load_csv, save_csv, split_by_arm, summary_stats
from .effects import (
    EffectEstimate,
    RifConfig,
    arm_contrast_multivalued,
    ate_pooled,
    ate_separate,
    cqte,
    lp_cqte,
    uqte_direct,
    uqte_rif,
)
from .errors import (
    ConfigError,
    ConsistencyError,
    ConvergenceError,
    DensityInstabilityError,
    DwmestError,
    EstimationInfeasibleError,
    MissingOutcomeError,
    RankError,
    ReliabilityError,
    SchemaError,
    SeparationError,
)
from .inference import (
    VarianceEstimate,
    ate_variance,
    efficiency_report,
    pairs_bootstrap,
    sandwich_theta,
)
from .simulation import (
    McResult,
    Population,
    ScenarioConfig,
    draw_sample,
    generate_population,
    run_scenario,
)
from .solvers import (
    MEstimateFit,
    ObjectiveKind,
    StackedFit,
    solve_stacked_gmm,
    solve_weighted_binary_qmle,
    solve_weighted_glm,
    solve_weighted_ls,
    solve_weighted_qr,
    weighted_quantile,
)
from .weights import WeightSet, compute_weights, trim, weights_from_probabilities

__version__ = "0.1.0"
