"""Stochastic-gradient update rules dissected into sign and variance parts.

The package implements a family of first-order methods built from two
ingredients of the adaptive-moment update, the sign of an averaged gradient
and element-wise variance-adaptation factors, together with the estimators
behind them and the quadratic test-problem machinery used to analyze when
each ingredient helps.
"""

from .core import RngStream, elementwise, erf, gauss_sample
from .estimators import (
    AdaptationFactors,
    EmaState,
    ema_update,
    factor_adam_star,
    factor_curves,
    factor_msvag,
    factor_svag,
    ma_variance_estimate,
    mb_momentum_variance,
    mb_variance_estimate,
    rho,
)
from .optimizers import Method, OptimizerConfig, OptimizerInstance, run
from .problems import (
    LsqClassification,
    NoisyConvexProblem,
    check_sign_proportionality,
    lsq_gradient,
    make_wilson_instance,
    theorem1_experiment,
)
from .records import RunRecord, emit_csv, parse_csv
from .sqp import (
    Figure2Config,
    QuadraticProblem,
    SpectrumSpec,
    build_problem,
    figure2_experiment,
    haar_rotation,
    improvement_sgd,
    improvement_ssd_bound,
    optimal_step,
    p_diag,
    success_probabilities,
)

__version__ = "0.1.0"
