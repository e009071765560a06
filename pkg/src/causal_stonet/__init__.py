"""Sparse stochastic neural networks for doubly robust causal inference.

A feedforward network whose hidden pre-activations are latent Gaussian
variables and whose designated hidden unit is the observed binary treatment.
Training alternates SGHMC imputation of the latents with stochastic-
approximation parameter updates under a spike-and-slab prior, yielding
covariate selection, propensity and outcome estimates, doubly robust
treatment-effect estimates with confidence intervals, and missing-covariate
imputation.  Synthetic benchmark generators and evaluation metrics are
included under :mod:`causal_stonet.simlab`.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, TrainValTest, Truth, read_csv, write_csv
from .errors import (
    CausalStonetError,
    ConfigurationError,
    DataError,
    NumericError,
    ShapeError,
)
from .estimators import (
    AteEstimate,
    SelectionReport,
    aipw_ate,
    cate,
    confidence_interval,
    estimate_ate,
    format_estimate_report,
    outcome,
    propensity,
    selected_covariates,
    variance_estimate,
)
from .network import (
    ForwardResult,
    LatentState,
    NetworkConfig,
    NetworkParameters,
    SparsityMask,
    complete_data_log_likelihood,
    dnn_forward,
    grad_latents,
    grad_params,
    layer_log_density,
)
from .prior import (
    PriorHyperparameters,
    build_mask,
    grad_log_prior,
    log_prior,
    slab_responsibility,
    sparsify_threshold,
)
from .simlab import (
    MetricsReport,
    ar2_precision,
    ci_coverage,
    fsr_nsr,
    gen_ar2_missing,
    gen_linear_gaussian,
    gen_varying_size,
    mae_ate,
    pehe,
)
from .training import (
    CovariateModel,
    FittedModel,
    TailSnapshot,
    TrainingSchedule,
    backward_impute,
    bic_score,
    lr_schedule,
    posterior_average,
    sa_update,
    train,
)

__version__ = "0.1.0"
