"""Simulation and quadrature toolkit for strict local martingales built from
reciprocals of harmonic functions, their Föllmer measures, and their
projections onto smaller filtrations.
"""

from .decomposition import (
    DecompositionRecord,
    SingularityProxy,
    compensator_check,
    extract_lambda,
    ito_tanaka_residual,
    lambda_support_stats,
    ndec_factor_check,
    singularity_proxy,
)
from .harness import ConfigError, ExperimentConfig, REGISTRY, ResultRow, RunSummary, run_all, run_experiment
from .kernels import (
    BoundednessReport,
    ConditionalGaussian,
    LinearShrinkage,
    check_lbm1,
    check_lbm2,
    check_scaling,
    counterexample_lower_bound,
    example1_shrinkage,
    example2_bound,
    example2_shrinkage,
    f_counterexample,
    f_example1,
    f_example2,
    folded_normal_mean,
    gaussian_condition,
    mills_ratio,
    schur_condition,
    u_kernel,
    u_kernel_dx,
)
from .measures import (
    McEstimate,
    MeasureTag,
    NoJumpReport,
    density_identity_check,
    mass_loss,
    no_jump_to_infinity_check,
    radius_martingale_check,
    survival_q,
)
from .models import (
    HarmonicReciprocalModel,
    InverseDistanceTerms,
    ModelDomainError,
    check_harmonic,
    counterexample_bessel4,
    embedded_bessel4,
    inverse_bessel3,
    inverse_distance,
    model_from_label,
    superpose,
)
from .stochastics import (
    LocalTimePath,
    QEnsemble,
    RngStream,
    SamplePath,
    StopReason,
    TimeGrid,
    gaussian_endpoints,
    local_time_occupation,
    local_time_tanaka,
    sample_brownian_path,
    sample_brownian_paths,
    simulate_q_ensemble,
    simulate_q_path,
    simulate_q_paths,
    stochastic_integral,
)

__version__ = "0.1.0"
