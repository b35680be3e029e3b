"""Low-rank adaptation of linearized models: training, convex baselines,
rank reduction, landscape certificates and generalization checks."""

from .model import (
    BlockShape,
    FeatureMap,
    LinearizedDataset,
    LinearizedSample,
    LoraFactors,
    LossKind,
    PsdPerturbation,
    assemble_S,
    dual_weights,
    empirical_risk,
    factored_risk,
    grad_factored,
    hessian_factored,
    hessian_vector_product,
    nuclear_norm,
    predict,
    random_dataset,
    regularized_risk,
)
from .optim import InitScheme, TrainConfig, TrainTrace, init_factors, rank_threshold, sample_psd_perturbation, train
from .prox import ProxConfig, ProxResult, global_min_value, prox_gradient, solve_global, svt
from .reduction import (
    FeatureOperator,
    PsdLift,
    boundary_step,
    extract_offdiag,
    lift_to_psd,
    null_direction,
    rank_reduce,
)
from .landscape import (
    MultistartReport,
    SospCertificate,
    Verdict,
    multistart,
    rank_of_factors,
    sosp_certificate,
    toy_instance,
    toy_rank1_floor,
)
from .generalization import (
    BoundSpec,
    SyntheticTask,
    excess_risk_bound,
    lambda_from_bound,
    monte_carlo_gap,
    perturbation_budget,
)
from .io import ExperimentConfig, load_config, read_dataset, write_dataset
from .estimators import LoRAEstimator, NuclearNormEstimator

__all__ = [
    "BlockShape",
    "FeatureMap",
    "LinearizedDataset",
    "LinearizedSample",
    "LoraFactors",
    "LossKind",
    "PsdPerturbation",
    "assemble_S",
    "dual_weights",
    "empirical_risk",
    "factored_risk",
    "grad_factored",
    "hessian_factored",
    "hessian_vector_product",
    "nuclear_norm",
    "predict",
    "random_dataset",
    "regularized_risk",
    "InitScheme",
    "TrainConfig",
    "TrainTrace",
    "init_factors",
    "rank_threshold",
    "sample_psd_perturbation",
    "train",
    "ProxConfig",
    "ProxResult",
    "global_min_value",
    "prox_gradient",
    "solve_global",
    "svt",
    "FeatureOperator",
    "PsdLift",
    "boundary_step",
    "extract_offdiag",
    "lift_to_psd",
    "null_direction",
    "rank_reduce",
    "MultistartReport",
    "SospCertificate",
    "Verdict",
    "multistart",
    "rank_of_factors",
    "sosp_certificate",
    "toy_instance",
    "toy_rank1_floor",
    "BoundSpec",
    "SyntheticTask",
    "excess_risk_bound",
    "lambda_from_bound",
    "monte_carlo_gap",
    "perturbation_budget",
    "ExperimentConfig",
    "load_config",
    "read_dataset",
    "write_dataset",
    "LoRAEstimator",
    "NuclearNormEstimator",
]

__version__ = "0.1.0"
