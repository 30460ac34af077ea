"""Loss-landscape toolkit for deep linear networks.

Provides exact low-rank global optima for the rank-constrained shallow
problem, landscape repair constructions (full-rank repair, rank-restoring
sweeps, factorization of perturbed products), and a reproducible gradient
descent experiment harness with critical-point classification.
"""

__version__ = "0.1.0"

from .constructors import (
    PerturbationBudget,
    RepairResult,
    deep_to_shallow_witness,
    factor_perturbed_product,
    full_rank_perturbation,
    rank_restoring_sweep,
    two_factor_perturbation,
)
from .errors import LinlandError
from .harness import (
    CriticalPointReport,
    ExperimentConfig,
    MaskedDataset,
    TrialResult,
    classify_critical_point,
    generate_instance,
    gradient_descent,
    masked_completion_experiment,
    no_bad_local_minima_experiment,
)
from .linalg import (
    SVDTriple,
    WedinReport,
    numerical_rank,
    perturbed_svd_align,
    pseudo_inverse,
    subspace_sin_angles,
    svd,
    wedin_bound_check,
)
from .model import (
    Dataset,
    NetworkDims,
    WeightStack,
    gradient,
    hessian,
    loss,
    product,
)
from .shallow import (
    BlockReport,
    BlockSpectrum,
    RankAllocation,
    ReducedProblem,
    analyze_candidate,
    descent_path,
    global_min_value,
    global_minimizer,
    rank_allocation,
    reduce_to_diagonal,
    shallow_loss,
)

__all__ = [
    "__version__",
    "LinlandError",
    "SVDTriple",
    "WedinReport",
    "svd",
    "pseudo_inverse",
    "numerical_rank",
    "subspace_sin_angles",
    "wedin_bound_check",
    "perturbed_svd_align",
    "NetworkDims",
    "WeightStack",
    "Dataset",
    "product",
    "loss",
    "gradient",
    "hessian",
    "BlockSpectrum",
    "RankAllocation",
    "ReducedProblem",
    "BlockReport",
    "shallow_loss",
    "reduce_to_diagonal",
    "rank_allocation",
    "global_min_value",
    "global_minimizer",
    "analyze_candidate",
    "descent_path",
    "PerturbationBudget",
    "RepairResult",
    "full_rank_perturbation",
    "rank_restoring_sweep",
    "two_factor_perturbation",
    "factor_perturbed_product",
    "deep_to_shallow_witness",
    "ExperimentConfig",
    "CriticalPointReport",
    "TrialResult",
    "MaskedDataset",
    "generate_instance",
    "gradient_descent",
    "classify_critical_point",
    "no_bad_local_minima_experiment",
    "masked_completion_experiment",
]
