"""Data reweighting as bilevel optimization.

Exact and warm-started mirror-descent solvers, hypergradients via implicit
differentiation, and a dynamical-systems layer that detects and certifies
sparse-weight collapse.
"""

from .datagen import (
    CorruptionSpec,
    MixtureSpec,
    gen_corrupted,
    gen_mixture,
    importance_weights,
    load_dataset,
    save_dataset,
)
from .dynamics import (
    ConstantField,
    ExactHypergradField,
    FlowConfig,
    OmegaResult,
    StationaryReport,
    constant_field_solution,
    full_flow_jacobian,
    integrate_joint_flow,
    integrate_mirror_flow,
    integrate_sparse_reference,
    is_stationary,
    jacobian_field,
    linearized_trajectory,
    membership_I,
    omega_limit,
    sparsity_certificate,
    stability_check,
)
from .errors import (
    AbsoluteContinuityError,
    AssumptionViolationError,
    BilevelError,
    DatasetFormatError,
    NoConvergenceError,
    NumericOverflowError,
    PreconditionError,
    SingularDesignError,
    StepTooLargeError,
)
from .hypergrad import (
    FrozenField,
    HypergradConfig,
    closed_form_inner_quadratic,
    frozen_field,
    hypergrad,
    solve_inner_system,
    value_function_fd,
)
from .losses import (
    Dataset,
    LossModel,
    ModelParams,
    RegularizedMultinomialLogistic,
    RidgeLeastSquares,
    accuracy,
    gradient_matrix,
    inner_grad,
    inner_hess_apply,
    inner_loss,
    outer_grad,
    outer_loss,
)
from .simplex import (
    SimplexWeights,
    TangentVector,
    entropy,
    mirror_step,
    preconditioner,
    project_tangent,
    support,
)
from .solvers import (
    FlowTrace,
    SolverConfig,
    TraceRecord,
    exact_bilevel,
    soba,
    softmax_reparam,
    solve_inner,
    warm_started,
)

__version__ = "0.1.0"
