"""curvkit: curvature matrices of an empirical risk as matrix-free linear
operators, with iterative solvers, randomized property estimators, and the
classic second-order applications built on top."""

from .autodiff import Dual, Var, backward, grad_arrays
from .model import (
    Layer,
    Model,
    UnsupportedLayerError,
    activation,
    forward_eval,
    init_params,
    linear,
    model_jvp,
    model_vjp,
)
from .risk import (
    Batch,
    Dataset,
    HessianSqrt,
    LayerCapture,
    LossSpec,
    Reduction,
    RiskSpec,
    SampledLabels,
    TrueLabels,
    capture_layer_io,
    loss_output_gradient,
    loss_output_hessian,
    make_batches,
    risk_eval,
    risk_gradient,
    risk_gradient_list,
    sample_labels,
)
from .linop import (
    DenseOperator,
    DiagonalOperator,
    FunctionOperator,
    IdentityOperator,
    LinearOperator,
    ParamFormatAdapter,
    ParamSpaceOperator,
    add,
    check_deterministic,
    scale,
    shift,
)
from .curvature import (
    DampingConfig,
    EmpiricalFisherOperator,
    GGNOperator,
    HessianOperator,
    KFACInverseOperator,
    KFACOperator,
    KroneckerBlocks,
    LayerBlock,
    MCFisherOperator,
    Type2FisherOperator,
    kfac_compute,
    kfac_inverse_matvec,
    kfac_matvec,
    make_curvature,
)
from .solvers import (
    ConvergenceError,
    IndefiniteOperatorError,
    LanczosFactorization,
    SolveReport,
    cg_solve,
    eigsh_topk,
    lanczos,
    neumann_inverse,
)
from .rla import (
    ProbeSpec,
    SpectralDensity,
    frobenius_sq,
    hutchinson_diag,
    hutchinson_trace,
    hutchpp_trace,
    log_spectral_density,
    spectral_density,
    xdiag,
    xtrace,
)
from .applications import (
    InfluenceResult,
    NewtonStepResult,
    PruneScore,
    eigenspace_overlap,
    fisher_merge,
    influence_upweight,
    newton_step,
    prune_scores,
)
from .bench import relative_cost

__version__ = "0.1.0"
