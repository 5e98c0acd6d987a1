"""adjkf: adjoint-differentiated Kalman filtering.

Linear Kalman filtering in residual form, exact adjoint gradients of
observation-mismatch losses with respect to transition operators, L-BFGS
field inversion, and a small neural closure for the discovered dynamics.
"""

from .errors import (
    AdjkfError,
    DimensionMismatch,
    MissingInput,
    NonFiniteLoss,
    NotPd,
    NotPsd,
    SingularMatrix,
)
from .linalg import derive_seed, kron, make_rng, normal_sample, solve, sym_inv_sqrt, unvec, vec
from .kalman import (
    FilterTrace,
    GaussianState,
    ModelSequence,
    StepModel,
    loss,
    predict,
    gain,
    residual,
    run_filter,
    run_filter_relinearized,
    update,
)
from .adjoint import gradient, solve_adjoint, verify_blocks
from .inversion import (
    DiffusivityTable,
    InversionProblem,
    InversionResult,
    LbfgsOptions,
    PerStepTransition,
    TiedTransition,
    minimize,
)
from .closure import Dataset, MlpModel, TrainConfig, predict_diffusivity, train
from .benchmarks import AllenCahnConfig, RocketConfig, ac_truth, rocket_truth

__version__ = "0.1.0"
