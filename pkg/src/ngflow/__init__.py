"""Natural gradient flow training of residual networks, with optional depth growth."""
from .energy import RitzPoisson1D, SupervisedL2, assemble_flow_matrix
from .estimators import NGFRegressor, RitzPoissonSolver
from .expansion import ExpansionConfig, aligned_init_new_layer, run_expansive_training
from .hilbert import InnerProductSpec, QuadratureRule, Space, gram_matrix, trapezoid_rule
from .network import (
    Architecture,
    NetworkParams,
    add_layer,
    add_width,
    forward,
    forward_batch,
    init_params,
    jacobians,
    load_checkpoint,
    save_checkpoint,
)
from .optimizers import (
    AdamConfig,
    LambdaTable,
    NgfConfig,
    StopCriteria,
    StopFlag,
    TrainRecord,
    lambda_rule,
    ngf_step,
    run_adam,
    run_ngf,
    tangent_diagnostics,
)

__version__ = "0.1.0"
