"""Learning-based robust IDA-PBC for port-Hamiltonian systems with GP models."""

from .gp import (
    GpPhsModel,
    Hyperparameters,
    PhsStructure,
    RegressionDataset,
    STRUCTURES,
    estimate_derivatives,
    fit,
    gram_matrix,
    mean_adjusted_outputs,
    nlml,
    phs_kernel_block,
    posterior_dynamics,
    posterior_hamiltonian,
    se_hessian,
    train,
)
from .ida import (
    Certificate,
    DesiredDesign,
    ExactPosterior,
    certify,
    closed_loop,
    control_input,
    design_template,
    desired_hamiltonian,
    left_annihilator,
    matching_residual,
    robustness_margin,
    solve_equilibrium_shift,
)
from .phs import (
    MicroactuatorParams,
    PlantModel,
    Trajectory,
    check_structure,
    eval_dynamics,
    microactuator,
    output_port,
    simulate,
)

__version__ = "0.1.0"
