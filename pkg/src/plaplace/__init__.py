"""Finite elements, sensitivities and one-step reconstructions for the
weighted, smoothed p-Laplace Neumann problem on the unit disk."""

__version__ = "0.1.0"

from .energy import EnergyParams, grad_phi, hessian_phi, phi, verify_inequalities
from .errors import *  # noqa: F401,F403
from .forward import (
    BoundaryCurrent,
    ConductivityField,
    NodalField,
    SolverOptions,
    base_point,
    energy,
    solve_currents,
    solve_forward,
)
from .measurement import MeasurementVector, add_noise, project_trace, simulate_measurement, trig_currents
from .mesh import MeshGeometry, Partition, build_disk_mesh, build_partition, load_mesh, perturb_mesh, save_mesh
from .prior import (
    CovarianceModel,
    covariance_matrix,
    lognormal_moments,
    normalized_norm,
    sample_config,
    sample_logconductivity,
)
from .reconstruct import (
    MapOperator,
    from_log_conductivity,
    one_step_map,
    save_reconstruction,
    to_log_conductivity,
)
from .sensitivity import JacobianMatrix, assemble_jacobian, solve_derivative
from .experiments import ExperimentConfig, Setting, prior_for, simulate_data, sweep
