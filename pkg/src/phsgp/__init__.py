"""Gaussian process learning of port-Hamiltonian dynamics from irregularly sampled trajectories."""

from .baselines import (
    DerivativeEstimate,
    GpPhsModel,
    MsOdeModel,
    gp_phs_fit_predict,
    loess_smooth,
    ms_ode_fit_predict,
    savgol_smooth,
)
from .bench import (
    ExperimentConfig,
    MeshSpec,
    RunResult,
    aggregate,
    calibration_tracking,
    eval_mesh,
    h_metrics,
    load_model,
    report,
    run_one,
    run_sweep,
    vf_metrics,
)
from .inference import (
    Anchor,
    KernelHyperparams,
    ModelDocument,
    MsPhsModel,
    OptimizerConfig,
    assemble_training_cov,
    fit,
    hamiltonian_posterior,
    nll,
    predict_field,
    read_model,
    write_model,
)
from .kernels import ArdKernelParams, base_eval, base_grad_x2, base_hessian_block, phs_kernel_eval
from .multistep import MultistepScheme, ab_coefficients, build_constraints, kron_lift, lte_order_check
from .simulate import (
    TrajectoryDataset,
    generate_dataset,
    jittered_timestamps,
    observe,
    read_dataset,
    rk4_integrate,
    simulate_system,
    write_dataset,
)
from .systems import SYSTEMS, BenchmarkSystem, PhsStructure, duffing, jr_eval, mass_spring, van_der_pol
from .version import get_version

__all__ = [
    "SYSTEMS",
    "Anchor",
    "ArdKernelParams",
    "BenchmarkSystem",
    "DerivativeEstimate",
    "ExperimentConfig",
    "GpPhsModel",
    "KernelHyperparams",
    "MeshSpec",
    "ModelDocument",
    "MsOdeModel",
    "MsPhsModel",
    "MultistepScheme",
    "OptimizerConfig",
    "PhsStructure",
    "RunResult",
    "TrajectoryDataset",
    "ab_coefficients",
    "aggregate",
    "assemble_training_cov",
    "base_eval",
    "base_grad_x2",
    "base_hessian_block",
    "build_constraints",
    "calibration_tracking",
    "duffing",
    "eval_mesh",
    "fit",
    "generate_dataset",
    "get_version",
    "gp_phs_fit_predict",
    "h_metrics",
    "hamiltonian_posterior",
    "jittered_timestamps",
    "jr_eval",
    "kron_lift",
    "load_model",
    "loess_smooth",
    "lte_order_check",
    "mass_spring",
    "ms_ode_fit_predict",
    "nll",
    "observe",
    "phs_kernel_eval",
    "predict_field",
    "read_dataset",
    "read_model",
    "report",
    "rk4_integrate",
    "run_one",
    "run_sweep",
    "savgol_smooth",
    "simulate_system",
    "van_der_pol",
    "vf_metrics",
    "write_dataset",
    "write_model",
]
