"""Nonlocal diffusion equations of gradient-flow type on the flat torus.

The package discretizes symmetric jump kernels by a finite-volume scheme,
evolves the entropy gradient flow of the resulting jump process, evaluates
the entropy / Fisher-information / kinetic-action functionals, computes
nonlocal Wasserstein distances by convex minimization, certifies
log-Sobolev decay rates, and cross-validates the deterministic solver
against a Monte Carlo jump-process oracle.
"""

from __future__ import annotations

import os


def _pin_thread_env(count: str = "1", force: bool = False) -> None:
    """Pin BLAS/OpenMP thread pools so results do not depend on core count.

    Multi-threaded reductions change summation order, which would make
    artifact bytes depend on the machine.  Called at import time with
    ``setdefault`` semantics so an explicit environment wins; the CLI's
    --threads flag calls it again with force=True.
    """
    for var in (
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "OMP_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        if force:
            os.environ[var] = count
        else:
            os.environ.setdefault(var, count)


_pin_thread_env()

from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .discretize import (
    DiscreteSystem,
    build_system,
    discretize_kernel,
    load_system,
    pushforward_measure,
    save_system,
)
from .experiments import (
    LSICertificate,
    RefinementReport,
    RunResult,
    density_from_spec,
    lsi_certify,
    refinement_study,
    run_config,
)
from .flow import (
    IntegratorConfig,
    IntegratorError,
    Trajectory,
    decay_rate_estimate,
    edi_report,
    generator_matrix,
    solve,
    tangent_flux,
)
from .functionals import (
    DensityState,
    FluxField,
    action,
    continuity_residual,
    fisher_information,
    log_mean,
    relative_entropy,
    theta_connectedness_constant,
)
from .kernels import (
    ConstantKernel,
    FractionalKernel,
    GibbsMeasure,
    QuadratureConfig,
    UniformMeasure,
    WeightedKernel,
    extend_kernel,
    kernel_from_dict,
    measure_from_dict,
)
from .metric import (
    MetricResult,
    MetricSolverConfig,
    PathProblem,
    check_metric_axioms,
    nlw_distance,
    two_point_distance_oracle,
)
from .sampler import MarginalReport, SamplerConfig, SampleResult, compare_marginals, simulate
from .torus import GridSpec, build_grid, nearest_cell, torus_distance

__version__ = "0.1.0"
