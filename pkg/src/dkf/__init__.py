"""Distributed Kalman filter simulation lab.

Consensus filters (centralized, consensus-on-measurements, consensus-on-
information, their hybrid, and the modified variants that compute the exact
fused measurement covariance online), steady-state Riccati/Lyapunov
predictors, and a Monte Carlo harness for target-tracking experiments.
"""
import os as _os

# DKF_THREADS caps BLAS parallelism; must land before numpy's first import
if _os.environ.get("DKF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["DKF_THREADS"])

from .filters import (ALGORITHMS, FilterHistory, FilterOptions, FilterState,
                      run_filter)
from .harness import (ExperimentConfig, ExperimentReport, emit_report,
                      load_config, qws_benchmark, run_experiment)
from .network import (ConsensusNetwork, blend_weights, build_named_topology,
                      build_random_geometric, metropolis_weights, spectral_data)
from .system import (PlantModel, SensorSuite, Trajectory, make_tracking_model,
                     make_tracking_sensors, sample_gaussian, simulate)

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "ConsensusNetwork",
    "ExperimentConfig",
    "ExperimentReport",
    "FilterHistory",
    "FilterOptions",
    "FilterState",
    "PlantModel",
    "SensorSuite",
    "Trajectory",
    "blend_weights",
    "build_named_topology",
    "build_random_geometric",
    "emit_report",
    "load_config",
    "make_tracking_model",
    "make_tracking_sensors",
    "metropolis_weights",
    "qws_benchmark",
    "run_experiment",
    "run_filter",
    "sample_gaussian",
    "simulate",
    "spectral_data",
]
