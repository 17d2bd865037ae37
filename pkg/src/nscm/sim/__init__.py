"""Stochastic simulation, baselines and Monte-Carlo comparisons."""

from ._kernels import care_batch
from .experiment import (ExperimentConfig, PolicySpec, SimulationReport, build_policy, run_comparison,
                         steady_state_mse, write_plot_data, write_reports)
from .policies import (EkfEstimator, MetricController, MetricEstimator, NetMetric, SdreController, SdreEstimator,
                       TableMetric, ZeroController, care, care_residual, ekf_step, nscm_control,
                       nscm_estimate_step)
from .sde import BLOWUP, SdePath, euler_maruyama, simulate, wiener_increments

__all__ = [
    "BLOWUP", "EkfEstimator", "ExperimentConfig", "MetricController", "MetricEstimator", "NetMetric", "PolicySpec",
    "SdePath", "SdreController", "SdreEstimator", "SimulationReport", "TableMetric", "ZeroController",
    "build_policy", "care", "care_batch", "care_residual", "ekf_step", "euler_maruyama", "nscm_control",
    "nscm_estimate_step", "run_comparison", "simulate", "steady_state_mse", "wiener_increments",
    "write_plot_data", "write_reports",
]
