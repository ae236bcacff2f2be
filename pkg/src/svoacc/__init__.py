"""Socially compliant adaptive cruise control with an SVO-conditioned sequence controller."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    ConfigurationError,
    DivergenceError,
    IdmParams,
    PlatoonState,
    SimConfig,
    SvoAngle,
    TrajectorySeries,
    validate_trajectory,
)
from .dynamics import idm_acceleration, rollout, step
from .controller import ControllerParams, init_params, predict_accel
from .calibration import CalibrationReport, GridSpec, grid_search_calibrate, spacing_rmse
from .training import LossWeights, TrainConfig, evaluate_loss, gradient, train
from .metrics import build_table, percent_change
from .ingest import gen_synthetic, load_csv, reference_scenario
from .estimators import IDMCalibrator, SocialACCController

__all__ = [
    "ConfigurationError", "DivergenceError", "IdmParams", "PlatoonState", "SimConfig", "SvoAngle",
    "TrajectorySeries", "validate_trajectory", "idm_acceleration", "rollout", "step",
    "ControllerParams", "init_params", "predict_accel", "CalibrationReport", "GridSpec",
    "grid_search_calibrate", "spacing_rmse", "LossWeights", "TrainConfig", "evaluate_loss",
    "gradient", "train", "build_table", "percent_change", "gen_synthetic", "load_csv",
    "reference_scenario", "IDMCalibrator", "SocialACCController",
]
