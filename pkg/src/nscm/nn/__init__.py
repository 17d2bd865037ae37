"""Spectrally-normalized neural approximation of sampled metric fields."""

from .cholesky import FactorizationError, cholesky_decode, cholesky_encode, positive
from .network import (CheckpointError, LipschitzReport, SnCheck, SnMlp, check_normalization, load_checkpoint,
                      predict_metric, save_checkpoint, verify_lipschitz)
from .spectral import CertificateError, compute_sn_constant, power_iteration, sn_condition, spectral_norm
from .training import TrainConfig, TrainingError, TrainResult, relative_error, train, write_curves

__all__ = [
    "CertificateError", "CheckpointError", "FactorizationError", "LipschitzReport", "SnCheck", "SnMlp",
    "TrainConfig", "TrainResult", "TrainingError", "check_normalization", "cholesky_decode", "cholesky_encode",
    "compute_sn_constant", "load_checkpoint", "positive", "power_iteration", "predict_metric", "relative_error",
    "save_checkpoint", "sn_condition", "spectral_norm", "train", "verify_lipschitz", "write_curves",
]
