"""Causal trajectory prediction with diffusion-based backdoor adjustment."""
from causaltraj.config import Config, EvalConfig, ModelConfig, TrainConfig, load_config
from causaltraj.data import PerturbationSpec, Scene, load_dataset, save_dataset
from causaltraj.estimator import CausalTrajectoryPredictor
from causaltraj.evaluation import EvalReport, cross_domain_eval, evaluate, run_ablation
from causaltraj.exceptions import (CausalTrajError, ConfigError, EncodingError, NumericalError,
                                   SceneParseError, SceneValidationError, UsageError)
from causaltraj.model import CausalTrajectoryNet, variant_config
from causaltraj.plugin import BaselinePredictor, ConstantVelocityBaseline, wrap
from causaltraj.synthetic import generate_confounded_dataset
from causaltraj.training import Checkpoint, fit_pipeline, train_diffusion, train_full

__version__ = "0.1.0"

__all__ = [
    "BaselinePredictor", "CausalTrajError", "CausalTrajectoryNet", "CausalTrajectoryPredictor",
    "Checkpoint", "Config", "ConfigError", "ConstantVelocityBaseline", "EncodingError", "EvalConfig",
    "EvalReport", "ModelConfig", "NumericalError", "PerturbationSpec", "Scene", "SceneParseError",
    "SceneValidationError", "TrainConfig", "UsageError", "cross_domain_eval", "evaluate", "fit_pipeline",
    "generate_confounded_dataset", "load_config", "load_dataset", "run_ablation", "save_dataset",
    "train_diffusion", "train_full", "variant_config", "wrap",
]
