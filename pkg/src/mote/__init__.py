"""Toy mixture-of-experts lab for locating and tuning behaviour-specific experts."""

from .analysis import ExperimentReport, TransitionMatrix, random_control, run_experiment
from .dataset import BehaviorClass, LabeledPrompt, PromptTemplate, generate_dataset, generate_language_dataset
from .estimator import MoEBehaviorModel
from .exceptions import ConfigurationError, EmptyClassError, InputError, MoteError, NumericError
from .ftri import FtriSelector, differential_map, prompt_activation_map, top_distinctive
from .model import ModelConfig, MoETransformer, generate, init_model, load_model, save_model
from .projection import TSNE, TsneConfig, tsne
from .routing import ExpertAddr, GateDecision, TuningConfig, apply_stimulation, apply_suppression, route
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BehaviorClass",
    "ConfigurationError",
    "EmptyClassError",
    "ExperimentReport",
    "ExpertAddr",
    "FtriSelector",
    "GateDecision",
    "InputError",
    "LabeledPrompt",
    "ModelConfig",
    "MoEBehaviorModel",
    "MoETransformer",
    "MoteError",
    "NumericError",
    "PromptTemplate",
    "TSNE",
    "TrainConfig",
    "TransitionMatrix",
    "TsneConfig",
    "TuningConfig",
    "apply_stimulation",
    "apply_suppression",
    "differential_map",
    "generate",
    "generate_dataset",
    "generate_language_dataset",
    "init_model",
    "load_model",
    "prompt_activation_map",
    "random_control",
    "route",
    "run_experiment",
    "save_model",
    "top_distinctive",
    "train",
    "tsne",
]
