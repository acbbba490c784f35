"""Scikit-learn style wrapper: train a toy MoE model and predict behaviour classes."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import classify_runs
from .dataset import BehaviorClass, LabeledPrompt
from .exceptions import ConfigurationError, InputError
from .model import ModelConfig, generate_many, init_model
from .routing import TuningConfig
from .trainer import TrainConfig, train


def check_prompts(X, require_completion: bool = False) -> list[LabeledPrompt]:
    """Validate a prompt collection; returns it as a list."""
    prompts = list(X)
    if not prompts:
        raise InputError("no prompts given")
    for p in prompts:
        if not isinstance(p, LabeledPrompt):
            raise InputError(f"expected LabeledPrompt, got {type(p).__name__}")
        if require_completion and not p.completion:
            raise InputError(f"prompt {p.prompt_id} has no completion to train on")
    return prompts


def check_tuning(tuning) -> TuningConfig:
    if tuning is None:
        return TuningConfig()
    if not isinstance(tuning, TuningConfig):
        raise ConfigurationError(f"tuning must be a TuningConfig, got {type(tuning).__name__}")
    return tuning


class MoEBehaviorModel(ClassifierMixin, BaseEstimator):
    """Toy MoE transformer trained on labelled prompts.

    ``predict`` returns the behaviour class read off each greedy completion;
    ``tuning`` applies router overrides at inference time only, so it can be
    changed with ``set_params`` after fitting without retraining.
    """

    def __init__(self, n_layers=6, n_routed_experts=32, top_k=4, d_model=64, d_expert_hidden=32, steps=3000,
                 batch_size=64, learning_rate=3e-3, aux_balance_coeff=0.01, stop_accuracy=None, max_new=3,
                 tuning=None, random_state=0):
        self.n_layers = n_layers
        self.n_routed_experts = n_routed_experts
        self.top_k = top_k
        self.d_model = d_model
        self.d_expert_hidden = d_expert_hidden
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.aux_balance_coeff = aux_balance_coeff
        self.stop_accuracy = stop_accuracy
        self.max_new = max_new
        self.tuning = tuning
        self.random_state = random_state

    def model_config(self, vocab_size: int = 64) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_routed_experts=self.n_routed_experts, top_k=self.top_k,
                           d_expert_hidden=self.d_expert_hidden, seed=int(self.random_state or 0))

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           aux_balance_coeff=self.aux_balance_coeff, seed=int(self.random_state or 0),
                           stop_accuracy=self.stop_accuracy, eval_every=100)

    def fit(self, X: Sequence[LabeledPrompt], y=None):
        """Train on the prompts' own completions; ``y`` is accepted for API symmetry and ignored."""
        prompts = check_prompts(X, require_completion=True)
        vocab = max(max(p.tokens + p.completion) for p in prompts) + 1
        cfg = self.model_config(max(64, vocab))
        self.model_, self.train_report_ = train(init_model(cfg), prompts, self.train_config())
        self.classes_ = np.array(sorted({int(p.expected) for p in prompts if p.expected is not None}))
        return self

    def _tuning(self) -> TuningConfig:
        return check_tuning(self.tuning)

    def generate(self, X: Sequence[LabeledPrompt]):
        check_is_fitted(self, "model_")
        prompts = check_prompts(X)
        tokens, _ = generate_many(self.model_, [p.tokens for p in prompts], self.max_new, self._tuning())
        return tokens

    def predict(self, X: Sequence[LabeledPrompt]) -> np.ndarray:
        check_is_fitted(self, "model_")
        prompts = check_prompts(X)
        return np.array([int(c) for c in classify_runs(self.model_, prompts, self._tuning(), self.max_new)])

    def score(self, X, y=None, sample_weight=None) -> float:
        """Accuracy against ``y`` or, if omitted, against each prompt's expected class."""
        prompts = check_prompts(X)
        if y is None:
            y = [int(p.expected if p.expected is not None else BehaviorClass.UNKNOWN) for p in prompts]
        return super().score(prompts, y, sample_weight)
