"""Multi-seed steering study: train, identify, tune and compare with random controls.

One model is trained per seed on the behaviour task together with the
training half of the neutral echo task. Each model then goes through the
full pipeline (record, map, pick the top experts, suppress, stimulate, hold
out combinations, check neutral quality) and the per-seed numbers are pooled.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import (
    BehaviorClass,
    ExperimentReport,
    classify_runs,
    heldout_generalization,
    identify,
    language_experiment,
    run_experiment,
)
from .dataset import PromptTemplate, generate_dataset, generate_language_dataset, split_heldout
from .model import ModelConfig, MoETransformer, init_model
from .routing import TuningConfig, limit_per_layer
from .trainer import TrainConfig, eval_quality, train

log = logging.getLogger(__name__)

# k=2 rather than the k=4 default: see the README section on steering.
STEERING_MODEL = dict(n_layers=6, n_routed_experts=32, top_k=2, d_model=64, d_expert_hidden=32)


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    control_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_experts: int = 10
    heldout_fraction: float = 0.25
    neutral_heldout_fraction: float = 0.25
    model: dict = field(default_factory=lambda: dict(STEERING_MODEL))
    steps: int = 3000
    stop_accuracy: float | None = 1.0
    scope: str = "prompt"
    aggregation: str = "count"

    def model_config(self, seed: int, vocab_size: int = 64) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=seed, **self.model)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(steps=self.steps, seed=seed, stop_accuracy=self.stop_accuracy, eval_every=100)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeedResult:
    seed: int
    steps_run: int
    train_accuracy: float
    distinctive: TuningConfig
    suppression: ExperimentReport
    stimulation: ExperimentReport
    heldout: ExperimentReport
    quality_before: float
    quality_after: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "steps_run": self.steps_run,
            "train_accuracy": self.train_accuracy,
            "distinctive": [list(a) for a in self.distinctive.suppressed],
            "suppression": self.suppression.to_dict(),
            "stimulation": self.stimulation.to_dict(),
            "heldout": self.heldout.to_dict(),
            "neutral_quality": {"before": self.quality_before, "after": self.quality_after},
        }


def behavior_data(cfg: StudyConfig):
    behavior = generate_dataset(PromptTemplate.load("behavior"))
    neutral = generate_dataset(PromptTemplate.load("neutral"))
    neutral_train, neutral_held = split_heldout(neutral, cfg.neutral_heldout_fraction, seed=0, stratify=False)
    return behavior, neutral_train, neutral_held


def train_behavior_model(cfg: StudyConfig, seed: int):
    behavior, neutral_train, _ = behavior_data(cfg)
    return train(init_model(cfg.model_config(seed)), behavior + neutral_train, cfg.train_config(seed))


def steer_one(model: MoETransformer, cfg: StudyConfig) -> dict:
    """Everything measured on one trained behaviour model."""
    behavior, _, neutral_held = behavior_data(cfg)
    target = BehaviorClass.REFUSED
    base = classify_runs(model, behavior)
    sel = identify(model, behavior, target, cfg.n_experts, cfg.scope, cfg.aggregation)
    supp = sel.tuning("suppress")
    stim = TuningConfig(stimulated=limit_per_layer(sel.experts_, model.config.top_k))
    return {
        "distinctive": supp,
        "suppression": run_experiment(model, behavior, supp, cfg.control_seeds, baseline=base),
        "stimulation": run_experiment(model, behavior, stim, cfg.control_seeds, baseline=base),
        "heldout": heldout_generalization(model, behavior, cfg.heldout_fraction, target=target, n=cfg.n_experts,
                                          control_seeds=cfg.control_seeds),
        "quality_before": eval_quality(model, neutral_held),
        "quality_after": eval_quality(model, neutral_held, supp),
    }


def run_study(cfg: StudyConfig = StudyConfig()) -> list[SeedResult]:
    results = []
    for seed in cfg.seeds:
        model, report = train_behavior_model(cfg, seed)
        log.info("seed %d trained in %d steps (acc %.3f)", seed, report.steps_run, report.train_accuracy)
        results.append(SeedResult(seed, report.steps_run, report.train_accuracy, **steer_one(model, cfg)))
    return results


def summarize(results: list[SeedResult]) -> dict:
    """Pooled numbers behind the steering acceptance checks."""
    r = BehaviorClass.REFUSED.name

    def mean(xs):
        xs = [x for x in xs if x is not None]
        return float(np.mean(xs)) if xs else None

    supp = [s.suppression for s in results]
    held = [s.heldout for s in results]
    stim = [s.stimulation for s in results]
    return {
        "seeds": [s.seed for s in results],
        "flip_rate": mean(x.flip_rates[r] for x in supp),
        "control_flip_rate": mean(x.control_flip_rates()[r] for x in supp),
        "entry_rate": mean(x.entry_rates[r] for x in supp),
        "control_entry_rate": mean(x.control_entry_rates()[r] for x in supp),
        "stimulation_increases": [
            x.matrix.frequency(BehaviorClass.REFUSED, "tuned") > x.matrix.frequency(BehaviorClass.REFUSED, "baseline")
            for x in stim
        ],
        "heldout_beats_control": [
            (x.flip_rates[r] or 0.0) > (x.control_flip_rates()[r] or 0.0) for x in held
        ],
        "quality_change": [s.quality_after - s.quality_before for s in results],
    }


def language_study(cfg: StudyConfig = StudyConfig()) -> list[ExperimentReport]:
    """Suppress LANG_A-distinctive experts on a model trained on the language task, per seed."""
    data = generate_language_dataset()
    out = []
    for seed in cfg.seeds:
        model, _ = train(init_model(cfg.model_config(seed)), data, cfg.train_config(seed))
        sel = identify(model, data, BehaviorClass.LANG_A, cfg.n_experts, cfg.scope, cfg.aggregation)
        out.append(language_experiment(model, data, sel.tuning("suppress"), cfg.control_seeds))
    return out
