"""Training loop for the toy MoE and answer-token accuracy."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ._io import csv_text
from .dataset import LabeledPrompt
from .exceptions import ConfigurationError, InputError, NumericError
from .model import MoETransformer, assert_finite
from .routing import TuningConfig

log = logging.getLogger(__name__)

PAD = 0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 3e-3
    aux_balance_coeff: float = 0.01
    seed: int = 0
    # stop once answer accuracy on the training set reaches this value
    stop_accuracy: float | None = None
    eval_every: int = 250

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.aux_balance_coeff < 0:
            raise ConfigurationError("aux_balance_coeff must be >= 0")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")
    expert_load: np.ndarray | None = None  # (L, E) fraction of tokens selecting each expert
    steps_run: int = 0

    def loss_csv(self) -> str:
        return csv_text(("step", "loss"), ((i, l) for i, l in enumerate(self.losses)))


class Batch:
    """Right-padded prompt+completion sequences with a mask over answer targets."""

    def __init__(self, prompts: Sequence[LabeledPrompt]):
        seqs = [list(p.tokens) + list(p.completion) for p in prompts]
        T = max(len(s) for s in seqs)
        self.tokens = torch.full((len(seqs), T), PAD, dtype=torch.long)
        self.target_mask = torch.zeros((len(seqs), T - 1))
        self.real = torch.zeros((len(seqs), T), dtype=torch.bool)
        for i, (p, s) in enumerate(zip(prompts, seqs)):
            self.tokens[i, : len(s)] = torch.tensor(s)
            self.real[i, : len(s)] = True
            # position t predicts token t+1; completion starts at len(prompt)
            self.target_mask[i, len(p.tokens) - 1 : len(s) - 1] = 1.0


def loss_fn(model: MoETransformer, batch: Batch, aux_coeff: float = 0.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy on completion tokens plus the load-balance penalty.

    The penalty is ``E * sum_e (mean router prob_e - 1/E)^2`` per layer,
    averaged over layers, with the mean taken over non-padding tokens.
    """
    out = model(batch.tokens)
    logits = out.logits[:, :-1]
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch.tokens[:, 1:].reshape(-1), reduction="none")
    mask = batch.target_mask.reshape(-1).to(ce.dtype)
    ce = (ce * mask).sum() / mask.sum()
    aux = torch.zeros((), dtype=ce.dtype)
    if aux_coeff > 0:
        real = batch.real.reshape(-1)
        E = model.config.n_routed_experts
        for p in out.router_probs:
            load = p.reshape(-1, E)[real].mean(dim=0)
            aux = aux + E * ((load - 1.0 / E) ** 2).sum()
        aux = aux / len(out.router_probs)
    return ce + aux_coeff * aux, ce


@torch.no_grad()
def answer_predictions(model: MoETransformer, prompts: Sequence[LabeledPrompt], tuning: TuningConfig | None = None) -> np.ndarray:
    """Greedy first completion token for each prompt (batched by prompt length)."""
    preds = np.empty(len(prompts), dtype=np.int64)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p.tokens), []).append(i)
    for members in groups.values():
        toks = torch.tensor([prompts[i].tokens for i in members], dtype=torch.long)
        logits = model(toks, tuning).logits[:, -1]
        preds[members] = logits.argmax(dim=-1).numpy()
    return preds


def eval_quality(model: MoETransformer, heldout: Sequence[LabeledPrompt], tuning: TuningConfig | None = None) -> float:
    """Fraction of prompts whose first generated token equals the expected answer token."""
    if len(heldout) == 0:
        raise InputError("empty evaluation set")
    preds = answer_predictions(model, heldout, tuning)
    target = np.array([p.completion[0] for p in heldout])
    return float((preds == target).mean())


@torch.no_grad()
def expert_load(model: MoETransformer, prompts: Sequence[LabeledPrompt]) -> np.ndarray:
    batch = Batch(prompts)
    out = model(batch.tokens)
    L, E = model.config.n_layers, model.config.n_routed_experts
    real = batch.real.numpy()
    counts = np.zeros((L, E))
    for l in range(L):
        ids = out.expert_ids[l].numpy()[real]
        np.add.at(counts[l], ids[ids >= 0], 1.0)
    return counts / real.sum()


def train(
    model: MoETransformer,
    data: Sequence[LabeledPrompt],
    config: TrainConfig,
    heldout: Sequence[LabeledPrompt] | None = None,
) -> tuple[MoETransformer, TrainReport]:
    """Adam on answer-token cross-entropy. Returns a trained copy; ``model`` is untouched."""
    data = [p for p in data if p.completion]
    if not data:
        raise InputError("no labelled training sequences")
    model = copy.deepcopy(model)
    report = TrainReport()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 100))
    model.train()
    for step in range(config.steps):
        pick = rng.choice(len(data), size=min(config.batch_size, len(data)), replace=False)
        batch = Batch([data[i] for i in pick])
        loss, ce = loss_fn(model, batch, config.aux_balance_coeff)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}; learning rate {config.learning_rate} is likely too high")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        report.losses.append(float(ce.detach()))
        report.steps_run = step + 1
        if config.stop_accuracy is not None and (step + 1) % config.eval_every == 0:
            acc = eval_quality(model, data)
            log.info("step %d loss %.4f train acc %.3f", step + 1, float(ce.detach()), acc)
            if acc >= config.stop_accuracy:
                break
    model.eval()
    assert_finite(model)
    report.train_accuracy = eval_quality(model, data)
    if heldout:
        report.heldout_accuracy = eval_quality(model, heldout)
    report.expert_load = expert_load(model, data)
    return model, report


def gradient_check(
    model: MoETransformer, batch: Batch, aux_coeff: float = 0.0, n_samples: int = 20, eps: float = 1e-6, seed: int = 0
) -> float:
    """Max relative error between autograd and central differences on sampled entries.

    Runs in float64 on a copy of ``model``.
    """
    model = copy.deepcopy(model).double()
    params = [p for p in model.parameters()]
    loss, _ = loss_fn(model, batch, aux_coeff)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    candidates = [(i, g) for i, g in enumerate(grads) if g is not None and g.abs().max() > 0]
    for _ in range(n_samples):
        i, g = candidates[rng.integers(len(candidates))]
        flat = params[i].data.view(-1)
        nz = torch.nonzero(g.view(-1)).squeeze(1)
        j = int(nz[rng.integers(len(nz))])
        orig = float(flat[j])
        with torch.no_grad():
            flat[j] = orig + eps
            up = float(loss_fn(model, batch, aux_coeff)[0])
            flat[j] = orig - eps
            down = float(loss_fn(model, batch, aux_coeff)[0])
            flat[j] = orig
        fd = (up - down) / (2 * eps)
        an = float(g.view(-1)[j])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-12)
        worst = max(worst, rel)
    return worst
