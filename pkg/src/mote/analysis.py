"""Baseline-versus-tuned experiments and their random-expert controls.

Every experiment generates greedy completions twice, once with the plain
router and once with a tuning applied, classifies both by their leading
answer token and tallies the pairs in a :class:`TransitionMatrix`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import BehaviorClass, LabeledPrompt, PromptTemplate, classify_response, generate_dataset, split_heldout
from .exceptions import ConfigurationError, InputError
from .ftri import FtriSelector
from .model import MoETransformer, generate_many
from .routing import ExpertAddr, TuningConfig, limit_per_layer

BEHAVIOR_CLASSES = (BehaviorClass.REFUSED, BehaviorClass.ALIGNED, BehaviorClass.REASONED)
LANGUAGE_CLASSES = (BehaviorClass.LANG_A, BehaviorClass.LANG_B)
REPORT_VERSION = 1


@dataclass
class TransitionMatrix:
    """Counts of (baseline class, tuned class) pairs.

    The last row and column are UNKNOWN, which also absorbs any class outside
    ``classes``; the grand total therefore equals the number of prompts.
    """

    classes: tuple[BehaviorClass, ...]
    counts: np.ndarray

    @classmethod
    def from_pairs(cls, baseline: Sequence[BehaviorClass], tuned: Sequence[BehaviorClass],
                   classes: Sequence[BehaviorClass]) -> "TransitionMatrix":
        if len(baseline) != len(tuned):
            raise InputError("baseline and tuned runs differ in length")
        classes = tuple(BehaviorClass(c) for c in classes if c != BehaviorClass.UNKNOWN)
        index = {c: i for i, c in enumerate(classes)}
        unk = len(classes)
        counts = np.zeros((unk + 1, unk + 1), dtype=np.int64)
        for b, t in zip(baseline, tuned):
            counts[index.get(b, unk), index.get(t, unk)] += 1
        return cls(classes, counts)

    @property
    def labels(self) -> list[str]:
        return [c.name for c in self.classes] + ["UNKNOWN"]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def unknown(self) -> dict[str, int]:
        return {"baseline": int(self.counts[-1].sum()), "tuned": int(self.counts[:, -1].sum())}

    def is_diagonal(self) -> bool:
        return bool(np.all(self.counts == np.diag(np.diag(self.counts))))

    def _row(self, c: BehaviorClass) -> np.ndarray:
        return self.counts[self.classes.index(BehaviorClass(c)), :-1]

    def flip_rate(self, c: BehaviorClass) -> float | None:
        """Share of class-``c`` prompts that left ``c``; None if no prompt started in ``c``.

        Prompts whose tuned answer is UNKNOWN are left out of the denominator.
        """
        row = self._row(c)
        n = row.sum()
        if n == 0:
            return None
        return float(1.0 - row[self.classes.index(BehaviorClass(c))] / n)

    def entry_rate(self, c: BehaviorClass) -> float | None:
        """Share of prompts outside ``c`` (known classes only) that moved into ``c``."""
        i = self.classes.index(BehaviorClass(c))
        rows = [j for j in range(len(self.classes)) if j != i]
        block = self.counts[rows, :-1]
        n = block.sum()
        if n == 0:
            return None
        return float(block[:, i].sum() / n)

    def frequency(self, c: BehaviorClass, which: str = "tuned") -> float:
        """Share of all prompts classified ``c`` in the baseline or tuned run."""
        i = self.classes.index(BehaviorClass(c))
        n = self.counts[:, i].sum() if which == "tuned" else self.counts[i].sum()
        return float(n / max(self.total, 1))

    def to_dict(self) -> dict:
        return {"labels": self.labels, "counts": self.counts.tolist()}

    def table(self) -> str:
        labels = self.labels
        width = max(len(s) for s in labels) + 2
        lines = ["baseline \\ tuned".ljust(width + 2) + "".join(s.rjust(width) for s in labels)]
        for name, row in zip(labels, self.counts):
            lines.append(name.ljust(width + 2) + "".join(str(int(v)).rjust(width) for v in row))
        return "\n".join(lines)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class ControlRun:
    seed: int
    tuning: TuningConfig
    matrix: TransitionMatrix


@dataclass
class ExperimentReport:
    dataset_id: str
    tuning: TuningConfig
    matrix: TransitionMatrix
    controls: list[ControlRun] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)

    @property
    def flip_rates(self) -> dict[str, float | None]:
        return {c.name: self.matrix.flip_rate(c) for c in self.matrix.classes}

    @property
    def entry_rates(self) -> dict[str, float | None]:
        return {c.name: self.matrix.entry_rate(c) for c in self.matrix.classes}

    def control_flip_rates(self) -> dict[str, float | None]:
        return {c.name: _mean(r.matrix.flip_rate(c) for r in self.controls) for c in self.matrix.classes}

    def control_entry_rates(self) -> dict[str, float | None]:
        return {c.name: _mean(r.matrix.entry_rate(c) for r in self.controls) for c in self.matrix.classes}

    def config_hash(self) -> str:
        blob = json.dumps(
            {"dataset": self.dataset_id, "tuning": self.tuning.to_dict(), "seeds": self.seeds,
             "controls": [[r.seed, r.tuning.to_dict()] for r in self.controls]},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        out = {
            "version": REPORT_VERSION,
            "dataset_id": self.dataset_id,
            "config_hash": self.config_hash(),
            "seeds": self.seeds,
            "tuning": self.tuning.to_dict(),
            "distinctive": {
                "matrix": self.matrix.to_dict(),
                "flip_rates": self.flip_rates,
                "entry_rates": self.entry_rates,
                "unknown": self.matrix.unknown,
            },
        }
        if self.controls:
            out["random_control"] = {
                "runs": [
                    {"seed": r.seed, "tuning": r.tuning.to_dict(), "matrix": r.matrix.to_dict(),
                     "flip_rates": {c.name: r.matrix.flip_rate(c) for c in r.matrix.classes}}
                    for r in self.controls
                ],
                "mean_flip_rates": self.control_flip_rates(),
                "mean_entry_rates": self.control_entry_rates(),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{100 * v:.1f}%"

        lines = [f"dataset {self.dataset_id}  config {self.config_hash()}", self.matrix.table(), ""]
        ctl = self.control_flip_rates() if self.controls else {}
        for name, rate in self.flip_rates.items():
            line = f"{name:>9} flip rate {fmt(rate)}"
            if self.controls:
                line += f"   random control {fmt(ctl[name])} (n={len(self.controls)})"
            lines.append(line)
        return "\n".join(lines)


def dataset_id(prompts: Sequence[LabeledPrompt]) -> str:
    """Name plus a digest of the member ids, so train and held-out splits never collide."""
    if not prompts:
        raise InputError("empty dataset")
    digest = hashlib.sha256("\n".join(p.prompt_id for p in prompts).encode()).hexdigest()[:12]
    name = prompts[0].prompt_id.split("/")[0]
    splits = sorted({p.split for p in prompts})
    return f"{name}:{'+'.join(splits)}:{len(prompts)}:{digest}"


def classify_runs(model: MoETransformer, prompts: Sequence[LabeledPrompt], tuning: TuningConfig | None = None,
                  max_new: int = 3) -> list[BehaviorClass]:
    tokens, _ = generate_many(model, [p.tokens for p in prompts], max_new, tuning)
    return [classify_response(t[len(p.tokens):]) for t, p in zip(tokens, prompts)]


def random_control(n: int, seed: int, exclude: Iterable[ExpertAddr], bounds: tuple[int, int],
                   mode: str = "suppress") -> TuningConfig:
    """``n`` distinct experts drawn uniformly from those not in ``exclude``."""
    L, E = bounds
    excluded = {ExpertAddr(*a) for a in exclude}
    pool = [ExpertAddr(l, e) for l in range(L) for e in range(E) if (l, e) not in excluded]
    if not 0 <= n <= len(pool):
        raise ConfigurationError(f"cannot draw {n} control experts from {len(pool)} candidates")
    rng = np.random.default_rng(seed)
    picked = tuple(pool[i] for i in sorted(rng.choice(len(pool), size=n, replace=False)))
    if mode == "suppress":
        return TuningConfig(suppressed=picked)
    if mode == "stimulate":
        return TuningConfig(stimulated=picked)
    raise ConfigurationError(f"unknown tuning mode {mode!r}")


def _controls_like(tuning: TuningConfig, seeds: Sequence[int], bounds, k: int) -> list[tuple[int, TuningConfig]]:
    exclude = set(tuning.suppressed) | set(tuning.stimulated)
    out = []
    for s in seeds:
        if tuning.stimulated and not tuning.suppressed:
            ctl = random_control(len(tuning.stimulated), s, exclude, bounds, "stimulate")
            ctl = TuningConfig(stimulated=limit_per_layer(ctl.stimulated, k))
        else:
            ctl = random_control(len(tuning.suppressed), s, exclude, bounds)
        out.append((int(s), ctl))
    return out


def run_experiment(model: MoETransformer, dataset: Sequence[LabeledPrompt], tuning: TuningConfig,
                   control_seeds: Sequence[int] = (), classes: Sequence[BehaviorClass] = BEHAVIOR_CLASSES,
                   baseline: Sequence[BehaviorClass] | None = None, seeds: dict | None = None) -> ExperimentReport:
    """Compare untuned and tuned generations on ``dataset``.

    For each control seed an equally sized random expert set, disjoint from
    the tuned experts, is applied in the same mode.
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    cfg = model.config
    tuning.validate(cfg.n_layers, cfg.n_routed_experts, cfg.top_k)
    base = list(baseline) if baseline is not None else classify_runs(model, dataset)
    matrix = TransitionMatrix.from_pairs(base, classify_runs(model, dataset, tuning), classes)
    controls = [
        ControlRun(s, ctl, TransitionMatrix.from_pairs(base, classify_runs(model, dataset, ctl), classes))
        for s, ctl in _controls_like(tuning, control_seeds, (cfg.n_layers, cfg.n_routed_experts), cfg.top_k)
    ]
    seed_info = {"model": cfg.seed, "control": [int(s) for s in control_seeds], **(seeds or {})}
    return ExperimentReport(dataset_id(dataset), tuning, matrix, controls, seed_info)


def identify(model: MoETransformer, prompts: Sequence[LabeledPrompt], target: BehaviorClass, n: int = 10,
             scope: str = "prompt", aggregation: str = "count", max_new: int = 3) -> FtriSelector:
    """Record traces, label them by observed behaviour and pick the top ``n`` experts for ``target``."""
    tokens, traces = generate_many(model, [p.tokens for p in prompts], max_new)
    labels = [classify_response(t[len(p.tokens):]) for t, p in zip(tokens, prompts)]
    sel = FtriSelector(target=target, n_experts=n, scope=scope, aggregation=aggregation)
    return sel.fit(traces, labels, n_routed_experts=model.config.n_routed_experts)


def heldout_generalization(model: MoETransformer, full_template: PromptTemplate | Sequence[LabeledPrompt],
                           heldout_fraction: float, tuning: TuningConfig | None = None,
                           target: BehaviorClass = BehaviorClass.REFUSED, n: int = 10,
                           control_seeds: Sequence[int] = (), split_seed: int = 0) -> ExperimentReport:
    """Suppression measured only on attribute combinations never used for identification.

    If ``tuning`` is None the top ``n`` ``target``-distinctive experts are
    identified on the remaining combinations.
    """
    prompts = generate_dataset(full_template) if isinstance(full_template, PromptTemplate) else list(full_template)
    if heldout_fraction <= 0:
        raise ConfigurationError("heldout_fraction must be positive: the evaluation set would be empty")
    train, held = split_heldout(prompts, heldout_fraction, seed=split_seed)
    if not held:
        raise InputError("held-out split is empty")
    if tuning is None:
        tuning = identify(model, train, target, n).tuning("suppress")
    return run_experiment(model, held, tuning, control_seeds, seeds={"split": split_seed})


def language_experiment(model: MoETransformer, language_dataset: Sequence[LabeledPrompt], tuning: TuningConfig,
                        control_seeds: Sequence[int] = (0,)) -> ExperimentReport:
    """:func:`run_experiment` over the two language classes, with unrelated-expert controls."""
    return run_experiment(model, language_dataset, tuning, control_seeds, classes=LANGUAGE_CLASSES)
