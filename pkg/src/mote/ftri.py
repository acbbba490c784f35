"""Activation maps, class-differential maps and distinctive-expert selection.

A prompt's activation map counts, per layer and routed expert, how many of
its tokens selected that expert. Averaging maps within a behaviour class and
subtracting the average over all remaining prompts gives the differential
map; its largest entries are the experts most specific to the class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._io import atomic_write_text, csv_text
from .dataset import BehaviorClass
from .exceptions import ConfigurationError, EmptyClassError, InputError
from .model import ForwardTrace
from .routing import ExpertAddr, TuningConfig, format_expert_tuples


@dataclass
class ActivationMap:
    values: np.ndarray  # (L, E)
    n_tokens: int

    def __add__(self, other: "ActivationMap") -> "ActivationMap":
        return ActivationMap(self.values + other.values, self.n_tokens + other.n_tokens)

    def normalized(self) -> np.ndarray:
        return self.values / max(self.n_tokens, 1)


@dataclass
class FtriMap:
    values: np.ndarray  # (L, E), may be negative
    target: BehaviorClass


def prompt_activation_map(
    trace: ForwardTrace, n_experts: int, scope: str = "prompt", aggregation: str = "count"
) -> ActivationMap:
    """Aggregate a trace's gate decisions into an ``(L, E)`` map.

    ``scope`` is ``"prompt"`` (tokens seen before the first output token) or
    ``"full"`` (prompt and completion). ``aggregation="weight"`` sums gate
    weights instead of counting selections.
    """
    if scope == "prompt":
        rows = trace.is_prompt
    elif scope == "full":
        rows = np.ones(trace.n_tokens, dtype=bool)
    else:
        raise ConfigurationError(f"unknown scope {scope!r}")
    if aggregation not in ("count", "weight"):
        raise ConfigurationError(f"unknown aggregation {aggregation!r}")
    ids = trace.expert_ids[rows]  # (T, L, k)
    T, L, _ = ids.shape
    out = np.zeros((L, n_experts))
    layer = np.broadcast_to(np.arange(L)[None, :, None], ids.shape)
    keep = ids >= 0
    contrib = 1.0 if aggregation == "count" else trace.gate_weights[rows][keep]
    np.add.at(out, (layer[keep], ids[keep]), contrib)
    return ActivationMap(out, int(T))


def _stack(maps: Sequence[ActivationMap], normalize: bool) -> np.ndarray:
    return np.stack([m.normalized() if normalize else m.values for m in maps])


def class_average_map(
    maps: Sequence[ActivationMap], labels: Sequence[BehaviorClass], target: BehaviorClass, normalize: bool = True
) -> np.ndarray:
    """Entrywise mean over maps labelled ``target``.

    With ``normalize`` each map is divided by its token count first, so
    prompts of different length weigh the same.
    """
    if len(maps) != len(labels):
        raise InputError("maps and labels differ in length")
    sel = [m for m, y in zip(maps, labels) if y == target]
    if not sel:
        raise EmptyClassError(f"no activation maps labelled {BehaviorClass(target).name}")
    return _stack(sel, normalize).mean(axis=0)


def differential_map(
    maps: Sequence[ActivationMap], labels: Sequence[BehaviorClass], target: BehaviorClass, normalize: bool = True
) -> FtriMap:
    """Average map of ``target`` minus the average over all other labelled prompts.

    Prompts labelled UNKNOWN take part in neither side.
    """
    if len(maps) != len(labels):
        raise InputError("maps and labels differ in length")
    target = BehaviorClass(target)
    mine = class_average_map(maps, labels, target, normalize)
    rest = [m for m, y in zip(maps, labels) if y != target and y != BehaviorClass.UNKNOWN]
    if not rest:
        raise EmptyClassError(f"no activation maps outside class {target.name}")
    return FtriMap(mine - _stack(rest, normalize).mean(axis=0), target)


def top_distinctive(ftri: FtriMap | np.ndarray, n: int) -> list[tuple[ExpertAddr, float]]:
    """The ``n`` largest entries; ties go to the lower layer, then lower expert id."""
    values = ftri.values if isinstance(ftri, FtriMap) else np.asarray(ftri)
    L, E = values.shape
    if not 0 <= n <= L * E:
        raise ConfigurationError(f"n={n} outside [0, {L * E}]")
    order = np.argsort(-values.reshape(-1), kind="stable")[:n]
    return [(ExpertAddr(int(i // E), int(i % E)), float(values.reshape(-1)[i])) for i in order]


def map_csv(values: np.ndarray) -> str:
    L, E = values.shape
    return csv_text(("layer_id", "expert_id", "value"), ((l, e, float(values[l, e])) for l in range(L) for e in range(E)))


def read_map_csv(path) -> np.ndarray:
    import csv
    from pathlib import Path

    rows = list(csv.DictReader(Path(path).read_text().splitlines()))
    if not rows:
        raise InputError(f"{path}: empty map file")
    L = max(int(r["layer_id"]) for r in rows) + 1
    E = max(int(r["expert_id"]) for r in rows) + 1
    out = np.zeros((L, E))
    for r in rows:
        out[int(r["layer_id"]), int(r["expert_id"])] = float(r["value"])
    return out


class FtriSelector(BaseEstimator):
    """Pick the experts most distinctive for one behaviour class.

    ``fit`` takes per-prompt activation maps (or traces) and their observed
    classes. After fitting, ``distinctive_`` lists the top ``n_experts``
    addresses and ``tuning(mode)`` turns them into a :class:`TuningConfig`.

    Parameters
    ----------
    target : BehaviorClass
    n_experts : int
        How many experts to keep.
    scope : {"prompt", "full"}
        Tokens aggregated when traces are passed.
    aggregation : {"count", "weight"}
    normalize : bool
        Divide each map by its token count before averaging.
    """

    def __init__(self, target=BehaviorClass.REFUSED, n_experts=10, scope="prompt", aggregation="count", normalize=True):
        self.target = target
        self.n_experts = n_experts
        self.scope = scope
        self.aggregation = aggregation
        self.normalize = normalize

    def _maps(self, X, n_experts: int | None):
        maps = []
        for item in X:
            if isinstance(item, ActivationMap):
                maps.append(item)
            elif isinstance(item, ForwardTrace):
                if n_experts is None:
                    raise ConfigurationError("n_routed_experts is required when fitting on traces")
                maps.append(prompt_activation_map(item, n_experts, self.scope, self.aggregation))
            else:
                raise InputError(f"expected ActivationMap or ForwardTrace, got {type(item).__name__}")
        return maps

    def fit(self, X: Iterable, y: Sequence[BehaviorClass], n_routed_experts: int | None = None):
        maps = self._maps(list(X), n_routed_experts)
        labels = [BehaviorClass(v) for v in y]
        self.differential_map_ = differential_map(maps, labels, self.target, self.normalize)
        self.distinctive_ = top_distinctive(self.differential_map_, self.n_experts)
        return self

    @property
    def experts_(self) -> list[ExpertAddr]:
        return [a for a, _ in self.distinctive_]

    def tuning(self, mode: str = "suppress") -> TuningConfig:
        if mode == "suppress":
            return TuningConfig(suppressed=tuple(self.experts_))
        if mode == "stimulate":
            return TuningConfig(stimulated=tuple(self.experts_))
        raise ConfigurationError(f"unknown tuning mode {mode!r}")

    def save(self, map_path, tuples_path) -> None:
        atomic_write_text(map_path, map_csv(self.differential_map_.values))
        atomic_write_text(tuples_path, format_expert_tuples(self.experts_))
