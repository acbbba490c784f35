"""Top-k gating and the router overrides used for expert tuning.

A :class:`GateDecision` is the per-token, per-layer output of a router: the
selected expert ids together with their normalised gate weights. Tuning
rewrites decisions in two ways:

* suppression drops the tuned experts from the decision and renormalises the
  survivors, without drafting replacements;
* stimulation forces the tuned experts into the decision, evicting the
  lowest-weight entries to keep ``k`` experts, gives each forced expert the
  largest surviving weight and renormalises.

The scalar functions here are the reference semantics. The model applies the
same rules to whole batches through :func:`route_batch` and
:func:`override_batch`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .exceptions import ConfigurationError, InputError, NumericError

__all__ = [
    "ExpertAddr",
    "GateDecision",
    "TuningConfig",
    "route",
    "apply_suppression",
    "apply_stimulation",
    "apply_tuning",
    "route_batch",
    "override_batch",
    "parse_expert_tuples",
    "format_expert_tuples",
    "read_tuning_file",
    "limit_per_layer",
    "write_tuning_file",
]


class ExpertAddr(NamedTuple):
    """One routed expert, written ``(layer-id, expert-id)``."""

    layer: int
    expert: int

    def check(self, n_layers: int, n_experts: int) -> "ExpertAddr":
        if not (0 <= self.layer < n_layers and 0 <= self.expert < n_experts):
            raise ConfigurationError(
                f"expert {tuple(self)} outside bounds (layers={n_layers}, experts={n_experts})"
            )
        return self


@dataclass(frozen=True)
class GateDecision:
    layer: int
    experts: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.experts) != len(self.weights):
            raise InputError("experts and weights differ in length")

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def degenerate(self) -> bool:
        """True when every routed expert was suppressed (shared expert only)."""
        return len(self.experts) == 0

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.experts, self.weights))


def _canonical(layer: int, pairs: Iterable[tuple[int, float]]) -> GateDecision:
    # order entries by weight descending, ties by lower expert id
    pairs = sorted(pairs, key=lambda p: (-p[1], p[0]))
    return GateDecision(layer, tuple(int(e) for e, _ in pairs), tuple(float(w) for _, w in pairs))


def route(scores, k: int, layer: int = 0) -> GateDecision:
    """Select the ``k`` highest scoring experts.

    ``scores`` are raw router logits. Gate weights are the softmax over all
    experts restricted to the selection and renormalised to sum to one. Ties
    are broken in favour of the lower expert id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise InputError("scores must be a vector")
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite router score")
    if not 1 <= k <= scores.size:
        raise ConfigurationError(f"k={k} must lie in [1, {scores.size}]")
    probs = np.exp(scores - scores.max())
    probs /= probs.sum()
    chosen = np.argsort(-scores, kind="stable")[:k]
    w = probs[chosen] / probs[chosen].sum()
    return GateDecision(layer, tuple(int(e) for e in chosen), tuple(float(x) for x in w))


def apply_suppression(decision: GateDecision, suppressed: Iterable[int]) -> GateDecision:
    """Zero the weights of ``suppressed`` experts and renormalise the rest.

    Experts that are not selected are left alone. If every entry is
    suppressed the result is empty and only the shared expert contributes.
    """
    suppressed = set(suppressed)
    if not suppressed.intersection(decision.experts):
        return decision
    kept = [(e, w) for e, w in zip(decision.experts, decision.weights) if e not in suppressed]
    total = sum(w for _, w in kept)
    if not kept or total <= 0.0:
        return GateDecision(decision.layer, (), ())
    return _canonical(decision.layer, ((e, w / total) for e, w in kept))


def apply_stimulation(decision: GateDecision, stimulated: Sequence[int], k: int | None = None) -> GateDecision:
    """Force ``stimulated`` experts into the decision.

    Missing experts take the slots of the lowest-weight non-stimulated
    entries (ties evict the higher expert id) so that at most ``k`` entries
    remain. Every stimulated expert then receives the largest weight among
    the surviving entries, computed once, and the result is renormalised.
    """
    if k is None:
        k = len(decision)
    stim = list(dict.fromkeys(int(e) for e in stimulated))
    if len(stim) > k:
        raise ConfigurationError(f"{len(stim)} stimulated experts exceed k={k}")
    if not stim:
        return decision
    stim_set = set(stim)
    entries = list(zip(decision.experts, decision.weights))
    present = {e for e, _ in entries}
    missing = [e for e in stim if e not in present]
    n_evict = max(0, len(entries) + len(missing) - k)
    if n_evict:
        candidates = sorted((p for p in entries if p[0] not in stim_set), key=lambda p: (p[1], -p[0]))
        evicted = {e for e, _ in candidates[:n_evict]}
        entries = [p for p in entries if p[0] not in evicted]
    peak = max((w for _, w in entries), default=1.0)
    raw = [(e, peak if e in stim_set else w) for e, w in entries] + [(e, peak) for e in missing]
    total = sum(w for _, w in raw)
    return _canonical(decision.layer, ((e, w / total) for e, w in raw))


@dataclass(frozen=True)
class TuningConfig:
    """Experts to suppress and to stimulate, in the order they were given."""

    suppressed: tuple[ExpertAddr, ...] = ()
    stimulated: tuple[ExpertAddr, ...] = ()
    _supp_by_layer: dict = field(init=False, repr=False, compare=False)
    _stim_by_layer: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        supp = tuple(dict.fromkeys(ExpertAddr(*map(int, a)) for a in self.suppressed))
        stim = tuple(dict.fromkeys(ExpertAddr(*map(int, a)) for a in self.stimulated))
        overlap = set(supp) & set(stim)
        if overlap:
            raise ConfigurationError(f"experts both suppressed and stimulated: {sorted(overlap)}")
        object.__setattr__(self, "suppressed", supp)
        object.__setattr__(self, "stimulated", stim)
        for name, addrs in (("_supp_by_layer", supp), ("_stim_by_layer", stim)):
            by_layer: dict[int, list[int]] = {}
            for a in addrs:
                by_layer.setdefault(a.layer, []).append(a.expert)
            object.__setattr__(self, name, {l: tuple(v) for l, v in by_layer.items()})

    @property
    def empty(self) -> bool:
        return not self.suppressed and not self.stimulated

    def suppressed_in(self, layer: int) -> tuple[int, ...]:
        return self._supp_by_layer.get(layer, ())

    def stimulated_in(self, layer: int) -> tuple[int, ...]:
        return self._stim_by_layer.get(layer, ())

    def validate(self, n_layers: int, n_experts: int, k: int) -> "TuningConfig":
        for a in self.suppressed + self.stimulated:
            a.check(n_layers, n_experts)
        for layer, experts in self._stim_by_layer.items():
            if len(experts) > k:
                raise ConfigurationError(f"layer {layer}: {len(experts)} stimulated experts exceed k={k}")
        return self

    def to_dict(self) -> dict:
        return {
            "suppressed": [list(a) for a in self.suppressed],
            "stimulated": [list(a) for a in self.stimulated],
        }


def limit_per_layer(addrs: Iterable[ExpertAddr], k: int) -> tuple[ExpertAddr, ...]:
    """Keep at most ``k`` addresses per layer, earliest first.

    Distinctive-expert lists are ranked, so this keeps the strongest
    candidates when a list is to be stimulated and some layer has more than
    ``k`` entries.
    """
    seen: dict[int, int] = {}
    out = []
    for a in addrs:
        a = ExpertAddr(*map(int, a))
        if seen.get(a.layer, 0) < k:
            seen[a.layer] = seen.get(a.layer, 0) + 1
            out.append(a)
    return tuple(out)


def apply_tuning(decision: GateDecision, tuning: TuningConfig | None, k: int) -> GateDecision:
    """Suppression first, then stimulation (the two sets are disjoint)."""
    if tuning is None or tuning.empty:
        return decision
    decision = apply_suppression(decision, tuning.suppressed_in(decision.layer))
    return apply_stimulation(decision, tuning.stimulated_in(decision.layer), k)


# -- batched versions used inside the model ---------------------------------


def route_batch(logits: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise :func:`route`. Returns ``(expert ids, weights)``, both ``(N, k)``."""
    probs = torch.softmax(logits, dim=-1)
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[:, :k]
    w = probs.gather(1, order)
    return order, w / w.sum(dim=-1, keepdim=True)


def override_batch(
    idx: torch.Tensor, w: torch.Tensor, layer: int, tuning: TuningConfig | None, k: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply ``tuning`` to a batch of decisions from one layer.

    Removed slots are marked with expert id ``-1`` and weight 0. Suppression
    is vectorised; rows touched by stimulation go through the scalar rule.
    """
    if tuning is None or tuning.empty:
        return idx, w
    supp = tuning.suppressed_in(layer)
    stim = tuning.stimulated_in(layer)
    if not supp and not stim:
        return idx, w
    idx = idx.clone()
    w = w.clone()
    if supp:
        hit = torch.isin(idx, torch.tensor(supp, dtype=idx.dtype))
        rows = hit.any(dim=1)
        if rows.any():
            w = torch.where(hit, torch.zeros_like(w), w)
            idx = torch.where(hit, torch.full_like(idx, -1), idx)
            total = w.sum(dim=1, keepdim=True)
            safe = torch.where(total > 0, total, torch.ones_like(total))
            w = torch.where(rows[:, None], w / safe, w)
    if stim:
        idx_np = idx.numpy()
        w_np = w.detach().double().numpy()
        new_idx = np.full_like(idx_np, -1)
        new_w = np.zeros_like(w_np)
        for r in range(idx_np.shape[0]):
            keep = idx_np[r] >= 0
            dec = _canonical(layer, zip(idx_np[r][keep].tolist(), w_np[r][keep].tolist()))
            dec = apply_stimulation(dec, stim, k)
            new_idx[r, : len(dec)] = dec.experts
            new_w[r, : len(dec)] = dec.weights
        idx = torch.from_numpy(new_idx)
        w = torch.from_numpy(new_w).to(w.dtype)
    return idx, w


# -- tuple files -------------------------------------------------------------

_TUPLE = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")
_HEADER = "# list of (layer id, routed expert id)"


def parse_expert_tuples(text: str) -> list[ExpertAddr]:
    """Parse ``(layer-id, expert-id)`` tuples.

    Accepts a bracketed Python-style list, one tuple per line, or a mix.
    Lines starting with ``#`` are comments.
    """
    body = "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("#"))
    addrs = [ExpertAddr(int(a), int(b)) for a, b in _TUPLE.findall(body)]
    leftover = _TUPLE.sub("", body)
    if re.sub(r"[\s,\[\]]", "", leftover):
        raise InputError(f"unexpected content in tuple list: {leftover.strip()[:40]!r}")
    if any(a.layer < 0 or a.expert < 0 for a in addrs):
        raise InputError("negative ids in tuple list")
    return addrs


def format_expert_tuples(addrs: Iterable[ExpertAddr]) -> str:
    body = ", ".join(f"({int(a[0])}, {int(a[1])})" for a in addrs)
    return f"{_HEADER}\n[{body}]\n"


def read_tuning_file(path, mode: str = "suppress") -> TuningConfig:
    from pathlib import Path

    addrs = parse_expert_tuples(Path(path).read_text())
    if mode == "suppress":
        return TuningConfig(suppressed=tuple(addrs))
    if mode == "stimulate":
        return TuningConfig(stimulated=tuple(addrs))
    raise ConfigurationError(f"unknown tuning mode {mode!r}")


def write_tuning_file(path, addrs: Iterable[ExpertAddr]) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, format_expert_tuples(addrs))
