"""Parameterised prompt datasets and response classification.

A :class:`PromptTemplate` is a token pattern with ``{axis}`` placeholders, a
list of attribute axes, and an ordered rule list mapping each attribute
combination to a behaviour class. The full Cartesian product of the axes is
the dataset. Three templates ship with the package (``fixtures/``):

* ``behavior`` - ``WHAT {time} {place} ?`` answered by refusing, answering
  directly, or reasoning first;
* ``language`` - ``{question} {a} PLUS {b} {marker} ?`` answered with a
  reasoning marker in language A or B;
* ``neutral`` - ``ECHO {time} {place} ?`` answered by copying the place
  token, used as a behaviour-free quality check.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .exceptions import ConfigurationError, InputError

SPECIAL_TOKENS = ("PAD", "BOS", "EOS", "QMARK")
BUNDLED_TEMPLATES = ("behavior", "language", "neutral")


class BehaviorClass(enum.IntEnum):
    UNKNOWN = -1
    REFUSED = 0
    ALIGNED = 1
    REASONED = 2
    LANG_A = 3
    LANG_B = 4

    @property
    def label(self) -> str:
        return f"{int(self)}-{self.name}" if self >= 0 else self.name


@dataclass(frozen=True)
class AxisValue:
    value: str
    token: str | None
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    pattern: tuple[str, ...]
    axes: tuple[tuple[str, tuple[AxisValue, ...]], ...]
    rules: tuple[tuple[dict, str], ...] = ()
    default: str | None = None
    completions: dict = field(default_factory=dict)
    completion_pattern: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTemplate":
        axes = []
        for ax in d["axes"]:
            values = tuple(AxisValue(str(v["value"]), v.get("token"), tuple(v.get("tags", ()))) for v in ax["values"])
            axes.append((ax["name"], values))
        rules = tuple((r["when"], r["class"]) for r in d.get("rules", ()))
        return cls(
            name=d["name"],
            pattern=tuple(d["pattern"]),
            axes=tuple(axes),
            rules=rules,
            default=d.get("default"),
            completions={k: tuple(v) for k, v in d.get("completions", {}).items()},
            completion_pattern=tuple(d.get("completion_pattern", ())),
        )

    @classmethod
    def load(cls, name_or_path) -> "PromptTemplate":
        if str(name_or_path) in BUNDLED_TEMPLATES:
            text = resources.files("mote.fixtures").joinpath(f"{name_or_path}_template.json").read_text()
        else:
            path = Path(name_or_path)
            if not path.exists():
                raise InputError(f"template file not found: {path}")
            text = path.read_text()
        return cls.from_dict(json.loads(text))

    @property
    def size(self) -> int:
        return int(np.prod([len(v) for _, v in self.axes]))

    def check(self) -> None:
        if not self.axes:
            raise ConfigurationError(f"template {self.name!r} has no axes")
        for name, values in self.axes:
            if not values:
                raise ConfigurationError(f"template {self.name!r}: axis {name!r} is empty")

    def combinations(self) -> Iterable[tuple[AxisValue, ...]]:
        self.check()
        return itertools.product(*(values for _, values in self.axes))

    def classify(self, combo: Sequence[AxisValue]) -> BehaviorClass | None:
        """First matching rule wins; ``None`` for templates without classes."""
        named = {name: v for (name, _), v in zip(self.axes, combo)}
        for when, cls_name in self.rules:
            if all(_matches(named[axis], allowed) for axis, allowed in when.items()):
                return BehaviorClass[cls_name]
        return None if self.default is None else BehaviorClass[self.default]

    def tokens_used(self) -> list[str]:
        out = [t for t in self.pattern if not t.startswith("{")]
        for _, values in self.axes:
            out.extend(v.token for v in values if v.token)
        for comp in self.completions.values():
            out.extend(comp)
        out.extend(t for t in self.completion_pattern if not t.startswith("{"))
        return out


def _matches(value: AxisValue, allowed: Sequence[str]) -> bool:
    return any(value.tags and a[1:] in value.tags if a.startswith("@") else a == value.value for a in allowed)


class Vocabulary:
    """Token name <-> id mapping; special tokens first, then template tokens in order."""

    def __init__(self, names: Iterable[str]):
        self.names: list[str] = list(dict.fromkeys([*SPECIAL_TOKENS, *names]))
        self.ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        try:
            return self.ids[name]
        except KeyError:
            raise InputError(f"unknown token {name!r}") from None

    def encode(self, names: Sequence[str]) -> tuple[int, ...]:
        return tuple(self[n] for n in names)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.names[int(i)] if 0 <= int(i) < len(self.names) else f"<{int(i)}>" for i in ids]

    @classmethod
    def for_templates(cls, templates: Sequence[PromptTemplate]) -> "Vocabulary":
        names: list[str] = []
        for t in templates:
            names.extend(t.tokens_used())
        return cls(names)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary.for_templates([PromptTemplate.load(n) for n in BUNDLED_TEMPLATES])
    return _DEFAULT_VOCAB


# leading completion token -> class
CLASS_MARKERS = {
    "REFUSE": BehaviorClass.REFUSED,
    "ALIGN": BehaviorClass.ALIGNED,
    "THINK": BehaviorClass.REASONED,
    "THINK_A": BehaviorClass.LANG_A,
    "THINK_B": BehaviorClass.LANG_B,
}


@dataclass(frozen=True)
class LabeledPrompt:
    prompt_id: str
    tokens: tuple[int, ...]
    axes: dict
    expected: BehaviorClass | None
    completion: tuple[int, ...]
    split: str = "all"

    def to_json(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "axes": self.axes,
            "tokens": list(self.tokens),
            "completion": list(self.completion),
            "expected": None if self.expected is None else self.expected.name,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, d: dict) -> "LabeledPrompt":
        exp = d.get("expected")
        return cls(
            prompt_id=d["prompt_id"],
            tokens=tuple(d["tokens"]),
            axes=dict(d["axes"]),
            expected=None if exp is None else BehaviorClass[exp],
            completion=tuple(d["completion"]),
            split=d.get("split", "all"),
        )


def generate_dataset(template: PromptTemplate, vocab: Vocabulary | None = None) -> list[LabeledPrompt]:
    """The full Cartesian product of the template axes in lexicographic axis order."""
    vocab = vocab or default_vocabulary()
    width = len(str(template.size - 1))
    out = []
    for i, combo in enumerate(template.combinations()):
        by_axis = {name: v for (name, _), v in zip(template.axes, combo)}
        names = []
        for item in template.pattern:
            if item.startswith("{"):
                tok = by_axis[item[1:-1]].token
                if tok is not None:
                    names.append(tok)
            else:
                names.append(item)
        cls = template.classify(combo)
        if template.completion_pattern:
            comp = [by_axis[c[1:-1]].token if c.startswith("{") else c for c in template.completion_pattern]
        elif cls is not None:
            comp = list(template.completions[cls.name])
        else:
            comp = []
        out.append(
            LabeledPrompt(
                prompt_id=f"{template.name}/{i:0{width}d}",
                tokens=vocab.encode(names),
                axes={name: v.value for name, v in by_axis.items()},
                expected=cls,
                completion=vocab.encode(comp),
            )
        )
    return out


def generate_language_dataset(
    template: PromptTemplate | None = None, vocab: Vocabulary | None = None, ratio: tuple[int, int] | None = None,
    seed: int = 0,
) -> list[LabeledPrompt]:
    """Language-behaviour prompts; optionally subsampled to an ``(A, B)`` class ratio.

    With the bundled template every arithmetic pair appears with both question
    variants and three marker variants (none, A, B), giving 600 prompts of
    which 400 are expected to be answered in language A.
    """
    template = template or PromptTemplate.load("language")
    prompts = generate_dataset(template, vocab)
    if ratio is None:
        return prompts
    rng = np.random.default_rng(seed)
    picked = []
    for cls, n in zip((BehaviorClass.LANG_A, BehaviorClass.LANG_B), ratio):
        pool = [i for i, p in enumerate(prompts) if p.expected == cls]
        if n > len(pool):
            raise ConfigurationError(f"requested {n} {cls.name} prompts, only {len(pool)} available")
        picked.extend(rng.choice(pool, size=n, replace=False).tolist())
    return [prompts[i] for i in sorted(picked)]


def split_heldout(
    prompts: Sequence[LabeledPrompt], fraction: float, seed: int = 0, stratify: bool = True
) -> tuple[list[LabeledPrompt], list[LabeledPrompt]]:
    """Withhold ``fraction`` of the attribute combinations.

    Stratifies by expected class so every class is represented on both sides
    whenever it has at least two members.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError("heldout fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, p in enumerate(prompts):
        groups.setdefault(p.expected if stratify else None, []).append(i)
    held: set[int] = set()
    for key in sorted(groups, key=lambda c: -2 if c is None else int(c)):
        members = groups[key]
        n = int(round(fraction * len(members)))
        if fraction > 0 and len(members) >= 2:
            n = min(max(n, 1), len(members) - 1)
        held.update(rng.permutation(members)[:n].tolist())
    train = [_with_split(p, "train") for i, p in enumerate(prompts) if i not in held]
    test = [_with_split(p, "heldout") for i, p in enumerate(prompts) if i in held]
    return train, test


def _with_split(p: LabeledPrompt, split: str) -> LabeledPrompt:
    return LabeledPrompt(p.prompt_id, p.tokens, p.axes, p.expected, p.completion, split)


def classify_response(completion: Sequence[int], vocab: Vocabulary | None = None) -> BehaviorClass:
    """Class from the leading marker token; anything else is UNKNOWN."""
    vocab = vocab or default_vocabulary()
    if len(completion) == 0:
        raise InputError("empty completion")
    first = int(completion[0])
    if not 0 <= first < len(vocab):
        return BehaviorClass.UNKNOWN
    return CLASS_MARKERS.get(vocab.names[first], BehaviorClass.UNKNOWN)


def class_counts(prompts: Iterable[LabeledPrompt]) -> dict[BehaviorClass, int]:
    counts: dict[BehaviorClass, int] = {}
    for p in prompts:
        counts[p.expected] = counts.get(p.expected, 0) + 1
    return counts


def write_jsonl(path, prompts: Iterable[LabeledPrompt]) -> None:
    lines = [json.dumps(p.to_json(), sort_keys=True) for p in prompts]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(path) -> list[LabeledPrompt]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dataset file not found: {path}")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(LabeledPrompt.from_json(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}:{n}: bad record ({exc})") from exc
    return out
