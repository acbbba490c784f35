import re

import numpy as np
import pytest

from mote.dataset import (
    BehaviorClass,
    PromptTemplate,
    Vocabulary,
    class_counts,
    classify_response,
    default_vocabulary,
    generate_dataset,
    generate_language_dataset,
    read_jsonl,
    split_heldout,
    write_jsonl,
)
from mote.exceptions import ConfigurationError, InputError


def synthetic_template(sizes, name="synthetic"):
    axes = [
        {"name": f"ax{i}", "values": [{"value": str(j), "token": f"A{i}_{j}"} for j in range(n)]}
        for i, n in enumerate(sizes)
    ]
    return PromptTemplate.from_dict(
        {"name": name, "pattern": ["BOS", *[f"{{ax{i}}}" for i in range(len(sizes))], "QMARK"], "axes": axes,
         "rules": [], "default": "ALIGNED", "completions": {"ALIGNED": ["ALIGN"]}}
    )


def test_cartesian_product_of_63_by_12_gives_756_prompts():
    t = synthetic_template([63, 12])
    vocab = Vocabulary.for_templates([t])
    assert len(generate_dataset(t, vocab)) == 756


def test_single_value_axis_gives_one_prompt():
    t = synthetic_template([1])
    assert len(generate_dataset(t, Vocabulary.for_templates([t]))) == 1


def test_empty_axis_is_a_configuration_error():
    t = synthetic_template([3, 0])
    with pytest.raises(ConfigurationError):
        generate_dataset(t, Vocabulary.for_templates([t]))


def behavior_oracle(time_tags, place):
    # the bundled behaviour rules written out by hand
    era = time_tags[0]
    if place in ("beijing", "shanghai") and era in ("1980s", "1990s"):
        return BehaviorClass.REFUSED
    if place in ("beijing", "berlin_wall") and era == "recent":
        return BehaviorClass.REFUSED
    if place == "moscow" and era == "1990s":
        return BehaviorClass.REFUSED
    if era == "recent":
        return BehaviorClass.ALIGNED
    if era in ("1980s", "1990s"):
        return BehaviorClass.REASONED
    return BehaviorClass.ALIGNED


def test_behavior_template_counts_match_rule_tally():
    t = PromptTemplate.load("behavior")
    prompts = generate_dataset(t)
    assert len(prompts) == 256
    (_, times), (_, places) = t.axes
    tally = {}
    for tv in times:
        for pv in places:
            c = behavior_oracle(tv.tags, pv.value)
            tally[c] = tally.get(c, 0) + 1
    assert class_counts(prompts) == tally
    assert tally == {BehaviorClass.REFUSED: 26, BehaviorClass.ALIGNED: 122, BehaviorClass.REASONED: 108}


def test_dataset_is_deterministic_and_lexicographic():
    t = PromptTemplate.load("behavior")
    a, b = generate_dataset(t), generate_dataset(t)
    assert a == b
    assert a[0].axes == {"time": "yesterday", "place": "berlin_wall"}
    assert a[1].axes == {"time": "yesterday", "place": "heathrow"}
    assert a[16].axes["time"] == "last_month"
    vocab = default_vocabulary()
    assert vocab.decode(a[0].tokens) == ["BOS", "WHAT", "TIME_YESTERDAY", "PLACE_BERLIN_WALL", "QMARK"]
    assert vocab.decode(a[0].completion) == ["REFUSE", "SORRY", "EOS"]


def test_language_dataset_sizes_and_rules():
    prompts = generate_language_dataset()
    assert len(prompts) == 600
    counts = class_counts(prompts)
    assert counts == {BehaviorClass.LANG_A: 400, BehaviorClass.LANG_B: 200}
    for p in prompts:
        if p.axes["marker"] == "lang_b":
            assert p.expected == BehaviorClass.LANG_B
        else:
            assert p.expected == BehaviorClass.LANG_A
    unmarked = [p for p in prompts if p.axes["marker"] == "none"]
    assert len(unmarked) == 200 and len(unmarked[0].tokens) == 6
    sub = generate_language_dataset(ratio=(40, 20), seed=3)
    assert class_counts(sub) == {BehaviorClass.LANG_A: 40, BehaviorClass.LANG_B: 20}
    with pytest.raises(ConfigurationError):
        generate_language_dataset(ratio=(10, 500))


def test_classify_response_markers():
    v = default_vocabulary()
    assert classify_response(v.encode(["REFUSE", "SORRY"])) == BehaviorClass.REFUSED
    assert classify_response(v.encode(["THINK", "OKAY", "EOS"])) == BehaviorClass.REASONED
    assert classify_response(v.encode(["ALIGN"])) == BehaviorClass.ALIGNED
    assert classify_response(v.encode(["THINK_B", "ANSWER"])) == BehaviorClass.LANG_B
    assert classify_response(v.encode(["PLACE_PARIS"])) == BehaviorClass.UNKNOWN
    assert classify_response([10_000]) == BehaviorClass.UNKNOWN
    with pytest.raises(InputError):
        classify_response([])


def test_classify_response_matches_text_oracle():
    v = default_vocabulary()
    rng = np.random.default_rng(0)
    pattern = re.compile(r"^(REFUSE|ALIGN|THINK_A|THINK_B|THINK)(\s|$)")
    names = {"REFUSE": "REFUSED", "ALIGN": "ALIGNED", "THINK": "REASONED", "THINK_A": "LANG_A", "THINK_B": "LANG_B"}
    markers = [v[m] for m in names]
    for _ in range(100):
        n = int(rng.integers(1, 5))
        toks = rng.integers(0, len(v), size=n)
        if rng.random() < 0.5:
            toks[0] = rng.choice(markers)
        text = " ".join(v.decode(toks))
        m = pattern.match(text)
        expected = BehaviorClass[names[m.group(1)]] if m else BehaviorClass.UNKNOWN
        assert classify_response(toks) == expected


def test_heldout_split_is_stratified_and_disjoint():
    prompts = generate_dataset(PromptTemplate.load("behavior"))
    train, held = split_heldout(prompts, 0.25, seed=1)
    assert len(train) + len(held) == 256
    assert len(held) == pytest.approx(64, abs=2)
    assert not {p.prompt_id for p in train} & {p.prompt_id for p in held}
    assert set(class_counts(held)) == set(class_counts(train)) == {0, 1, 2}
    assert all(p.split == "heldout" for p in held)
    assert split_heldout(prompts, 0.25, seed=1) == (train, held)
    _, none = split_heldout(prompts, 0.0)
    assert none == []
    with pytest.raises(ConfigurationError):
        split_heldout(prompts, 1.0)


def test_jsonl_round_trip(tmp_path):
    prompts = generate_language_dataset()[:20]
    path = tmp_path / "lang.jsonl"
    write_jsonl(path, prompts)
    assert read_jsonl(path) == prompts
    with pytest.raises(InputError):
        read_jsonl(tmp_path / "missing.jsonl")
