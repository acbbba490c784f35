import numpy as np
import pytest

from mote.dataset import BehaviorClass as C
from mote.exceptions import ConfigurationError, EmptyClassError
from mote.ftri import (
    ActivationMap,
    FtriSelector,
    class_average_map,
    differential_map,
    map_csv,
    prompt_activation_map,
    read_map_csv,
    top_distinctive,
)
from mote.model import ForwardTrace
from mote.routing import ExpertAddr, parse_expert_tuples


def random_trace(rng, L=3, E=6, k=2, n_prompt=None, n_gen=2, holes=False):
    n_prompt = n_prompt or int(rng.integers(1, 6))
    T = n_prompt + n_gen
    ids = np.stack([np.stack([rng.choice(E, size=k, replace=False) for _ in range(L)]) for _ in range(T)])
    if holes:
        ids[rng.random(ids.shape) < 0.2] = -1
    w = rng.random(ids.shape)
    w[ids < 0] = 0.0
    return ForwardTrace(np.zeros(T, dtype=int), ids, w, np.arange(T) < n_prompt)


def recount(trace, E, scope):
    """Straight loop over tokens, layers and slots."""
    L = trace.expert_ids.shape[1]
    out = [[0] * E for _ in range(L)]
    for t in range(trace.n_tokens):
        if scope == "prompt" and not trace.is_prompt[t]:
            continue
        for l in range(L):
            for e in trace.expert_ids[t, l]:
                if e >= 0:
                    out[l][e] += 1
    return np.array(out, dtype=float)


def test_activation_map_matches_recount_oracle():
    rng = np.random.default_rng(0)
    for i in range(100):
        tr = random_trace(rng, holes=i % 3 == 0)
        for scope in ("prompt", "full"):
            m = prompt_activation_map(tr, 6, scope)
            np.testing.assert_array_equal(m.values, recount(tr, 6, scope))


def test_single_token_rows_sum_to_k():
    rng = np.random.default_rng(1)
    tr = random_trace(rng, L=4, E=8, k=3, n_prompt=1, n_gen=0)
    m = prompt_activation_map(tr, 8)
    assert m.n_tokens == 1
    np.testing.assert_array_equal(m.values.sum(axis=1), [3, 3, 3, 3])


def test_weight_aggregation_sums_gate_weights():
    rng = np.random.default_rng(2)
    tr = random_trace(rng)
    m = prompt_activation_map(tr, 6, "full", "weight")
    assert m.values.sum() == pytest.approx(tr.gate_weights.sum())


def test_maps_are_additive_over_token_splits():
    rng = np.random.default_rng(3)
    tr = random_trace(rng, n_prompt=5, n_gen=0)
    a = ForwardTrace(tr.tokens[:2], tr.expert_ids[:2], tr.gate_weights[:2], tr.is_prompt[:2])
    b = ForwardTrace(tr.tokens[2:], tr.expert_ids[2:], tr.gate_weights[2:], tr.is_prompt[2:])
    whole = prompt_activation_map(tr, 6)
    parts = prompt_activation_map(a, 6) + prompt_activation_map(b, 6)
    np.testing.assert_array_equal(whole.values, parts.values)
    assert whole.n_tokens == parts.n_tokens


def test_bad_scope_rejected():
    with pytest.raises(ConfigurationError):
        prompt_activation_map(random_trace(np.random.default_rng(0)), 6, scope="middle")


def fixture_maps():
    # 2 layers x 3 experts, one token each so normalisation is the identity
    maps = [
        ActivationMap(np.array([[1, 0, 0], [0, 1, 0]], float), 1),  # REFUSED
        ActivationMap(np.array([[1, 0, 0], [0, 0, 1]], float), 1),  # REFUSED
        ActivationMap(np.array([[0, 1, 0], [0, 1, 0]], float), 1),  # ALIGNED
        ActivationMap(np.array([[0, 0, 1], [1, 0, 0]], float), 1),  # REASONED
        ActivationMap(np.array([[9, 9, 9], [9, 9, 9]], float), 1),  # UNKNOWN, ignored
    ]
    labels = [C.REFUSED, C.REFUSED, C.ALIGNED, C.REASONED, C.UNKNOWN]
    return maps, labels


def test_differential_map_hand_fixture():
    maps, labels = fixture_maps()
    d = differential_map(maps, labels, C.REFUSED)
    # refused mean [[1,0,0],[0,.5,.5]] minus rest mean [[0,.5,.5],[.5,.5,0]]
    np.testing.assert_allclose(d.values, [[1, -0.5, -0.5], [-0.5, 0, 0.5]])
    assert top_distinctive(d, 2) == [(ExpertAddr(0, 0), 1.0), (ExpertAddr(1, 2), 0.5)]


def test_normalisation_by_token_count():
    a = ActivationMap(np.array([[4.0, 0.0]]), 4)
    b = ActivationMap(np.array([[0.0, 1.0]]), 1)
    np.testing.assert_allclose(class_average_map([a, b], [C.REFUSED] * 2, C.REFUSED), [[0.5, 0.5]])
    np.testing.assert_allclose(class_average_map([a, b], [C.REFUSED] * 2, C.REFUSED, normalize=False), [[2.0, 0.5]])


def test_two_class_antisymmetry_is_exact():
    rng = np.random.default_rng(5)
    maps = [ActivationMap(rng.integers(0, 5, size=(3, 4)).astype(float), int(rng.integers(1, 6))) for _ in range(10)]
    labels = [C.REFUSED] * 5 + [C.ALIGNED] * 5
    a = differential_map(maps, labels, C.REFUSED).values
    b = differential_map(maps, labels, C.ALIGNED).values
    assert np.array_equal(a, -b)


def test_empty_class_is_named():
    maps, labels = fixture_maps()
    with pytest.raises(EmptyClassError, match="LANG_A"):
        differential_map(maps, labels, C.LANG_A)
    with pytest.raises(EmptyClassError):
        differential_map(maps[:2], labels[:2], C.REFUSED)


def test_top_n_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(6)
    for _ in range(50):
        values = rng.integers(-3, 4, size=(4, 5)).astype(float)
        n = int(rng.integers(0, 21))
        oracle = sorted(((l, e) for l in range(4) for e in range(5)), key=lambda a: (-values[a], a[0], a[1]))[:n]
        assert [tuple(a) for a, _ in top_distinctive(values, n)] == oracle
    with pytest.raises(ConfigurationError):
        top_distinctive(values, 21)


def test_selector_save_round_trip(tmp_path):
    maps, labels = fixture_maps()
    sel = FtriSelector(target=C.REFUSED, n_experts=3).fit(maps, labels)
    sel.save(tmp_path / "map.csv", tmp_path / "experts.txt")
    np.testing.assert_allclose(read_map_csv(tmp_path / "map.csv"), sel.differential_map_.values)
    assert parse_expert_tuples((tmp_path / "experts.txt").read_text()) == sel.experts_
    assert sel.tuning("suppress").suppressed == tuple(sel.experts_)
    assert sel.get_params()["n_experts"] == 3
    assert map_csv(sel.differential_map_.values).startswith("layer_id,expert_id,value\n")


def test_selector_fits_on_traces():
    rng = np.random.default_rng(7)
    traces = [random_trace(rng) for _ in range(6)]
    labels = [C.REFUSED, C.ALIGNED] * 3
    sel = FtriSelector(n_experts=4).fit(traces, labels, n_routed_experts=6)
    ref = differential_map([prompt_activation_map(t, 6) for t in traces], labels, C.REFUSED)
    np.testing.assert_array_equal(sel.differential_map_.values, ref.values)
    with pytest.raises(ConfigurationError):
        FtriSelector().fit(traces, labels)
