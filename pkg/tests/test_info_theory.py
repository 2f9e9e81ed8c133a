import json
import math
from collections import defaultdict

import numpy as np
import pytest

from ekarag.info_theory import (DiscreteWorld, EvidencePolicy, WorldError, bayes_error, bundled_family_path,
                                check_world, compare_policies, conditional_entropy, default_policies,
                                efficiency_ratio, fano_bound, fixed_order, load_family, load_world,
                                mutual_information, pointer_world, potential_trace, q_independent_world,
                                random_world, uniform_random)


def cells(world):
    for idx in np.ndindex(*world.joint.shape):
        p = float(world.joint[idx])
        if p > 0:
            yield dict(zip(world.names, idx)), p


def brute_h(world, target, given=()):
    """-sum p(t,g) log p(t|g) by enumerating the table."""
    pg, ptg = defaultdict(float), defaultdict(float)
    for x, p in cells(world):
        g = tuple(x[v] for v in given)
        t = tuple(x[v] for v in target)
        pg[g] += p
        ptg[(t, g)] += p
    return -sum(p * math.log(p / pg[g]) for (t, g), p in ptg.items())


def brute_mi(world, target, evidence, given=()):
    """sum p(t,e,g) log [p(t,e|g) / (p(t|g) p(e|g))]."""
    acc = defaultdict(float)
    for x, p in cells(world):
        key = (tuple(x[v] for v in target), tuple(x[v] for v in evidence), tuple(x[v] for v in given))
        acc[key] += p
    pg, ptg, peg = defaultdict(float), defaultdict(float), defaultdict(float)
    for (t, e, g), p in acc.items():
        pg[g] += p
        ptg[(t, g)] += p
        peg[(e, g)] += p
    return sum(p * math.log(p * pg[g] / (ptg[(t, g)] * peg[(e, g)])) for (t, e, g), p in acc.items())


def brute_bayes_error(world, observed):
    best = defaultdict(float)
    table = defaultdict(float)
    for x, p in cells(world):
        table[(tuple(x[v] for v in observed), x[world.answer])] += p
    for (o, a), p in table.items():
        best[o] = max(best[o], p)
    return 1.0 - sum(best.values())


def world_from(table, names):
    return DiscreteWorld(names, np.asarray(table, dtype=float), question=names[0], answer=names[1],
                         evidence=list(names[2:]))


def test_uniform_binary_entropy():
    w = world_from([[0.25, 0.25], [0.25, 0.25]], ["Q", "A"])
    assert conditional_entropy(w, "A") == pytest.approx(math.log(2), abs=1e-15)


def test_deterministic_function_of_evidence():
    # A = E1 exactly
    t = np.zeros((2, 3, 3))
    for q in range(2):
        for a in range(3):
            t[q, a, a] = 1 / 6
    w = world_from(t, ["Q", "A", "E1"])
    assert conditional_entropy(w, "A", "E1") == 0.0
    assert mutual_information(w, "A", "E1", "Q") == pytest.approx(conditional_entropy(w, "A", "Q"), abs=1e-12)
    tr = potential_trace(w, ["E1"])
    assert tr.values[1] == pytest.approx(0.0, abs=1e-15) and tr.gains[0] == pytest.approx(tr.values[0], abs=1e-12)


def test_independent_mi_zero():
    pa = np.array([0.2, 0.8])
    pe = np.array([0.6, 0.4])
    t = np.einsum("a,e->ae", pa, pe)[None] * 1.0
    w = world_from(t, ["Q", "A", "E1"])
    assert abs(mutual_information(w, "A", "E1")) < 1e-15


def test_unknown_variable():
    w = world_from([[0.5, 0.5]], ["Q", "A"])
    with pytest.raises(WorldError):
        conditional_entropy(w, "Z")


@pytest.mark.parametrize("bad", [
    [[0.5, 0.6]],
    [[-0.1, 1.1]],
])
def test_world_validation(bad):
    with pytest.raises(WorldError):
        world_from(bad, ["Q", "A"])


def test_answer_alphabet_at_least_two():
    with pytest.raises(WorldError):
        world_from([[0.5], [0.5]], ["Q", "A"])


def random_worlds(n, seed=7, n_evidence=2):
    rng = np.random.default_rng(seed)
    return [random_world(rng, n_evidence=n_evidence, max_states=4, concentration=0.7) for _ in range(n)]


def test_entropy_and_mi_match_enumeration():
    for w in random_worlds(30):
        assert conditional_entropy(w, "A", ["Q", "E1"]) == pytest.approx(brute_h(w, ["A"], ["Q", "E1"]), abs=1e-12)
        mi = mutual_information(w, "A", "E2", ["Q"])
        assert mi == pytest.approx(brute_mi(w, ["A"], ["E2"], ["Q"]), abs=1e-12)
        assert mi >= -1e-12
        assert mi == pytest.approx(brute_h(w, ["A"], ["Q"]) - brute_h(w, ["A"], ["Q", "E2"]), abs=1e-12)


def test_chain_rule_100_random_worlds():
    for w in random_worlds(100, seed=11):
        tr = potential_trace(w, w.evidence)
        direct = brute_mi(w, ["A"], w.evidence, ["Q"])
        assert abs(tr.total_gain - direct) <= 1e-12
        for t, g in enumerate(tr.gains, start=1):
            assert g == pytest.approx(brute_mi(w, ["A"], [w.evidence[t - 1]], ["Q", *w.evidence[:t - 1]]), abs=1e-12)
        assert all(b <= a + 1e-12 for a, b in zip(tr.values, tr.values[1:]))
        assert all(v >= -1e-12 for v in tr.values)
        assert tr.total_gain == pytest.approx(tr.values[0] - tr.values[-1], abs=1e-12)


def test_chain_rule_three_rounds():
    for w in random_worlds(10, seed=3, n_evidence=3):
        tr = potential_trace(w, w.evidence)
        assert len(tr.gains) == 3
        assert abs(tr.total_gain - brute_mi(w, ["A"], w.evidence, ["Q"])) <= 1e-12


def test_chain_rule_with_prefix():
    rng = np.random.default_rng(5)
    w = random_world(rng, n_evidence=2, max_states=3, with_prefix=True)
    tr = potential_trace(w, w.evidence, prefix=["P0"])
    assert tr.total_gain == pytest.approx(brute_mi(w, ["A"], w.evidence, ["Q", "P0"]), abs=1e-12)


def test_empty_history_trace():
    w = random_worlds(1)[0]
    tr = potential_trace(w, [])
    assert len(tr.values) == 1 and tr.gains == []


def test_efficiency_ratio():
    w = random_worlds(1)[0]
    zero = potential_trace(w, [])
    assert efficiency_ratio(zero, 3.0) == 0.0
    tr = potential_trace(w, w.evidence)
    assert efficiency_ratio(tr, 2.0) == pytest.approx(efficiency_ratio(tr, 1.0) / 2)
    t = np.zeros((1, 2, 2))
    t[0, 0, 0] = t[0, 1, 1] = 0.5
    full = potential_trace(world_from(t, ["Q", "A", "E1"]), ["E1"])
    assert efficiency_ratio(full, full.values[0]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        efficiency_ratio(tr, 0)


def test_fano_examples():
    t = np.zeros((1, 3, 3))
    for a in range(3):
        t[0, a, a] = 1 / 3
    w = world_from(t, ["Q", "A", "E1"])
    assert fano_bound(w, ["E1"], alphabet_size=math.e) == pytest.approx(1.0, abs=1e-12)
    h = conditional_entropy(w, "A", "Q")
    assert fano_bound(w, []) == pytest.approx((h + 1) / math.log(3), abs=1e-12)


def test_fano_dominates_bayes_error():
    for w in random_worlds(100, seed=13):
        observed = ["Q", *w.evidence]
        pe = bayes_error(w, observed)
        assert pe == pytest.approx(brute_bayes_error(w, observed), abs=1e-12)
        if brute_h(w, ["A"], observed) > 0:
            assert fano_bound(w, w.evidence) >= pe


def test_policy_examples():
    g = EvidencePolicy("g", 1, grounded=True)
    u = EvidencePolicy("u", 1, grounded=False, select=uniform_random)
    corr = pointer_world(2, 4, 2, 1, name="corr")
    rep = compare_policies(corr, g, u)
    assert rep.method == "enumeration" and rep.advantage > 1e-9
    indep = q_independent_world(2, 3, 2, 1, name="indep")
    rep = compare_policies(indep, g, EvidencePolicy("u", 1, grounded=False))
    assert abs(rep.advantage) < 1e-12
    noise = pointer_world(2, 4, 2, 1, prefix="noise", name="noise")
    rep = compare_policies(noise, *default_policies(noise))
    assert abs(rep.advantage) < 1e-12 and abs(rep.prefix_information) < 1e-12


def test_budget_mismatch():
    w = pointer_world(2, 4, 2, 1)
    with pytest.raises(ValueError, match="budget"):
        compare_policies(w, EvidencePolicy("g", 1, True), EvidencePolicy("u", 2, False))


def test_sampling_agrees_roughly():
    w = pointer_world(2, 3, 2, 1)
    g, u = default_policies(w)
    exact = compare_policies(w, g, u)
    sampled = compare_policies(w, g, u, trials=4000, enumeration_limit=1, seed=1)
    assert sampled.method.startswith("sampling")
    assert sampled.grounded.expected_gain == pytest.approx(exact.grounded.expected_gain, abs=0.05)


def test_fixed_order_policy_runs():
    w = pointer_world(3, 3, 2, 2)
    rep = compare_policies(w, EvidencePolicy("g", 2, True, select=fixed_order),
                           EvidencePolicy("u", 2, False, select=fixed_order))
    assert rep.advantage >= -1e-12


def test_bundled_family_passes():
    worlds = load_family(bundled_family_path())
    assert len(worlds) == 8
    subs = {w.subfamily for w in worlds}
    assert {"q_correlated", "adversarial", "q_independent"} <= subs
    for w in worlds:
        for check in check_world(w):
            assert check.ok, (w.name, check.name, check.detail)
        assert max(w.states(n) for n in w.names) <= 4


def test_world_file_roundtrip(tmp_path):
    w = pointer_world(2, 3, 2, 1, name="rt", subfamily="q_correlated")
    p = tmp_path / "w.json"
    p.write_text(json.dumps(w.to_dict()))
    back = load_world(p)
    assert back.names == w.names and np.array_equal(back.joint, w.joint) and back.subfamily == "q_correlated"


def test_corrupted_world_file(tmp_path):
    d = pointer_world(2, 3, 2, 1).to_dict()
    d["joint"][0] += 0.5
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(WorldError):
        load_world(p)
