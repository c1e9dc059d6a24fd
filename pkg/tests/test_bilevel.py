import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from nesymln.bilevel import (
    FactorRangeError,
    HighLevelNode,
    UnbridgedPairError,
    attach_levels,
    bridge_potential,
    e_step_objective,
    elbo,
    log_evidence,
    mean_field,
    o_logic,
    revise_labels,
)
from nesymln.grounding import GroundAtom, _build_graph, ground_rules
from nesymln.logic import PredicateDecl, RuleSet, parse_rules
from nesymln.mln import log_joint_unnormalized
from nesymln.neural import PseudoLabel
from nesymln.tasks import make_addition_rules
from tests.oracles import elbo_by_enumeration, log_evidence_by_enumeration, random_graph

R1 = """\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred leopard/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x) :: 1.0
"""


def node(id, dist, keys=None):
    return HighLevelNode(id, PseudoLabel(np.asarray(dist, dtype=float)), keys)


def isolated_atom_graph():
    pred = PredicateDecl("a", 1)
    return _build_graph(RuleSet((pred,), ()), ["c1"], [GroundAtom("a(c1)", pred, (0,), ())], [])


# -- attaching -----------------------------------------------------------------------

def test_node_bridges_to_matching_atom():
    g = ground_rules(parse_rules(R1), ["c1", "c2"])
    m = attach_levels([node("leopard@c1", [0.7, 0.3])], g)
    assert len(m.bridges) == 1
    assert m.bridges[0].low.key == "leopard(c1)"
    assert m.unbridged == ()


def test_disjoint_identifiers_give_no_bridges():
    g = ground_rules(parse_rules(R1), ["c1"])
    m = attach_levels([node("zebra@c1", [0.5, 0.5]), node("leopard@c9", [0.5, 0.5])], g)
    assert m.bridges == ()
    assert m.unbridged == ("zebra@c1", "leopard@c9")


def test_repeated_grounding_gives_one_bridge():
    text = "pred a/1\npred b/1\npred p/1\nr1: a(x) => p(x)\nr2: b(x) => p(x)\nr3: a(x) & b(x) => p(x)\n"
    g = ground_rules(parse_rules(text), ["c1"])
    # p(c1) is produced by three rules but is a single node
    assert sum(1 for a in g.atoms if a.key == "p(c1)") == 1
    m = attach_levels([node("p@c1", [0.5, 0.5])], g)
    assert len(m.bridges) == 1


def test_value_node_bridges_whole_group():
    g = ground_rules(make_addition_rules(1), ["c0", "c1"], {"digit": range(10), "addition": range(19)})
    keys = [f"digit(c0;{v})" for v in range(10)]
    m = attach_levels([node("d0", np.full(10, 0.1), keys)], g)
    assert len(m.bridges) == 10
    assert m.layouts[0].mode == "vector"


# -- bridge potential ------------------------------------------------------------------

def test_bridge_potential_examples():
    assert bridge_potential(0.9, 0.9) == 0.0
    assert bridge_potential(1.0, 0.0) == 1.0
    assert bridge_potential([0.6, 0.4], [0.5, 0.5]) == pytest.approx(math.sqrt(0.02), abs=1e-15)
    assert bridge_potential([0.6, 0.4], [0.5, 0.5]) == pytest.approx(0.1414, abs=1e-4)


def test_bridge_potential_on_graph_objects():
    g = ground_rules(parse_rules(R1), ["c1"])
    n = node("leopard@c1", [0.8, 0.2])
    assert bridge_potential(n, g.atom("leopard(c1)"), score=0.5) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(UnbridgedPairError):
        bridge_potential(n, g.atom("spot(c1)"))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.data())
def test_bridge_potential_is_a_distance(y, data):
    a = data.draw(st.lists(st.floats(0, 1), min_size=len(y), max_size=len(y)))
    d = bridge_potential(y, a)
    assert d >= 0.0
    if d <= 1e-12:
        assert_allclose(y, a, rtol=0, atol=1e-12)
    assert bridge_potential(y, y) == 0.0


# -- O_logic -----------------------------------------------------------------------------

def test_o_logic_perfect_alignment():
    g = ground_rules(parse_rules(R1), ["c1", "c2", "c3"])
    nodes = [node(f"leopard@{c}", [1.0, 0.0]) for c in ("c1", "c2", "c3")]
    m = attach_levels(nodes, g)
    assert o_logic(m, {k: 1.0 for k in g.keys}) == pytest.approx(3.0, abs=1e-12)


def test_o_logic_without_bridges_is_log_numerator():
    rng = random.Random(0)
    for _ in range(20):
        g, w = random_graph(rng)
        m = attach_levels([], g, w)
        x = {a.key: float(rng.random() < 0.5) for a in g.atoms}
        assert o_logic(m, x) == log_joint_unnormalized(g, w, x)


def test_o_logic_two_term_sum():
    g = ground_rules(parse_rules("pred a/1\npred b/1\nr: a(x) => b(x) :: 0.5\n"), ["c1", "c2"])
    m = attach_levels([node("n", [0.0, 1.0], ("a(c1)", None))], g)
    assert o_logic(m, {k: 1.0 for k in g.keys}) == pytest.approx(0.0, abs=1e-12)


# -- ELBO -----------------------------------------------------------------------------------

def test_elbo_point_mass_is_log_joint():
    g = ground_rules(parse_rules(R1), ["c1", "c2"])
    m = attach_levels([node("leopard@c1", [0.3, 0.7])], g)
    x = {k: 1.0 for k in g.keys}
    x["spot(c2)"] = 0.0
    assert elbo(m, x) == pytest.approx(o_logic(m, x), abs=1e-12)


def test_elbo_isolated_uniform_atom():
    m = attach_levels([], isolated_atom_graph())
    assert elbo(m, {"a(c1)": 0.5}) == pytest.approx(math.log(2), abs=1e-12)
    assert log_evidence(m) == pytest.approx(math.log(2), abs=1e-12)


def _random_bridged(rng):
    g, w = random_graph(rng, max_atoms=8)
    free = [a.key for a in g.atoms if a.observed is None]
    nodes = []
    for i, k in enumerate(rng.sample(free, min(len(free), rng.randint(0, 3)))):
        p = rng.random()
        nodes.append(node(f"n{i}", [p, 1.0 - p], (k, None)))
    return g, w, nodes


@pytest.mark.parametrize("seed", range(25))
def test_elbo_and_evidence_match_enumeration(seed):
    rng = random.Random(seed)
    g, w, nodes = _random_bridged(rng)
    m = attach_levels(nodes, g, w)
    bridges = [(n.label.distribution[0], n.slot_keys[0]) for n in nodes]
    q = {a.key: rng.random() for a in g.atoms}
    qa = {a.key: (float(a.observed) if a.observed is not None else q[a.key]) for a in g.atoms}
    assert elbo(m, q) == pytest.approx(elbo_by_enumeration(g, w, qa, bridges), abs=1e-9)
    assert log_evidence(m) == pytest.approx(log_evidence_by_enumeration(g, w, bridges), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_elbo_gap_shrinks_over_sweeps(seed):
    rng = random.Random(100 + seed)
    g, w, nodes = _random_bridged(rng)
    m = attach_levels(nodes, g, w)
    evidence = log_evidence(m)
    trace = [elbo(m, m.compiled.full_assignment())]
    mean_field(m, sweeps=8, trace=trace)
    gaps = [evidence - e for e in trace]
    assert min(gaps) >= -1e-9
    assert all(b <= a + 1e-9 for a, b in zip(gaps, gaps[1:]))


# -- E-step objective ---------------------------------------------------------------------------

def test_e_step_examples():
    assert e_step_objective(2.0, 3.0, 1.0, alpha=1, beta=1, gamma=1) == 4.0
    assert e_step_objective(2.0, 3.0, 1.0, alpha=1, beta=0, gamma=0) == 2.0
    assert e_step_objective(2.0, 3.0, 1.0, alpha=0.5, beta=1, gamma=1) == 3.0


def test_e_step_reads_config_object():
    class Cfg:
        alpha, beta, gamma = 1.0, 0.0, 0.0
    assert e_step_objective(2.0, 3.0, 1.0, Cfg()) == 2.0


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_e_step_factor_range(bad):
    with pytest.raises(FactorRangeError):
        e_step_objective(1.0, 1.0, 1.0, alpha=bad, beta=0, gamma=0)


@given(st.floats(-1e6, 1e6), st.floats(allow_nan=True), st.floats(allow_nan=True))
def test_symbolic_terms_cannot_leak(o_task, o_log, l_cro):
    base = e_step_objective(o_task, 0.0, 0.0, alpha=1, beta=0, gamma=0)
    got = e_step_objective(o_task, o_log, l_cro, alpha=1, beta=0, gamma=0)
    assert np.float64(got).tobytes() == np.float64(base).tobytes()


# -- label revision --------------------------------------------------------------------------------

def test_revise_without_bridges_passes_through():
    g = ground_rules(parse_rules(R1), ["c1"])
    m = attach_levels([node("zebra@c1", [0.6, 0.4])], g)
    (out,) = revise_labels(m, {k: 0.5 for k in g.keys})
    assert_allclose(out.distribution, [0.6, 0.4], atol=0)


def test_revise_confirming_atom_raises_confidence():
    g = ground_rules(parse_rules(R1), ["c1"])
    m = attach_levels([node("leopard@c1", [0.7, 0.3])], g)
    (out,) = revise_labels(m, {k: 1.0 for k in g.keys})
    assert out.hard == 0
    assert_allclose(out.distribution, [1.0 / 1.3, 0.3 / 1.3], atol=1e-12)


def test_revise_contradicting_atoms_flip_label():
    g = ground_rules(parse_rules("pred a/1\npred p/1\npred q/1\nr: a(x) => q(x)\nr2: a(x) => p(x)\n"), ["c1"])
    m = attach_levels([node("n", [0.6, 0.4], ("p(c1)", "q(c1)"))], g)
    (out,) = revise_labels(m, {"a(c1)": 1.0, "p(c1)": 0.01, "q(c1)": 0.99})
    assert out.hard == 1
    assert_allclose(out.distribution, [0.01, 0.99], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_revised_labels_are_distributions(seed):
    rng = random.Random(seed)
    g, w, nodes = _random_bridged(rng)
    m = attach_levels(nodes, g, w)
    for pl in revise_labels(m, {a.key: rng.random() for a in g.atoms}):
        assert np.all(pl.distribution >= 0)
        assert pl.distribution.sum() == pytest.approx(1.0, abs=1e-12)
