import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from nesymln.grounding import _build_graph, GroundAtom, ground_rules
from nesymln.logic import PredicateDecl, RuleSet, parse_rules
from nesymln.mln import (
    DivergenceError,
    MissingAssignmentError,
    TooManyAtomsError,
    compile_graph,
    conditional,
    log_joint_unnormalized,
    m_step,
    partition_exact,
    potentials_tsv,
    pseudo_log_likelihood,
    rule_potential,
    weight_gradient,
)
from tests.oracles import conditional_by_enumeration, log_potential, log_z, random_graph

R1 = """\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred leopard/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x) :: 1.0
"""

CHAIN = "pred a/1\npred b/1\npred c/1\nr1: a(x) => b(x)\nr2: b(x) => c(x)\n"


def r1_graph(constants=("c1", "c2")):
    return ground_rules(parse_rules(R1), list(constants))


def assign(graph, value):
    return {k: value for k in graph.keys}


# -- rule potential ------------------------------------------------------------

def test_potential_all_true_counts_groundings():
    g = r1_graph(["c1", "c2", "c3"])
    assert rule_potential(g, "R1", assign(g, 1.0)) == 3.0


def test_potential_all_violated_is_zero():
    g = r1_graph(["c1", "c2", "c3"])
    x = assign(g, 1.0)
    for c in ("c1", "c2", "c3"):
        x[f"leopard({c})"] = 0.0
    assert rule_potential(g, "R1", x) == 0.0


def test_potential_mixed_boolean():
    g = r1_graph()
    x = {"likecat(c1)": 1, "tawny(c1)": 1, "spot(c1)": 1, "leopard(c1)": 0,
         "likecat(c2)": 0, "tawny(c2)": 1, "spot(c2)": 1, "leopard(c2)": 0}
    # c1 violates the implication, c2 has a false body
    assert rule_potential(g, "R1", x) == 1.0


def test_potential_missing_atom():
    g = r1_graph()
    with pytest.raises(MissingAssignmentError):
        rule_potential(g, "R1", {"likecat(c1)": 1.0})


# -- log joint -------------------------------------------------------------------

def test_log_joint_zero_weights():
    g = r1_graph()
    rng = np.random.default_rng(0)
    x = dict(zip(g.keys, rng.random(len(g.keys))))
    assert log_joint_unnormalized(g, {"R1": 0.0}, x) == 0.0


def test_log_joint_single_rule():
    g = r1_graph(["c1", "c2", "c3"])
    assert log_joint_unnormalized(g, {"R1": 2.0}, assign(g, 1.0)) == 6.0


def test_log_joint_two_rules():
    rs = parse_rules("pred a/1\npred b/1\nr1: a(x) => b(x) :: 1.0\nr2: a(x) => a(x) :: 0.5\n")
    g = ground_rules(rs, ["c1", "c2", "c3", "c4"])
    x = {f"a(c{i})": 1.0 for i in range(1, 5)}
    x.update({"b(c1)": 1.0, "b(c2)": 1.0, "b(c3)": 0.0, "b(c4)": 0.0})
    assert rule_potential(g, "r1", x) == 2.0
    assert rule_potential(g, "r2", x) == 4.0
    assert log_joint_unnormalized(g, {"r1": 1.0, "r2": 0.5}, x) == 4.0


@given(st.floats(-3, 3), st.integers(0, 2**16))
def test_log_joint_linear_in_weights(w, seed):
    g = r1_graph()
    rng = np.random.default_rng(seed)
    x = dict(zip(g.keys, rng.random(len(g.keys))))
    a = log_joint_unnormalized(g, {"R1": w}, x)
    b = log_joint_unnormalized(g, {"R1": 2 * w}, x)
    assert b == pytest.approx(2 * a, abs=1e-12)


# -- partition function -------------------------------------------------------------

def test_partition_empty():
    g = r1_graph([])
    assert partition_exact(g, {"R1": 1.0}) == 0.0


def test_partition_single_free_atom():
    pred = PredicateDecl("a", 1)
    rs = RuleSet((pred,), ())
    g = _build_graph(rs, ["c1"], [GroundAtom("a(c1)", pred, (0,), ())], [])
    assert partition_exact(g, {}) == pytest.approx(math.log(2), abs=1e-12)


def test_partition_three_atoms_one_rule():
    rs = parse_rules("pred a/1\npred b/1\npred c/1\nr: a(x) & b(x) => c(x) :: 1.0\n")
    g = ground_rules(rs, ["k"])
    assert len(g) == 3
    # seven of the eight worlds satisfy the rule
    expect = math.log(7 * math.e + 1)
    assert partition_exact(g, {"r": 1.0}) == pytest.approx(expect, abs=1e-12)
    assert partition_exact(g, {"r": 1.0}) == pytest.approx(log_z(g, {"r": 1.0}), abs=1e-12)


def test_partition_cap():
    g = r1_graph(["c1", "c2", "c3", "c4", "c5", "c6"])
    with pytest.raises(TooManyAtomsError):
        partition_exact(g, {"R1": 1.0}, cap=20)


# -- conditionals ----------------------------------------------------------------

def test_conditional_isolated_atom():
    pred = PredicateDecl("a", 1)
    rs = RuleSet((pred,), ())
    g = _build_graph(rs, ["c1"], [GroundAtom("a(c1)", pred, (0,), ())], [])
    assert conditional(g, {}, "a(c1)", {}) == 0.5


def test_conditional_leopard():
    g = r1_graph(["c1"])
    x = {"likecat(c1)": 1.0, "tawny(c1)": 1.0, "spot(c1)": 1.0}
    p = conditional(g, {"R1": 2.0}, "leopard(c1)", x)
    assert p == pytest.approx(math.exp(2) / (math.exp(2) + 1.0), abs=1e-12)
    assert p == pytest.approx(0.8808, abs=1e-4)


def test_conditional_needs_blanket():
    g = r1_graph(["c1"])
    with pytest.raises(MissingAssignmentError):
        conditional(g, {"R1": 2.0}, "leopard(c1)", {"likecat(c1)": 1.0})


@pytest.mark.parametrize("seed", range(50))
def test_conditionals_match_enumeration(seed):
    rng = random.Random(seed)
    g, w = random_graph(rng)
    x = {a.key: (float(a.observed) if a.observed is not None else float(rng.random() < 0.5)) for a in g.atoms}
    for a in g.atoms:
        if a.observed is not None:
            continue
        p = conditional(g, w, a.key, x)
        assert p == pytest.approx(conditional_by_enumeration(g, w, a.key, x), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_conditional_depends_only_on_blanket(seed):
    rng = random.Random(100 + seed)
    g, w = random_graph(rng)
    free = [a for a in g.atoms if a.observed is None]
    target = free[0]
    x = {a.key: float(a.observed) if a.observed is not None else 0.0 for a in g.atoms}
    base = conditional(g, w, target.key, x)
    blanket = g.adjacency[g.idx(target.key)]
    for i, a in enumerate(g.atoms):
        if a.observed is None and i not in blanket and a.key != target.key:
            x[a.key] = 1.0
    assert conditional(g, w, target.key, x) == pytest.approx(base, abs=1e-12)


# -- pseudo-likelihood -------------------------------------------------------------

def test_pll_empty():
    assert pseudo_log_likelihood(r1_graph([]), {"R1": 1.0}, {}) == 0.0


def test_pll_isolated_atom():
    pred = PredicateDecl("a", 1)
    g = _build_graph(RuleSet((pred,), ()), ["c1"], [GroundAtom("a(c1)", pred, (0,), ())], [])
    assert pseudo_log_likelihood(g, {}, {"a(c1)": 1.0}) == pytest.approx(math.log(0.5), abs=1e-12)


def test_pll_three_atoms_hand_sum():
    rs = parse_rules("pred a/1\npred b/1\npred c/1\nr: a(x) & b(x) => c(x) :: 1.5\n")
    g = ground_rules(rs, ["k"])
    x = {"a(k)": 1.0, "b(k)": 1.0, "c(k)": 1.0}
    w = {"r": 1.5}
    s = lambda z: 1.0 / (1.0 + math.exp(-z))
    # flipping a or b to 0 keeps the rule true; flipping c makes it false
    expect = math.log(s(0.0)) * 2 + math.log(s(1.5))
    assert pseudo_log_likelihood(g, w, x) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_pll_is_non_positive(seed):
    rng = random.Random(seed)
    g, w = random_graph(rng)
    q = {a.key: rng.random() for a in g.atoms}
    assert pseudo_log_likelihood(g, w, q) <= 0.0


def test_pll_approaches_zero_when_certain():
    g = r1_graph(["c1"])
    x = assign(g, 1.0)
    big = pseudo_log_likelihood(g, {"R1": 50.0}, {"leopard(c1)": 1.0, **{k: 1.0 for k in g.keys}})
    # only the head has a non-flat conditional, so the others each add log 0.5
    assert big == pytest.approx(3 * math.log(0.5), abs=1e-12)


# -- weight gradient -----------------------------------------------------------------

def test_gradient_zero_at_targets():
    g = r1_graph()
    q = assign(g, 0.5)
    grad = weight_gradient(g, {"R1": 0.0}, q)
    assert grad == {"R1": 0.0}


def test_gradient_observed_true_head():
    g = r1_graph(["c1"]).with_evidence({"likecat(c1)": True, "tawny(c1)": True, "spot(c1)": True,
                                         "leopard(c1)": True})
    grad = weight_gradient(g, {"R1": 2.0}, {})
    assert grad["R1"] == pytest.approx(1.0 - math.exp(2) / (math.exp(2) + 1), abs=1e-12)
    assert grad["R1"] == pytest.approx(0.1192, abs=1e-4)


def _fd_check(g, w, q, eps=1e-5):
    grad = weight_gradient(g, w, q)
    for r in w:
        hi = dict(w, **{r: w[r] + eps})
        lo = dict(w, **{r: w[r] - eps})
        fd = (pseudo_log_likelihood(g, hi, q) - pseudo_log_likelihood(g, lo, q)) / (2 * eps)
        denom = max(abs(fd), abs(grad[r]), 1e-8)
        assert abs(fd - grad[r]) / denom <= 1e-4 or abs(fd - grad[r]) < 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = random.Random(seed)
    g, w = random_graph(rng, max_atoms=10)
    q = {a.key: rng.random() for a in g.atoms}
    _fd_check(g, w, q)


def test_indicator_form_uses_connection_indicator():
    rs = parse_rules("pred a/1\npred b/1\nr: a(x) => b(x)\n")
    g = ground_rules(rs, ["k"])
    q = {"a(k)": 1.0, "b(k)": 0.0}
    w = {"r": 1.0}
    s = lambda z: 1.0 / (1.0 + math.exp(-z))
    # flipping a: count -1, flipping b: count +1
    pa, pb = s(-1.0), s(1.0)
    exact = weight_gradient(g, w, q)["r"]
    indicator = weight_gradient(g, w, q, form="indicator")["r"]
    assert exact == pytest.approx((1 - pa) * -1 + (0 - pb) * 1, abs=1e-12)
    assert indicator == pytest.approx((1 - pa) + (0 - pb), abs=1e-12)


# -- M-step ---------------------------------------------------------------------

def test_m_step_zero_steps():
    g = r1_graph()
    assert m_step(g, {"R1": 1.3}, assign(g, 1.0), steps=0) == {"R1": 1.3}


def test_m_step_satisfied_rule_grows():
    g = r1_graph()
    q = assign(g, 1.0)
    w = {"R1": 1.0}
    trace = [w["R1"]]
    for _ in range(5):
        w = m_step(g, w, q, lr=0.1, steps=1)
        trace.append(w["R1"])
    assert all(b > a for a, b in zip(trace, trace[1:]))


def test_m_step_cancelling_evidence():
    rs = parse_rules("pred a/1\npred b/1\nr: a(x) => b(x)\n")
    g = ground_rules(rs, ["c1", "c2"])
    # one satisfied grounding and one violated one; per-atom residuals cancel when
    # sigmoid(w) = 1/3, so start there
    q = {"a(c1)": 1.0, "b(c1)": 1.0, "a(c2)": 1.0, "b(c2)": 0.0}
    w0 = -math.log(2.0)
    lr = 0.05
    grad = weight_gradient(g, {"r": w0}, q)["r"]
    assert abs(grad) < 1e-12
    w = m_step(g, {"r": w0}, q, lr=lr, steps=10)
    assert abs(w["r"] - w0) <= lr


def test_m_step_never_lowers_objective():
    rng = random.Random(7)
    for _ in range(10):
        g, w = random_graph(rng)
        q = {a.key: rng.random() for a in g.atoms}
        before = pseudo_log_likelihood(g, w, q)
        after = pseudo_log_likelihood(g, m_step(g, w, q, lr=0.5, steps=5), q)
        assert after >= before - 1e-12


def test_m_step_batch_is_mean():
    g = r1_graph(["c1"])
    cg = compile_graph(g)
    rng = np.random.default_rng(0)
    batch = rng.random((4, len(g)))
    w = m_step(g, {"R1": 1.0}, batch, lr=0.05, steps=1)
    grad = cg.pll_gradient(batch, {"R1": 1.0}).mean(0)[0]
    assert w["R1"] == pytest.approx(1.0 + 0.05 * grad, abs=1e-12)


def test_m_step_divergence_guard():
    g = r1_graph(["c1"])
    with pytest.raises(DivergenceError):
        m_step(g, {"R1": float("nan")}, assign(g, 1.0), steps=1)


def test_potentials_tsv():
    g = r1_graph()
    text = potentials_tsv(g, {"R1": 2.0}, assign(g, 1.0))
    assert text == "R1\t2.0\t2.0\n"
