"""Using trained networks with rules after training.

Transductive: predict a label, find the rules whose ground instances contain
the predicted atom, and rank those instances by the product of their body
atom scores (computed as a sum of logs) with Łukasiewicz truth and rule
order as tie-breaks.

Inductive: ground a rewritten rule on new inputs, read each body concept off
the concept network by argmax, and evaluate the head's value expression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .grounding import GroundRule, ground_rules
from .logic import (
    EntityConstant,
    MissingScoreError,
    Rule,
    RuleSet,
    ValueExpr,
    ValueLiteral,
    ValueVariable,
    luk_and_n,
    luk_implies,
    luk_or_n,
)
from .neural import PseudoLabel

__all__ = [
    "Explanation",
    "RankedRule",
    "InductiveResult",
    "UntrainedPredicateError",
    "UnboundHeadError",
    "rule_posterior",
    "rank_candidates",
    "explain_transductive",
    "infer_inductive",
    "infer_inductive_batch",
    "rule_confidence",
    "classify_by_rules",
]


class UntrainedPredicateError(KeyError):
    pass


class UnboundHeadError(ValueError):
    pass


def rule_posterior(scores: Sequence[float]) -> float:
    """Product of body-atom probabilities, accumulated in the log domain."""
    s = np.asarray(scores, dtype=float)
    if np.any(s <= 0.0):
        return 0.0
    return float(math.exp(float(np.log(s).sum())))


@dataclass(frozen=True)
class RankedRule:
    rule: Rule
    posterior: float
    fuzzy_truth: float
    atom_scores: Mapping[str, float]
    order: int
    grounding: GroundRule | None = None

    def sort_key(self):
        return (-self.posterior, -self.fuzzy_truth, self.order)


def rank_candidates(candidates: Sequence[RankedRule]) -> list[RankedRule]:
    """Highest posterior first, then higher fuzzy truth, then earlier rule."""
    return sorted(candidates, key=RankedRule.sort_key)


@dataclass(frozen=True)
class Explanation:
    prediction: PseudoLabel | None
    label: object
    evidence_rule: Rule | None
    posterior: float
    fuzzy_truth: float
    atom_scores: Mapping[str, float]
    ranked: tuple = field(default=(), repr=False)
    confidence: float | None = None

    def render(self) -> str:
        """Plain-text report."""
        lines = [f"prediction\t{self.label}"]
        if self.confidence is not None:
            lines.append(f"network_prob\t{self.confidence:.6f}")
        if self.evidence_rule is None:
            lines.append("rule\t(none)")
            return "\n".join(lines) + "\n"
        lines.append(f"rule\t{self.evidence_rule.render()}")
        for k, v in self.atom_scores.items():
            lines.append(f"atom\t{k}\t{v:.6f}")
        lines.append(f"posterior\t{self.posterior!r}")
        lines.append(f"fuzzy_truth\t{self.fuzzy_truth!r}")
        for r in self.ranked[1:]:
            lines.append(f"alternative\t{r.rule.id}\t{r.posterior!r}\t{r.fuzzy_truth!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class InductiveResult:
    head_value: object
    reasoning_path: tuple

    def render(self) -> str:
        lines = [f"{key}\t{label}\t{score:.6f}" for key, label, score in self.reasoning_path]
        lines.append(f"head\t{self.head_value}")
        return "\n".join(lines) + "\n"


def _score_atoms(networks, graph, features, label_scores: Mapping[str, float]):
    """Score every atom of ``graph``: labels from ``label_scores``, others from concepts."""
    scores = {}
    for a in graph.atoms:
        if a.key in label_scores:
            scores[a.key] = float(label_scores[a.key])
        elif a.predicate.name in networks.concept.specs:
            scores[a.key] = networks.concept_atom_score(a, features)
    return scores


def _candidate(g: GroundRule, scores, order: int) -> RankedRule:
    try:
        body = [scores[k] for k in g.body_keys]
        head = [scores[k] for k in g.head_keys]
    except KeyError as exc:
        raise MissingScoreError(f"no score for atom {exc.args[0]}") from None
    truth = float(luk_implies(luk_and_n(body), luk_or_n(head)))
    used = {k: scores[k] for k in g.body_keys + g.head_keys}
    return RankedRule(g.rule, rule_posterior(body), truth, used, order, g)


def explain_transductive(networks, item, rules: RuleSet | None = None, prediction=None) -> Explanation:
    """Explain one prediction by its most probable supporting rule instance.

    ``item`` is one input ``(slots, dim)``.  The prediction comes from the task
    network unless ``prediction`` names a label explicitly (as when a class is
    chosen by :func:`classify_by_rules`).  Candidate rules are those with a
    ground instance containing the predicted label's atom.
    """
    pack = networks.pack
    rules = rules if rules is not None else pack.rules
    x = np.asarray(item, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    probs, feats, _ = networks.task.forward(x[None])
    pl = PseudoLabel(probs[0])
    features = {i: feats[0, i] for i in range(feats.shape[1])}
    label_scores = {k: float(p) for k, p in zip(pack.label_keys, probs[0])}
    if prediction is None:
        label = pack.labels[pl.hard]
        key = pack.label_keys[pl.hard]
    else:
        label = prediction
        key = pack.label_keys[pack.labels.index(prediction)] if prediction in pack.labels else f"{prediction}(c0)"
        label_scores[key] = 1.0
    domains = dict(pack.value_domains)
    graph = ground_rules(rules, [f"c{i}" for i in range(x.shape[0])], domains)
    scores = _score_atoms(networks, graph, features, label_scores)
    order = {r.id: i for i, r in enumerate(rules.rules)}
    cands = []
    for g in graph.ground_rules:
        if key in g.keys and all(k in scores for k in g.keys):
            cands.append(_candidate(g, scores, order[g.rule.id]))
    ranked = rank_candidates(cands)
    conf = float(probs[0][pack.labels.index(label)]) if label in pack.labels else None
    if not ranked:
        return Explanation(pl, label, None, 0.0, 0.0, {}, (), conf)
    best = ranked[0]
    return Explanation(pl, label, best.rule, best.posterior, best.fuzzy_truth, dict(best.atom_scores),
                       tuple(ranked), conf)


def _value_rule(ruleset: RuleSet) -> Rule:
    for r in ruleset.rules:
        for a in r.head:
            if a.value_args:
                return r
    if ruleset.rules:
        return ruleset.rules[0]
    raise UnboundHeadError("rule set has no rules to evaluate")


def _argmax_labels(networks, rule: Rule, feats: np.ndarray):
    """Bind entity variables to inputs in first-appearance order and read body labels."""
    evars = rule.entity_variables()
    if not evars or feats.shape[-2] == 0:
        raise UnboundHeadError(f"rule {rule.id}: no inputs to bind its variables")
    if feats.shape[-2] != len(evars):
        raise ValueError(f"rule {rule.id} binds {len(evars)} inputs, got {feats.shape[-2]}")
    slot = {v: i for i, v in enumerate(evars)}
    values: dict[str, np.ndarray] = {}
    path = []
    for a in rule.body:
        name = a.predicate.name
        if name not in networks.concept.specs:
            raise UntrainedPredicateError(f"no trained concept scorer for {name}")
        spec = networks.concept.specs[name]
        idx = []
        for t in a.entity_args:
            if isinstance(t, EntityConstant):
                raise UnboundHeadError(f"rule {rule.id}: constants are not bound to inputs")
            idx.append(slot[t.name])
        W, b = networks.concept.params[f"{name}.W"], networks.concept.params[f"{name}.b"]
        f = feats[..., idx[0], :]
        if spec.kind == "value":
            logits = f @ W + b
            z = logits - logits.max(-1, keepdims=True)
            p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
            k = p.argmax(-1)
            dom = np.asarray(networks.pack.value_domains[name])
            lab = dom[k]
            score = np.take_along_axis(p, k[..., None], -1)[..., 0]
            for t in a.value_args:
                if isinstance(t, ValueVariable):
                    values[t.name] = lab
            path.append((a, lab, score))
        else:
            raise UntrainedPredicateError(f"{name} is {spec.kind}; inductive heads need value-typed concepts")
    return values, path


def _head_value(rule: Rule, values):
    head = rule.head[0]
    if not head.value_args:
        return head.predicate.name
    t = head.value_args[0]
    if isinstance(t, ValueExpr):
        missing = [v.name for _, v in t.coefficients if v.name not in values]
        if missing:
            raise UnboundHeadError(f"rule {rule.id}: head variables {missing} unbound")
        total = t.offset
        for c, v in t.coefficients:
            total = total + c * values[v.name]
        return total
    if isinstance(t, ValueVariable):
        if t.name not in values:
            raise UnboundHeadError(f"rule {rule.id}: head variable {t.name} unbound")
        return values[t.name]
    if isinstance(t, ValueLiteral):
        return t.v
    raise UnboundHeadError(f"rule {rule.id}: cannot evaluate head term {t!r}")


def infer_inductive(ruleset_new: RuleSet, networks, inputs) -> InductiveResult:
    """Evaluate a rewritten rule on one tuple of raw inputs ``(k, dim)``."""
    rule = _value_rule(ruleset_new)
    x = np.asarray(inputs, dtype=float)
    if x.size == 0:
        raise UnboundHeadError(f"rule {rule.id}: empty input list leaves the head unbound")
    feats = networks.task.encode(x)
    values, path = _argmax_labels(networks, rule, feats)
    head = _head_value(rule, values)
    evars = rule.entity_variables()
    steps = []
    for a, lab, score in path:
        consts = ",".join(f"c{evars.index(t.name)}" for t in a.entity_args)
        steps.append((f"{a.predicate.name}({consts};{int(lab)})", int(lab), float(score)))
    return InductiveResult(int(head) if not isinstance(head, str) else head, tuple(steps))


def infer_inductive_batch(ruleset_new: RuleSet, networks, items) -> np.ndarray:
    """Head values for a batch ``(n, k, dim)``; same result as per-item calls."""
    rule = _value_rule(ruleset_new)
    x = np.asarray(items, dtype=float)
    feats = networks.task.encode(x)
    values, _ = _argmax_labels(networks, rule, feats)
    return np.asarray(_head_value(rule, values))


def rule_confidence(rule: Rule, atom_scores: Mapping, groundings: Sequence[GroundRule] | None = None,
                    constants: Sequence[str] | None = None, value_domains=None) -> float:
    """Mean Łukasiewicz truth of ``rule`` over its groundings.

    Groundings come from ``groundings`` or from grounding the rule over
    ``constants``; every atom they touch must have a score.
    """
    scores = {getattr(k, "key", k): float(v) for k, v in atom_scores.items()}
    if groundings is None:
        if constants is None:
            raise ValueError("pass groundings or constants")
        rs = RuleSet(tuple(_preds(rule)), (rule,), ())
        groundings = ground_rules(rs, constants, value_domains or {}).ground_rules
    if not groundings:
        raise ValueError(f"rule {rule.id} has no groundings")
    truths = [_candidate(g, scores, 0).fuzzy_truth for g in groundings]
    return float(np.mean(truths))


def _preds(rule: Rule):
    seen = {}
    for a in rule.atoms:
        seen.setdefault(a.predicate.name, a.predicate)
    return seen.values()


def classify_by_rules(networks, items, class_rules: RuleSet, classes: Sequence[str] | None = None):
    """Zero-shot classification: each class rule's posterior is the product of
    its body attribute scores; an item takes the head of its best rule.

    Returns ``(labels, ranked)`` where ``ranked[i]`` lists ``RankedRule`` for
    item ``i`` best first.  Fuzzy truth treats the rule's own head as true, so
    ties fall to rule order.
    """
    x = np.asarray(items, dtype=float)
    if x.ndim == 2:
        x = x[:, None, :]
    feats = networks.task.encode(x)
    outs, _ = networks.concept.forward(feats)
    rules = [r for r in class_rules.rules
             if len(r.head) == 1 and (classes is None or r.head[0].predicate.name in classes)]
    for r in rules:
        for a in r.body:
            if a.predicate.name not in networks.concept.specs:
                raise UntrainedPredicateError(f"rule {r.id}: no trained scorer for {a.predicate.name}")
    if not rules:
        raise ValueError("no class rules to classify with")
    order = {r.id: i for i, r in enumerate(class_rules.rules)}
    labels, ranked = [], []
    for i in range(len(x)):
        cands = []
        for r in rules:
            sc = {f"{a.predicate.name}(c0)": float(outs[a.predicate.name][i, 0]) for a in r.body}
            body = list(sc.values())
            truth = float(luk_implies(luk_and_n(body), 1.0))
            cands.append(RankedRule(r, rule_posterior(body), truth, sc, order[r.id]))
        rk = rank_candidates(cands)
        ranked.append(rk)
        labels.append(rk[0].rule.head[0].predicate.name)
    return labels, ranked
