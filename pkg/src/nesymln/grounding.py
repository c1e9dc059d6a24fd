"""Instantiate rules over a constant table and build the ground Markov network."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .logic import (
    Atom,
    EntityConstant,
    EntityVariable,
    PredicateDecl,
    Rule,
    RuleSet,
    ValueExpr,
    ValueLiteral,
    ValueVariable,
)

__all__ = [
    "Binding",
    "GroundAtom",
    "GroundRule",
    "MlnGraph",
    "GroundingCapError",
    "UnknownAtomError",
    "DEFAULT_GROUNDING_CAP",
    "atom_key",
    "ground_rules",
    "markov_blanket",
    "select_relevant_rules",
    "projected_atom_count",
]

DEFAULT_GROUNDING_CAP = 200_000


class GroundingCapError(RuntimeError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"grounding would create up to {count} ground atoms (cap {cap})")


class UnknownAtomError(KeyError):
    pass


def atom_key(pred: str, entity_names: Sequence[str], values: Sequence[int]) -> str:
    ent = ",".join(entity_names)
    if values:
        return f"{pred}({ent};{','.join(str(v) for v in values)})"
    return f"{pred}({ent})"


@dataclass(frozen=True)
class Binding:
    entity_map: tuple[tuple[str, int], ...]
    value_map: tuple[tuple[str, int], ...]

    @property
    def entities(self) -> dict[str, int]:
        return dict(self.entity_map)

    @property
    def values(self) -> dict[str, int]:
        return dict(self.value_map)


@dataclass(frozen=True)
class GroundAtom:
    key: str
    predicate: PredicateDecl
    entity_args: tuple[int, ...]
    value_args: tuple[int, ...]
    observed: bool | None = None

    @property
    def score(self) -> float:
        """Observed truth as 0/1; unobserved atoms default to 0.5."""
        return 0.5 if self.observed is None else float(self.observed)

    @property
    def group(self) -> tuple[str, tuple[int, ...]] | None:
        """Categorical group for single-valued value-typed predicates."""
        if self.predicate.value_arity == 1:
            return (self.predicate.name, self.entity_args)
        return None


@dataclass(frozen=True)
class GroundRule:
    rule: Rule
    binding: Binding
    body: tuple[int, ...]
    head: tuple[int, ...]
    body_keys: tuple[str, ...]
    head_keys: tuple[str, ...]

    @property
    def atom_indices(self) -> tuple[int, ...]:
        return self.body + self.head

    @property
    def keys(self) -> tuple[str, ...]:
        return self.body_keys + self.head_keys


@dataclass(frozen=True)
class MlnGraph:
    ruleset: RuleSet
    constants: tuple[str, ...]
    atoms: tuple[GroundAtom, ...]
    ground_rules: tuple[GroundRule, ...]
    adjacency: tuple[frozenset, ...]
    atom_to_rules: tuple[tuple[int, ...], ...]
    index: Mapping[str, int] = field(compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.atoms)

    def __contains__(self, atom) -> bool:
        return getattr(atom, "key", atom) in self.index

    def idx(self, atom) -> int:
        key = getattr(atom, "key", atom)
        try:
            return self.index[key]
        except KeyError:
            raise UnknownAtomError(f"ground atom {key} is not in the graph") from None

    def atom(self, key: str) -> GroundAtom:
        return self.atoms[self.idx(key)]

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(a.key for a in self.atoms)

    @property
    def rule_ids(self) -> tuple[str, ...]:
        return self.ruleset.rule_ids

    def rule_groundings(self, rule_id: str) -> list[GroundRule]:
        return [g for g in self.ground_rules if g.rule.id == rule_id]

    def with_evidence(self, evidence: Mapping[str, bool]) -> "MlnGraph":
        """Copy of the graph with the given atoms marked observed."""
        unknown = [k for k in evidence if k not in self.index]
        if unknown:
            raise UnknownAtomError(f"evidence for unknown atoms: {unknown}")
        atoms = tuple(replace(a, observed=bool(evidence[a.key])) if a.key in evidence else a for a in self.atoms)
        return replace(self, atoms=atoms)

    def dump(self) -> str:
        """Line dump: ``A idx key observed`` then ``R rule body => head``."""
        lines = []
        for i, a in enumerate(self.atoms):
            obs = "-" if a.observed is None else str(int(a.observed))
            lines.append(f"A\t{i}\t{a.key}\t{obs}")
        for g in self.ground_rules:
            lines.append(f"R\t{g.rule.id}\t{' & '.join(g.body_keys)} => {' | '.join(g.head_keys)}")
        return "\n".join(lines) + ("\n" if lines else "")


def _build_graph(ruleset, constants, atoms, grounded) -> MlnGraph:
    n = len(atoms)
    adj = [set() for _ in range(n)]
    a2r: list[list[int]] = [[] for _ in range(n)]
    for gi, g in enumerate(grounded):
        members = sorted(set(g.body + g.head))
        for i in members:
            a2r[i].append(gi)
            adj[i].update(j for j in members if j != i)
    return MlnGraph(
        ruleset=ruleset,
        constants=tuple(constants),
        atoms=tuple(atoms),
        ground_rules=tuple(grounded),
        adjacency=tuple(frozenset(s) for s in adj),
        atom_to_rules=tuple(tuple(r) for r in a2r),
        index={a.key: i for i, a in enumerate(atoms)},
    )


def _domain(value_domains, pred: PredicateDecl) -> tuple[int, ...]:
    try:
        return tuple(value_domains[pred.name])
    except KeyError:
        raise ValueError(f"no value domain given for predicate {pred.name}") from None


def projected_atom_count(rules: RuleSet, n_constants: int, value_domains: Mapping[str, Iterable[int]]) -> int:
    """Upper bound on distinct ground atoms, computed without enumerating."""
    seen = set()
    total = 0
    for r in rules.rules:
        for a in r.atoms:
            sig = (a.predicate.name, tuple(type(t).__name__ + str(getattr(t, "id", "")) for t in a.entity_args))
            if sig in seen:
                continue
            seen.add(sig)
            n_ent = sum(isinstance(t, EntityVariable) for t in a.entity_args)
            count = n_constants ** n_ent
            for t in a.value_args:
                if not isinstance(t, ValueLiteral):
                    count *= len(_domain(value_domains, a.predicate))
            total += count
    return total


def ground_rules(
    rules: RuleSet,
    constants: Sequence[str],
    value_domains: Mapping[str, Iterable[int]] | None = None,
    cap: int = DEFAULT_GROUNDING_CAP,
    injective: bool = True,
) -> MlnGraph:
    """Ground every rule over ``constants`` and the predicates' value domains.

    Distinct entity variables of one rule bind to distinct constants when
    ``injective`` is set.  Ground rules that instantiate the same rule with the
    same atom multiset are kept once, so ``digit(x; a) & digit(y; b)`` over two
    constants yields one clause per ``(a, b)`` and not two.
    """
    value_domains = {k: tuple(sorted(set(v))) for k, v in (value_domains or {}).items()}
    constants = list(constants)
    if not constants:
        return _build_graph(rules, constants, [], [])
    for p in rules.predicates:
        if p.value_arity and any(p.name in r.predicate_names for r in rules.rules):
            _domain(value_domains, p)
    projected = projected_atom_count(rules, len(constants), value_domains)
    if projected > cap:
        raise GroundingCapError(projected, cap)

    table = list(rules.constants)
    value_sets = {k: frozenset(v) for k, v in value_domains.items()}
    atoms: list[GroundAtom] = []
    index: dict[str, int] = {}
    grounded: list[GroundRule] = []
    seen_clauses = set()

    def instantiate(a: Atom, ent, vals):
        names = []
        for t in a.entity_args:
            if isinstance(t, EntityConstant):
                name = table[t.id]
                if name not in constants:
                    return None
            else:
                name = constants[ent[t.name]]
            names.append(name)
        values = []
        for t in a.value_args:
            if isinstance(t, ValueLiteral):
                v = t.v
            elif isinstance(t, ValueVariable):
                v = vals[t.name]
            else:
                v = t.evaluate(vals)
            if v not in value_sets[a.predicate.name]:
                return None
            values.append(v)
        return atom_key(a.predicate.name, names, values), names, values

    def intern(a: Atom, inst) -> int:
        key, names, values = inst
        i = index.get(key)
        if i is None:
            i = len(atoms)
            index[key] = i
            atoms.append(GroundAtom(key, a.predicate, tuple(constants.index(n) for n in names), tuple(values)))
        return i

    for rule in rules.rules:
        evars = rule.entity_variables()
        vvars = rule.body_value_variables()
        vdoms = []
        for v in vvars:
            dom = None
            for a in rule.body:
                for t in a.value_args:
                    if isinstance(t, ValueVariable) and t.name == v:
                        d = value_sets[a.predicate.name]
                        dom = d if dom is None else dom & d
            vdoms.append(sorted(dom))
        if injective:
            ent_iter = itertools.permutations(range(len(constants)), len(evars))
        else:
            ent_iter = itertools.product(range(len(constants)), repeat=len(evars))
        for ent_combo in ent_iter:
            ent = dict(zip(evars, ent_combo))
            for val_combo in itertools.product(*vdoms):
                vals = dict(zip(vvars, val_combo))
                for a in rule.head:
                    for t in a.value_args:
                        if isinstance(t, ValueExpr) and t.output is not None:
                            vals[t.output.name] = t.evaluate(vals)
                insts = [instantiate(a, ent, vals) for a in rule.atoms]
                # a clause touching an atom outside its value domain is skipped
                if any(x is None for x in insts):
                    continue
                nb = len(rule.body)
                body_keys = tuple(x[0] for x in insts[:nb])
                head_keys = tuple(x[0] for x in insts[nb:])
                sig = (rule.id, tuple(sorted(body_keys)), tuple(sorted(head_keys)))
                if sig in seen_clauses:
                    continue
                seen_clauses.add(sig)
                idx = [intern(a, x) for a, x in zip(rule.atoms, insts)]
                binding = Binding(tuple((k, ent[k]) for k in evars), tuple(sorted(vals.items())))
                grounded.append(GroundRule(rule, binding, tuple(idx[:nb]), tuple(idx[nb:]), body_keys, head_keys))

    return _build_graph(rules, constants, atoms, grounded)


def markov_blanket(graph: MlnGraph, atom) -> frozenset:
    """Neighbours of ``atom``: every atom sharing a ground rule with it."""
    i = graph.idx(atom)
    return frozenset(graph.atoms[j] for j in graph.adjacency[i])


def select_relevant_rules(rules: RuleSet, predicted_labels: Iterable) -> RuleSet:
    """Keep rules that mention a predicted label.

    String labels match predicate names; integer labels match value literals
    appearing in a rule's atoms.
    """
    names = set()
    values = set()
    for lab in predicted_labels:
        if isinstance(lab, str):
            names.add(lab)
        else:
            values.add(int(lab))

    def mentions(rule: Rule) -> bool:
        if rule.predicate_names & names:
            return True
        for a in rule.atoms:
            for t in a.value_args:
                if isinstance(t, ValueLiteral) and t.v in values:
                    return True
        return False

    return rules.subset(r for r in rules.rules if mentions(r))
