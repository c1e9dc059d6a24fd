"""First-order rule language and Łukasiewicz fuzzy operators.

Rules are written one per line::

    pred likecat/1 latent
    pred leopard/1
    r1: likecat(x) & tawny(x) & spot(x) => leopard(x) :: 1.0

    pred digit/1+1 latent
    pred addition/0+1
    digit(x; d1) & digit(y; d2) => addition(; 1*d1 + 1*d2 -> z)

Entity arguments come before ``;`` and value (integer label) arguments
after it.  Entity constants are written with a leading ``@`` and resolve
into the rule set's constant table.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "EntityVariable",
    "EntityConstant",
    "ValueVariable",
    "ValueLiteral",
    "ValueExpr",
    "PredicateKind",
    "PredicateDecl",
    "Atom",
    "Rule",
    "RuleSet",
    "RuleParseError",
    "RuleSyntaxError",
    "UndeclaredPredicateError",
    "ArityMismatchError",
    "DuplicateRuleIdError",
    "DuplicatePredicateError",
    "UnboundVariableError",
    "LukDomainError",
    "MissingScoreError",
    "parse_rules",
    "render_rules",
    "luk_and",
    "luk_or",
    "luk_implies",
    "luk_not",
    "luk_and_n",
    "luk_or_n",
    "soft_truth",
    "rule_soft_truth",
]


# ---------------------------------------------------------------------------
# terms


@dataclass(frozen=True)
class EntityVariable:
    name: str

    def render(self, constants: Sequence[str] = ()) -> str:
        return self.name


@dataclass(frozen=True)
class EntityConstant:
    id: int

    def render(self, constants: Sequence[str] = ()) -> str:
        return "@" + constants[self.id]


@dataclass(frozen=True)
class ValueVariable:
    name: str

    def render(self, constants: Sequence[str] = ()) -> str:
        return self.name


@dataclass(frozen=True)
class ValueLiteral:
    v: int

    def render(self, constants: Sequence[str] = ()) -> str:
        return str(self.v)


@dataclass(frozen=True)
class ValueExpr:
    """Integer-linear expression ``sum(c_k * var_k) + offset``.

    ``output`` is the variable named after ``->``; it is bound to the value
    of the expression when a rule is grounded.
    """

    coefficients: tuple[tuple[int, ValueVariable], ...]
    offset: int = 0
    output: ValueVariable | None = None

    def __post_init__(self):
        if not self.coefficients:
            raise ValueError("ValueExpr needs at least one coefficient")
        names = [v.name for _, v in self.coefficients]
        if len(set(names)) != len(names):
            raise ValueError(f"repeated variable in ValueExpr: {names}")

    @property
    def inputs(self) -> tuple[ValueVariable, ...]:
        return tuple(v for _, v in self.coefficients)

    def evaluate(self, values: Mapping[str, int]) -> int:
        return int(sum(c * values[v.name] for c, v in self.coefficients) + self.offset)

    def render(self, constants: Sequence[str] = ()) -> str:
        s = " + ".join(f"{c}*{v.name}" for c, v in self.coefficients)
        if self.offset:
            s += f" + {self.offset}"
        if self.output is not None:
            s += f" -> {self.output.name}"
        return s


EntityTerm = Union[EntityVariable, EntityConstant]
ValueTerm = Union[ValueVariable, ValueLiteral, ValueExpr]
Term = Union[EntityVariable, EntityConstant, ValueVariable, ValueLiteral, ValueExpr]


# ---------------------------------------------------------------------------
# predicates, atoms, rules


class PredicateKind(enum.Enum):
    OBSERVED = "observed"
    LATENT = "latent"


@dataclass(frozen=True)
class PredicateDecl:
    name: str
    entity_arity: int
    value_arity: int = 0
    kind: PredicateKind = PredicateKind.OBSERVED

    def __post_init__(self):
        if self.entity_arity < 0 or self.value_arity < 0:
            raise ValueError("arities must be non-negative")
        if self.entity_arity + self.value_arity < 1:
            raise ValueError(f"predicate {self.name} has no arguments")

    @property
    def arity(self) -> int:
        return self.entity_arity + self.value_arity

    @property
    def is_value_typed(self) -> bool:
        return self.value_arity > 0

    def render(self) -> str:
        s = f"pred {self.name}/{self.entity_arity}"
        if self.value_arity:
            s += f"+{self.value_arity}"
        if self.kind is PredicateKind.LATENT:
            s += " latent"
        return s


@dataclass(frozen=True)
class Atom:
    predicate: PredicateDecl
    args: tuple[Term, ...]

    def __post_init__(self):
        p = self.predicate
        if len(self.args) != p.arity:
            raise ValueError(f"{p.name} expects {p.arity} args, got {len(self.args)}")
        for t in self.entity_args:
            if not isinstance(t, (EntityVariable, EntityConstant)):
                raise ValueError(f"entity slot of {p.name} holds {t!r}")
        for t in self.value_args:
            if not isinstance(t, (ValueVariable, ValueLiteral, ValueExpr)):
                raise ValueError(f"value slot of {p.name} holds {t!r}")

    @property
    def entity_args(self) -> tuple[EntityTerm, ...]:
        return self.args[: self.predicate.entity_arity]  # type: ignore[return-value]

    @property
    def value_args(self) -> tuple[ValueTerm, ...]:
        return self.args[self.predicate.entity_arity:]  # type: ignore[return-value]

    def render(self, constants: Sequence[str] = ()) -> str:
        ent = ", ".join(t.render(constants) for t in self.entity_args)
        if self.predicate.value_arity:
            val = ", ".join(t.render(constants) for t in self.value_args)
            return f"{self.predicate.name}({ent}; {val})" if ent else f"{self.predicate.name}(; {val})"
        return f"{self.predicate.name}({ent})"


@dataclass(frozen=True)
class Rule:
    id: str
    body: tuple[Atom, ...]
    head: tuple[Atom, ...]
    weight: float = 1.0

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"rule {self.id}: empty body")
        if not self.head:
            raise ValueError(f"rule {self.id}: empty head")
        if not math.isfinite(self.weight):
            raise ValueError(f"rule {self.id}: weight must be finite")
        unbound = _unbound_head_values(self.body, self.head)
        if unbound:
            raise UnboundVariableError(f"rule {self.id}: head value variable(s) {sorted(unbound)} not bound by body")

    @property
    def atoms(self) -> tuple[Atom, ...]:
        return self.body + self.head

    @property
    def predicate_names(self) -> set[str]:
        return {a.predicate.name for a in self.atoms}

    def entity_variables(self) -> list[str]:
        """Entity variable names in order of first appearance."""
        seen: list[str] = []
        for a in self.atoms:
            for t in a.entity_args:
                if isinstance(t, EntityVariable) and t.name not in seen:
                    seen.append(t.name)
        return seen

    def body_value_variables(self) -> list[str]:
        seen: list[str] = []
        for a in self.body:
            for t in a.value_args:
                if isinstance(t, ValueVariable) and t.name not in seen:
                    seen.append(t.name)
        return seen

    def render(self, constants: Sequence[str] = ()) -> str:
        body = " & ".join(a.render(constants) for a in self.body)
        head = " | ".join(a.render(constants) for a in self.head)
        return f"{self.id}: {body} => {head} :: {self.weight!r}"


def _unbound_head_values(body: Sequence[Atom], head: Sequence[Atom]) -> set[str]:
    bound = set()
    for a in body:
        for t in a.value_args:
            if isinstance(t, ValueVariable):
                bound.add(t.name)
            elif isinstance(t, ValueExpr):
                raise UnboundVariableError("value expressions are only allowed in rule heads")
    missing = set()
    for a in head:
        for t in a.value_args:
            if isinstance(t, ValueVariable) and t.name not in bound:
                missing.add(t.name)
            elif isinstance(t, ValueExpr):
                missing.update(v.name for v in t.inputs if v.name not in bound)
    return missing


@dataclass(frozen=True)
class RuleSet:
    predicates: tuple[PredicateDecl, ...] = ()
    rules: tuple[Rule, ...] = ()
    constants: tuple[str, ...] = ()

    def __post_init__(self):
        names = [p.name for p in self.predicates]
        if len(set(names)) != len(names):
            raise ValueError("duplicate predicate declarations")
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate rule ids")
        declared = set(names)
        for r in self.rules:
            for a in r.atoms:
                if a.predicate.name not in declared:
                    raise ValueError(f"rule {r.id} uses undeclared predicate {a.predicate.name}")
                for t in a.entity_args:
                    if isinstance(t, EntityConstant) and not 0 <= t.id < len(self.constants):
                        raise ValueError(f"rule {r.id}: constant id {t.id} outside constant table")

    def predicate(self, name: str) -> PredicateDecl:
        for p in self.predicates:
            if p.name == name:
                return p
        raise KeyError(name)

    def rule(self, rule_id: str) -> Rule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KeyError(rule_id)

    @property
    def rule_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.rules)

    def subset(self, rules: Iterable[Rule]) -> "RuleSet":
        return RuleSet(self.predicates, tuple(rules), self.constants)

    def __len__(self) -> int:
        return len(self.rules)


# ---------------------------------------------------------------------------
# parsing


class RuleParseError(ValueError):
    code = "parse-error"

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f"line {line}" + (f", column {column}" if column is not None else "") if line else ""
        super().__init__(f"{where}: {message}" if where else message)


class RuleSyntaxError(RuleParseError):
    code = "syntax"


class UndeclaredPredicateError(RuleParseError):
    code = "undeclared-predicate"


class ArityMismatchError(RuleParseError):
    code = "arity-mismatch"


class DuplicateRuleIdError(RuleParseError):
    code = "duplicate-rule-id"


class DuplicatePredicateError(RuleParseError):
    code = "duplicate-predicate"


class UnboundVariableError(RuleParseError):
    code = "unbound-variable"


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<arrow2>=>)
  | (?P<arrow>->)
  | (?P<dcolon>::)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<const>@[A-Za-z0-9_]+)
  | (?P<punct>[()&|;,:*+/-])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


def _tokenize(line: str, lineno: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise RuleSyntaxError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            toks.append(_Tok(kind if kind != "punct" else text, text, pos + 1))
        pos = m.end()
    return toks


class _LineParser:
    def __init__(self, toks: list[_Tok], lineno: int, line_len: int):
        self.toks = toks
        self.i = 0
        self.lineno = lineno
        self.end_col = line_len + 1

    def peek(self, k: int = 0) -> _Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def error(self, msg: str, tok: _Tok | None = None) -> RuleSyntaxError:
        tok = tok if tok is not None else self.peek()
        col = tok.col if tok is not None else self.end_col
        return RuleSyntaxError(msg, self.lineno, col)

    def expect(self, kind: str) -> _Tok:
        tok = self.peek()
        if tok is None or tok.kind != kind:
            found = tok.text if tok is not None else "end of line"
            raise self.error(f"expected {kind!r}, found {found!r}")
        self.i += 1
        return tok

    def accept(self, kind: str) -> _Tok | None:
        tok = self.peek()
        if tok is not None and tok.kind == kind:
            self.i += 1
            return tok
        return None

    def at_end(self) -> bool:
        return self.i >= len(self.toks)

    def integer(self) -> int:
        sign = -1 if self.accept("-") else 1
        tok = self.expect("num")
        try:
            return sign * int(tok.text)
        except ValueError:
            raise self.error("expected an integer", tok) from None

    def real(self) -> float:
        sign = -1.0 if self.accept("-") else 1.0
        return sign * float(self.expect("num").text)


def _parse_value_term(p: _LineParser):
    # literal | variable | vexpr
    tok = p.peek()
    if tok is None:
        raise p.error("expected a value term")
    nxt = p.peek(1)
    if tok.kind == "-":
        nxt = p.peek(2)
    if tok.kind in ("num", "-") and nxt is not None and nxt.kind == "*":
        return _parse_vexpr(p)
    if tok.kind in ("num", "-"):
        return ValueLiteral(p.integer())
    if tok.kind == "name":
        p.i += 1
        return ValueVariable(tok.text)
    raise p.error(f"unexpected {tok.text!r} in value slot")


def _parse_vexpr(p: _LineParser) -> ValueExpr:
    start = p.peek()
    coeffs = []
    offset = 0
    while True:
        c = p.integer()
        if p.accept("*"):
            var = p.expect("name")
            coeffs.append((c, ValueVariable(var.text)))
        else:
            offset += c
            break
        if not p.accept("+"):
            break
    out = None
    if p.accept("arrow"):
        out = ValueVariable(p.expect("name").text)
    try:
        return ValueExpr(tuple(coeffs), offset, out)
    except ValueError as exc:
        raise p.error(str(exc), start) from None


class _Parser:
    def __init__(self, constants: Sequence[str] | None):
        self.preds: dict[str, PredicateDecl] = {}
        self.rules: list[Rule] = []
        self.ids: set[str] = set()
        self.fixed_constants = constants is not None
        self.constants: list[str] = list(constants or [])

    def constant(self, name: str, p: _LineParser, tok: _Tok) -> EntityConstant:
        if name not in self.constants:
            if self.fixed_constants:
                raise RuleParseError(f"constant {name!r} not in constant table", p.lineno, tok.col)
            self.constants.append(name)
        return EntityConstant(self.constants.index(name))

    def decl(self, p: _LineParser):
        p.expect("name")  # 'pred'
        name_tok = p.expect("name")
        p.expect("/")
        ea = p.integer()
        va = 0
        if p.accept("+"):
            va = p.integer()
        kind = PredicateKind.OBSERVED
        kw = p.accept("name")
        if kw is not None:
            if kw.text not in ("latent", "observed"):
                raise p.error(f"unknown predicate flag {kw.text!r}", kw)
            kind = PredicateKind(kw.text)
        if not p.at_end():
            raise p.error("trailing tokens after declaration")
        if name_tok.text in self.preds:
            raise DuplicatePredicateError(f"predicate {name_tok.text!r} declared twice", p.lineno, name_tok.col)
        try:
            self.preds[name_tok.text] = PredicateDecl(name_tok.text, ea, va, kind)
        except ValueError as exc:
            raise RuleSyntaxError(str(exc), p.lineno, name_tok.col) from None

    def atom(self, p: _LineParser) -> Atom:
        name_tok = p.expect("name")
        p.expect("(")
        ents: list = []
        vals: list = []
        in_values = False
        if not p.accept(")"):
            while True:
                tok = p.peek()
                if tok is not None and tok.kind == ";" and not in_values:
                    p.i += 1
                    in_values = True
                    continue
                if tok is not None and tok.kind == ")":
                    p.i += 1
                    break
                if in_values:
                    vals.append(_parse_value_term(p))
                elif tok is not None and tok.kind == "const":
                    p.i += 1
                    ents.append(self.constant(tok.text[1:], p, tok))
                elif tok is not None and tok.kind == "name":
                    p.i += 1
                    ents.append(EntityVariable(tok.text))
                else:
                    raise p.error("expected an entity term")
                sep = p.peek()
                if sep is None:
                    raise p.error("unterminated argument list")
                if sep.kind == ",":
                    p.i += 1
                elif sep.kind not in (";", ")"):
                    raise p.error(f"unexpected {sep.text!r} in argument list")
        decl = self.preds.get(name_tok.text)
        if decl is None:
            raise UndeclaredPredicateError(f"predicate {name_tok.text!r} is not declared", p.lineno, name_tok.col)
        if len(ents) != decl.entity_arity or len(vals) != decl.value_arity:
            raise ArityMismatchError(
                f"{decl.name} expects {decl.entity_arity} entity and {decl.value_arity} value args, "
                f"got {len(ents)} and {len(vals)}",
                p.lineno,
                name_tok.col,
            )
        return Atom(decl, tuple(ents) + tuple(vals))

    def rule(self, p: _LineParser):
        rid = None
        first = p.peek()
        nxt = p.peek(1)
        if first is not None and first.kind == "name" and nxt is not None and nxt.kind == ":":
            rid = first.text
            p.i += 2
        body = [self.atom(p)]
        while p.accept("&"):
            body.append(self.atom(p))
        p.expect("arrow2")
        head = [self.atom(p)]
        while p.accept("|"):
            head.append(self.atom(p))
        weight = 1.0
        if p.accept("dcolon"):
            tok = p.peek()
            weight = p.real()
            if not math.isfinite(weight):
                raise p.error("weight must be finite", tok)
        if not p.at_end():
            raise p.error("trailing tokens after rule")
        if rid is None:
            rid = f"r{len(self.rules) + 1}"
        if rid in self.ids:
            raise DuplicateRuleIdError(f"rule id {rid!r} used twice", p.lineno, first.col if first else None)
        try:
            rule = Rule(rid, tuple(body), tuple(head), weight)
        except UnboundVariableError as exc:
            raise UnboundVariableError(str(exc), p.lineno) from None
        except ValueError as exc:
            raise RuleSyntaxError(str(exc), p.lineno) from None
        self.ids.add(rid)
        self.rules.append(rule)


def parse_rules(text: str, constants: Sequence[str] | None = None) -> RuleSet:
    """Parse rule-language source into a :class:`RuleSet`.

    ``constants`` fixes the constant table; when omitted, ``@name`` constants
    are collected in order of first appearance.  Any error aborts the whole
    parse.
    """
    parser = _Parser(constants)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        toks = _tokenize(line, lineno)
        p = _LineParser(toks, lineno, len(line))
        if toks[0].kind == "name" and toks[0].text == "pred" and len(toks) > 1 and toks[1].kind == "name":
            parser.decl(p)
        else:
            parser.rule(p)
    return RuleSet(tuple(parser.preds.values()), tuple(parser.rules), tuple(parser.constants))


def render_rules(ruleset: RuleSet) -> str:
    lines = [p.render() for p in ruleset.predicates]
    lines += [r.render(ruleset.constants) for r in ruleset.rules]
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Łukasiewicz operators

_SLACK = 1e-9


class LukDomainError(ValueError):
    pass


class MissingScoreError(KeyError):
    pass


def _check(*xs):
    out = []
    for x in xs:
        a = np.asarray(x, dtype=float)
        if np.any(~np.isfinite(a)) or np.any(a < -_SLACK) or np.any(a > 1 + _SLACK):
            raise LukDomainError(f"soft truth value outside [0, 1]: {x!r}")
        out.append(np.clip(a, 0.0, 1.0))
    return out


def _ret(a):
    return float(a) if np.ndim(a) == 0 else a


def luk_and(a, b):
    """Łukasiewicz t-norm ``max(0, a + b - 1)``."""
    a, b = _check(a, b)
    return _ret(np.maximum(0.0, a + b - 1.0))


def luk_or(a, b):
    a, b = _check(a, b)
    return _ret(np.minimum(1.0, a + b))


def luk_implies(a, b):
    """Residuum of the Łukasiewicz t-norm, ``min(1, 1 - a + b)``."""
    a, b = _check(a, b)
    return _ret(np.minimum(1.0, 1.0 - a + b))


def luk_not(a):
    (a,) = _check(a)
    return _ret(1.0 - a)


def luk_and_n(values: Sequence[float]) -> float:
    # n-ary fold; associativity makes this max(0, sum - (n - 1))
    vals = _check(values)[0] if len(values) else np.ones(0)
    return float(max(0.0, vals.sum() - (len(vals) - 1))) if len(vals) else 1.0


def luk_or_n(values: Sequence[float]) -> float:
    vals = _check(values)[0] if len(values) else np.zeros(0)
    return float(min(1.0, vals.sum()))


def soft_truth(body_scores: Sequence[float], head_scores: Sequence[float]) -> float:
    """Soft truth of ``AND(body) => OR(head)``."""
    return luk_implies(luk_and_n(body_scores), luk_or_n(head_scores))


def rule_soft_truth(ground_rule, atom_scores: Mapping) -> float:
    """Łukasiewicz truth of one ground rule under ``atom_scores``.

    ``ground_rule`` needs ``body_keys`` and ``head_keys``; ``atom_scores``
    maps atom keys (or objects with a ``key``) to values in [0, 1].
    """
    scores = {getattr(k, "key", k): v for k, v in atom_scores.items()}

    def look(key):
        try:
            return scores[key]
        except KeyError:
            raise MissingScoreError(f"no score for ground atom {key}") from None

    return soft_truth([look(k) for k in ground_rule.body_keys], [look(k) for k in ground_rule.head_keys])
