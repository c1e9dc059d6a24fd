"""Synthetic task packs, metrics and dataset files.

Digit addition: each item is a tuple of 8x8 binary glyphs labelled only with
the sum of the digits they show.  Attribute zero-shot: each item is a noisy
attribute-indicator vector labelled with a class name; test classes never
appear in training and are described only by rules over the attributes.
"""

from __future__ import annotations

import base64
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .logic import PredicateKind, Rule, RuleSet, parse_rules
from .neural import ConceptNetwork, ConceptSpec, TaskNetwork

__all__ = [
    "Dataset",
    "Metrics",
    "TaskPack",
    "DatasetFormatError",
    "UncoverableClassError",
    "GLYPHS",
    "glyph",
    "gen_digit_dataset",
    "gen_digit_probe",
    "gen_multidigit_dataset",
    "make_addition_rules",
    "default_attribute_rules",
    "gen_attribute_dataset",
    "attribute_training_rules",
    "attribute_predicates",
    "class_rules_by_head",
    "accuracy",
    "save_dataset",
    "load_dataset",
    "digit_task",
    "attribute_task",
    "task_from_data",
    "Networks",
    "build_networks",
]

_GLYPH_ROWS = {
    0: ["..####..", ".#....#.", "#......#", "#......#", "#......#", "#......#", ".#....#.", "..####.."],
    1: ["...##...", "..###...", ".#.##...", "...##...", "...##...", "...##...", "...##...", ".######."],
    2: [".#####..", "#.....#.", "......#.", ".....#..", "...##...", "..#.....", ".#......", "#######."],
    3: ["######..", ".....#..", "....#...", "...###..", "......#.", "......#.", "#.....#.", ".#####.."],
    4: ["....##..", "...#.#..", "..#..#..", ".#...#..", "#######.", ".....#..", ".....#..", ".....#.."],
    5: ["#######.", "#.......", "#.......", "######..", "......#.", "......#.", "#.....#.", ".#####.."],
    6: ["..####..", ".#......", "#.......", "#.####..", "##....#.", "#.....#.", "#.....#.", ".#####.."],
    7: ["########", "......#.", ".....#..", "....#...", "...#....", "..#.....", "..#.....", "..#....."],
    8: [".#####..", "#.....#.", "#.....#.", ".#####..", "#.....#.", "#.....#.", "#.....#.", ".#####.."],
    9: [".#####..", "#.....#.", "#.....#.", ".######.", "......#.", ".....#..", "....#...", "..##...."],
}

GLYPHS = np.array(
    [[[c == "#" for c in row] for row in _GLYPH_ROWS[d]] for d in range(10)], dtype=np.uint8
).reshape(10, 64)


def glyph(d: int) -> np.ndarray:
    """Noiseless 8x8 template of digit ``d`` as a flat 0/1 vector."""
    return GLYPHS[d].astype(float)


class DatasetFormatError(ValueError):
    pass


class UncoverableClassError(ValueError):
    pass


@dataclass
class Dataset:
    """Items ``(n, slots, dim)`` with one task label each.

    Digit datasets carry digit sums only; per-digit identities are never
    stored here.
    """

    items: np.ndarray
    labels: np.ndarray
    split: str = "train"
    kind: str = "digit"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=float)
        if self.items.ndim == 2:
            self.items = self.items[:, None, :]
        self.labels = np.asarray(self.labels)
        if len(self.items) != len(self.labels):
            raise ValueError(f"{len(self.items)} items but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_slots(self) -> int:
        return self.items.shape[1]

    @property
    def dim(self) -> int:
        return self.items.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.items[idx], self.labels[idx], self.split, self.kind, dict(self.meta))


@dataclass(frozen=True)
class Metrics:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / (self.tp + self.tn + self.fp + self.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn, "acc": self.acc}


def accuracy(preds, labels, positive=None) -> Metrics:
    """Confusion counts and accuracy ``(tp + tn) / total``.

    With ``positive`` set, counts are one-vs-rest for that label.  Without it,
    the counts are for multiclass exact match: a correct prediction is a true
    positive and a wrong one a false positive, so ``acc`` is the fraction
    correct.
    """
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    if not preds:
        raise ValueError("accuracy needs at least one prediction")
    if positive is None:
        correct = sum(p == t for p, t in zip(preds, labels))
        return Metrics(tp=int(correct), tn=0, fp=len(preds) - int(correct), fn=0)
    tp = tn = fp = fn = 0
    for p, t in zip(preds, labels):
        pp, tt = p == positive, t == positive
        if pp and tt:
            tp += 1
        elif pp:
            fp += 1
        elif tt:
            fn += 1
        else:
            tn += 1
    return Metrics(tp, tn, fp, fn)


def _noisy(rng, clean: np.ndarray, noise: float) -> np.ndarray:
    flips = rng.random(clean.shape) < noise
    return np.where(flips, 1 - clean, clean).astype(np.uint8)


def _check_noise(noise: float) -> None:
    if not 0.0 <= noise <= 0.5:
        raise ValueError(f"glyph noise {noise} outside [0, 0.5]")


def _digit_items(rng, n: int, slots: int, noise: float):
    digits = rng.integers(0, 10, size=(n, slots))
    items = _noisy(rng, GLYPHS[digits], noise)
    return digits, items


def gen_digit_dataset(seed: int, n_pairs: int, glyph_noise: float = 0.1, split: str = "train") -> Dataset:
    """Pairs of digit glyphs labelled with their sum."""
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    _check_noise(glyph_noise)
    rng = np.random.default_rng(seed)
    digits, items = _digit_items(rng, n_pairs, 2, glyph_noise)
    return Dataset(items, digits.sum(1), split, "digit", {"noise": glyph_noise})


def gen_multidigit_dataset(seed: int, n_items: int, glyph_noise: float = 0.1, split: str = "test") -> Dataset:
    """Two 2-digit numbers as four glyphs ``(d1, d2, d3, d4)``, labelled ``d1d2 + d3d4``."""
    if n_items <= 0:
        raise ValueError("n_items must be positive")
    _check_noise(glyph_noise)
    rng = np.random.default_rng(seed)
    digits, items = _digit_items(rng, n_items, 4, glyph_noise)
    labels = 10 * digits[:, 0] + digits[:, 1] + 10 * digits[:, 2] + digits[:, 3]
    return Dataset(items, labels, split, "digit", {"noise": glyph_noise})


def gen_digit_probe(seed: int, n: int, glyph_noise: float = 0.1):
    """Single glyphs with their digit identities, for measuring concept accuracy.

    Evaluation only: this is the one place digit identities are exposed and
    nothing in training reads it.
    """
    _check_noise(glyph_noise)
    rng = np.random.default_rng(seed)
    digits, items = _digit_items(rng, n, 1, glyph_noise)
    return items.astype(float), digits[:, 0]


def make_addition_rules(num_digits: int) -> RuleSet:
    """Digit-addition rule over one-digit or two-digit numbers."""
    if num_digits == 1:
        text = (
            "pred digit/1+1 latent\n"
            "pred addition/0+1\n"
            "add1: digit(x; d1) & digit(y; d2) => addition(; 1*d1 + 1*d2 -> z)\n"
        )
    elif num_digits == 2:
        text = (
            "pred digit/1+1 latent\n"
            "pred addition/0+1\n"
            "add2: digit(a; d1) & digit(b; d2) & digit(c; d3) & digit(d; d4)"
            " => addition(; 10*d1 + 1*d2 + 10*d3 + 1*d4 -> z)\n"
        )
    else:
        raise ValueError(f"unsupported digit count {num_digits}; use 1 or 2")
    return parse_rules(text)


# -- attribute zero-shot ----------------------------------------------------

_DEFAULT_ATTRIBUTE_RULES = """\
# attributes
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred stripe/1 latent
pred hooves/1 latent
pred longneck/1 latent
pred mane/1 latent
pred black/1 latent
pred white/1 latent
pred aquatic/1 latent
pred horns/1 latent
pred bulky/1 latent
# training classes
pred leopard/1
pred tiger/1
pred horse/1
pred giraffe/1
pred cow/1
pred seal/1
pred lion/1
pred rhino/1
pred skunk/1
pred llama/1
pred gazelle/1
pred penguin/1
# unseen classes
pred zebra/1
pred cheetah/1
pred okapi/1
pred walrus/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x)
tiger_r: likecat(x) & stripe(x) & bulky(x) => tiger(x)
horse_r: hooves(x) & mane(x) & black(x) => horse(x)
giraffe_r: hooves(x) & longneck(x) & spot(x) => giraffe(x)
cow_r: hooves(x) & white(x) & horns(x) => cow(x)
seal_r: aquatic(x) & black(x) => seal(x)
lion_r: likecat(x) & tawny(x) & mane(x) => lion(x)
rhino_r: horns(x) & bulky(x) & black(x) => rhino(x)
skunk_r: stripe(x) & white(x) & black(x) => skunk(x)
llama_r: longneck(x) & white(x) & mane(x) => llama(x)
gazelle_r: hooves(x) & tawny(x) & longneck(x) & stripe(x) => gazelle(x)
penguin_r: aquatic(x) & white(x) & black(x) => penguin(x)
R2: stripe(x) & hooves(x) & white(x) => zebra(x)
cheetah_r: likecat(x) & spot(x) & longneck(x) => cheetah(x)
cheetah_alt: likecat(x) & tawny(x) & bulky(x) => cheetah(x)
okapi_r: hooves(x) & stripe(x) & longneck(x) => okapi(x)
okapi_alt: hooves(x) & mane(x) & white(x) => okapi(x)
walrus_r: aquatic(x) & bulky(x) & horns(x) => walrus(x)
walrus_alt: aquatic(x) & white(x) & black(x) => walrus(x)
"""

DEFAULT_TRAIN_CLASSES = ("leopard", "tiger", "horse", "giraffe", "cow", "seal", "lion", "rhino",
                         "skunk", "llama", "gazelle", "penguin")
DEFAULT_TEST_CLASSES = ("zebra", "cheetah", "okapi", "walrus")


def default_attribute_rules() -> RuleSet:
    """Class rules for the built-in zero-shot pack.

    The first rule for each class generates its items; later rules with the
    same head are alternative descriptions that compete at explanation time.
    """
    return parse_rules(_DEFAULT_ATTRIBUTE_RULES)


def _is_class_rule(rule: Rule) -> bool:
    return (len(rule.head) == 1 and rule.head[0].predicate.entity_arity == 1
            and all(a.predicate.entity_arity == 1 and a.predicate.value_arity == 0 for a in rule.atoms))


def class_rules_by_head(rules: RuleSet) -> dict[str, list[Rule]]:
    """Class name -> rules concluding it, in file order."""
    out: dict[str, list[Rule]] = {}
    for r in rules.rules:
        if _is_class_rule(r):
            out.setdefault(r.head[0].predicate.name, []).append(r)
    return out


def attribute_predicates(rules: RuleSet) -> list[str]:
    """Names of predicates used in class-rule bodies, in declaration order."""
    used = set()
    for rs in class_rules_by_head(rules).values():
        for r in rs:
            used.update(a.predicate.name for a in r.body)
    return [p.name for p in rules.predicates if p.name in used]


def _split_classes(rules: RuleSet, test_classes):
    heads = list(class_rules_by_head(rules))
    if test_classes is None:
        k = max(1, len(heads) // 3)
        test_classes = heads[-k:]
    test = [c for c in heads if c in set(test_classes)]
    missing = set(test_classes) - set(heads)
    if missing:
        raise ValueError(f"no rule concludes test classes {sorted(missing)}")
    train = [c for c in heads if c not in set(test)]
    return train, test


def gen_attribute_dataset(seed: int, n_per_class: int, class_rules: RuleSet, test_classes=None,
                          noise: float = 0.1) -> dict[str, Dataset]:
    """Noisy attribute vectors for every class, split into seen/unseen classes.

    Returns ``{"train": ..., "test": ...}``.  Each class's first rule fixes
    which attributes are on; every bit then flips with probability ``noise``.
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    if not 0.0 <= noise <= 0.5:
        raise ValueError(f"noise {noise} outside [0, 0.5]")
    by_head = class_rules_by_head(class_rules)
    attrs = attribute_predicates(class_rules)
    train, test = _split_classes(class_rules, test_classes)
    trainable = set()
    for c in train:
        for r in by_head[c]:
            trainable.update(a.predicate.name for a in r.body)
    for c in test:
        for r in by_head[c]:
            lost = sorted({a.predicate.name for a in r.body} - trainable)
            if lost:
                raise UncoverableClassError(f"class {c} (rule {r.id}) uses attributes never seen in training: {lost}")
    rng = np.random.default_rng(seed)
    col = {a: i for i, a in enumerate(attrs)}
    out = {}
    for split, classes in (("train", train), ("test", test)):
        items, labels = [], []
        for c in classes:
            clean = np.zeros(len(attrs), dtype=np.uint8)
            for a in by_head[c][0].body:
                clean[col[a.predicate.name]] = 1
            block = _noisy(rng, np.tile(clean, (n_per_class, 1)), noise)
            items.append(block)
            labels += [c] * n_per_class
        meta = {"attributes": attrs, "classes": list(classes), "noise": noise}
        out[split] = Dataset(np.concatenate(items), np.array(labels), split, "attribute", meta)
    return out


def attribute_training_rules(class_rules: RuleSet, train_classes: Sequence[str]) -> RuleSet:
    """Rules used while training on seen classes.

    For every seen class: its class rules, one definition rule per body
    attribute (``class => attribute``), and for every attribute a coverage
    rule ``attribute => class_1 | ... | class_k`` over seen classes having it.
    """
    by_head = class_rules_by_head(class_rules)
    attrs = attribute_predicates(class_rules)
    lines = []
    used = set()
    for c in train_classes:
        used.add(c)
        for r in by_head[c]:
            used.update(a.predicate.name for a in r.body)
    for p in class_rules.predicates:
        if p.name in used:
            lines.append(f"pred {p.name}/{p.entity_arity}" + (" latent" if p.kind is PredicateKind.LATENT else ""))
    has: dict[str, list[str]] = {a: [] for a in attrs}
    for c in train_classes:
        body_attrs = []
        for r in by_head[c]:
            lines.append(r.render())
            for a in r.body:
                if a.predicate.name not in body_attrs:
                    body_attrs.append(a.predicate.name)
        for a in body_attrs:
            lines.append(f"def_{c}_{a}: {c}(x) => {a}(x) :: 1.0")
            has[a].append(c)
    for a in attrs:
        if has[a]:
            lines.append(f"cov_{a}: {a}(x) => " + " | ".join(f"{c}(x)" for c in has[a]) + " :: 1.0")
    return parse_rules("\n".join(lines) + "\n")


# -- task packs ---------------------------------------------------------------

@dataclass(frozen=True)
class TaskPack:
    """Everything the trainer needs to know about a task.

    ``label_keys[k]`` is the ground-atom key bridged to task label ``k``;
    ``concepts`` are the predicates scored by the concept network.
    """

    kind: str
    n_slots: int
    input_dim: int
    labels: tuple
    rules: RuleSet
    value_domains: Mapping[str, tuple]
    label_keys: tuple
    label_predicates: frozenset
    concepts: tuple

    @property
    def constants(self) -> tuple[str, ...]:
        return tuple(f"c{i}" for i in range(self.n_slots))

    def label_index(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"label {label!r} is not a task label") from None

    def encode_labels(self, labels) -> np.ndarray:
        lookup = {lab: i for i, lab in enumerate(self.labels)}
        try:
            return np.array([lookup[self._norm(l)] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"label {exc.args[0]!r} is not a task label") from None

    def _norm(self, label):
        return int(label) if self.kind == "digit" else str(label)


def _concepts_for(rules: RuleSet, label_preds, value_domains) -> tuple[ConceptSpec, ...]:
    specs = []
    used = set()
    for r in rules.rules:
        used |= r.predicate_names
    for p in rules.predicates:
        if p.name in label_preds or p.name not in used:
            continue
        if p.value_arity == 1 and p.entity_arity == 1:
            specs.append(ConceptSpec(p.name, "value", len(value_domains[p.name])))
        elif p.value_arity == 0 and p.entity_arity == 1:
            specs.append(ConceptSpec(p.name, "unary"))
        elif p.value_arity == 0 and p.entity_arity == 2:
            specs.append(ConceptSpec(p.name, "binary"))
        else:
            raise ValueError(f"no concept scorer fits predicate {p.name}/{p.entity_arity}+{p.value_arity}")
    return tuple(specs)


def digit_task(rules: RuleSet | None = None, n_slots: int = 2, input_dim: int = 64) -> TaskPack:
    """Weakly supervised digit addition: labels are sums, bridged to ``addition``."""
    rules = rules or make_addition_rules(1)
    targets = [p for p in rules.predicates if p.entity_arity == 0 and p.value_arity == 1]
    if len(targets) != 1:
        raise ValueError("digit rules need exactly one entity-free value predicate for the sum")
    target = targets[0].name
    top = 9 * n_slots
    domains = {p.name: tuple(range(10)) for p in rules.predicates if p.value_arity}
    domains[target] = tuple(range(top + 1))
    labels = tuple(range(top + 1))
    keys = tuple(f"{target}(;{v})" for v in labels)
    return TaskPack("digit", n_slots, input_dim, labels, rules, domains, keys, frozenset([target]),
                    _concepts_for(rules, {target}, domains))


def attribute_task(class_rules: RuleSet, train_classes: Sequence[str], input_dim: int) -> TaskPack:
    """Seen-class classification over attribute vectors, trained through attribute rules."""
    rules = attribute_training_rules(class_rules, train_classes)
    labels = tuple(train_classes)
    keys = tuple(f"{c}(c0)" for c in labels)
    return TaskPack("attribute", 1, input_dim, labels, rules, {}, keys, frozenset(labels),
                    _concepts_for(rules, set(labels), {}))


def task_from_data(rules: RuleSet, header: Mapping[str, str]) -> TaskPack:
    """Rebuild the task pack described by a dataset file header."""
    kind = header.get("kind", "digit")
    slots = int(header.get("slots", 2))
    dim = int(header.get("dim", 64))
    if kind == "digit":
        return digit_task(rules, slots, dim)
    if kind == "attribute":
        train = [c for c in header.get("classes", "").split(",") if c]
        if not train:
            raise DatasetFormatError("attribute dataset header lists no training classes")
        return attribute_task(rules, train, dim)
    raise DatasetFormatError(f"unknown dataset kind {kind!r}")


# -- dataset files ----------------------------------------------------------------

def save_dataset(path, splits: Iterable[Dataset] | Dataset, header: Mapping[str, str] | None = None) -> None:
    """Write datasets as ``split<TAB>label<TAB>base64(uint8 grid)`` lines.

    The first line is a ``# key=value ...`` header with kind, slots and dim.
    """
    if isinstance(splits, Dataset):
        splits = [splits]
    splits = list(splits)
    if not splits:
        raise ValueError("nothing to save")
    first = splits[0]
    head = {"kind": first.kind, "slots": str(first.n_slots), "dim": str(first.dim)}
    head.update(header or {})
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in head.items()) + "\n")
    for ds in splits:
        if ds.items.shape[1:] != first.items.shape[1:]:
            raise ValueError("all splits must share the item shape")
        raw = ds.items.astype(np.uint8)
        if not np.array_equal(raw, ds.items):
            raise ValueError("dataset files store integer grids in 0..255")
        for x, lab in zip(raw, ds.labels):
            buf.write(f"{ds.split}\t{lab}\t{base64.b64encode(x.tobytes()).decode('ascii')}\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_header(line: str) -> dict[str, str]:
    out = {}
    for tok in line.lstrip("#").split():
        k, sep, v = tok.partition("=")
        if sep:
            out[k] = v
    return out


def load_dataset(path, split: str | None = None):
    """Read a dataset file.

    Returns ``(header, {split: Dataset})``, or ``(header, Dataset)`` when
    ``split`` is given.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetFormatError(f"cannot read dataset {path}: {exc}") from None
    header: dict[str, str] = {}
    rows: dict[str, tuple[list, list]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if n == 1:
                header = _parse_header(line)
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetFormatError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        sp, lab, blob = parts
        try:
            raw = np.frombuffer(base64.b64decode(blob, validate=True), dtype=np.uint8)
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{n}: bad base64 payload ({exc})") from None
        xs, ls = rows.setdefault(sp, ([], []))
        xs.append(raw)
        ls.append(lab)
    kind = header.get("kind", "digit")
    slots = int(header.get("slots", 1))
    first = next((xs[0] for xs, _ in rows.values() if xs), None)
    dim = int(header.get("dim", (first.size // slots) if first is not None else 0))
    out = {}
    for sp, (xs, ls) in rows.items():
        for i, x in enumerate(xs):
            if x.size != slots * dim:
                raise DatasetFormatError(f"{path}: split {sp} item {i} has {x.size} values, expected {slots}x{dim}")
        items = np.stack(xs).reshape(len(xs), slots, dim).astype(float)
        labels = np.array([int(l) for l in ls]) if kind == "digit" else np.array(ls)
        out[sp] = Dataset(items, labels, sp, kind, dict(header))
    if split is not None:
        if split not in out:
            raise DatasetFormatError(f"{path}: no {split!r} split (have {sorted(out)})")
        return header, out[split]
    return header, out


@dataclass
class Networks:
    """A task network and a concept network trained for one task pack."""

    task: TaskNetwork
    concept: ConceptNetwork
    pack: TaskPack

    def concept_atom_score(self, atom, features) -> float:
        """Score of one ground atom; ``features`` is indexed by constant."""
        name = atom.predicate.name
        if name not in self.concept.specs:
            raise KeyError(f"predicate {name} has no trained concept scorer")
        out = self.concept.score(name, [features[c] for c in atom.entity_args])
        if self.concept.specs[name].kind == "value":
            return float(out[self.pack.value_domains[name].index(atom.value_args[0])])
        return float(out)


def build_networks(pack: TaskPack, hidden: int = 64, feature_dim: int = 64, seed: int = 0,
                   zero_head: bool = False) -> Networks:
    """Fresh networks for ``pack``; the two networks draw from separate seeds."""
    ss = np.random.SeedSequence(seed).spawn(2)
    task = TaskNetwork(pack.input_dim, len(pack.labels), pack.n_slots, hidden, feature_dim,
                       seed=int(ss[0].generate_state(1)[0]), zero_head=zero_head)
    concept = ConceptNetwork(pack.concepts, feature_dim, seed=int(ss[1].generate_state(1)[0]))
    return Networks(task, concept, pack)
