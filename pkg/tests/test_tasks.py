import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_array_equal

from nesymln.logic import ValueExpr, parse_rules
from nesymln.tasks import (
    DEFAULT_TEST_CLASSES,
    DEFAULT_TRAIN_CLASSES,
    GLYPHS,
    DatasetFormatError,
    UncoverableClassError,
    accuracy,
    attribute_task,
    class_rules_by_head,
    default_attribute_rules,
    digit_task,
    gen_attribute_dataset,
    gen_digit_dataset,
    gen_digit_probe,
    gen_multidigit_dataset,
    load_dataset,
    make_addition_rules,
    save_dataset,
)

LEOPARD = """\
pred likecat/1 latent
pred tawny/1 latent
pred spot/1 latent
pred stripe/1 latent
pred hooves/1 latent
pred white/1 latent
pred leopard/1
pred zebra/1
R1: likecat(x) & tawny(x) & spot(x) => leopard(x)
R2: stripe(x) & hooves(x) & white(x) => zebra(x)
"""


# -- digits --------------------------------------------------------------------------

def test_noiseless_pair_matches_templates():
    ds = gen_digit_dataset(3, 200, glyph_noise=0.0)
    for x, y in zip(ds.items, ds.labels):
        a = int(np.flatnonzero((GLYPHS == x[0]).all(1))[0])
        b = int(np.flatnonzero((GLYPHS == x[1]).all(1))[0])
        assert a + b == y
    (i,) = np.flatnonzero([(x[0] == GLYPHS[4]).all() and (x[1] == GLYPHS[3]).all() for x in ds.items])[:1]
    assert ds.labels[i] == 7


def test_glyphs_are_distinct():
    assert len({g.tobytes() for g in GLYPHS}) == 10


def test_digit_generation_is_deterministic():
    a, b = gen_digit_dataset(11, 50), gen_digit_dataset(11, 50)
    assert_array_equal(a.items, b.items)
    assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.items, gen_digit_dataset(12, 50).items)


def test_sum_histogram_is_triangular():
    ds = gen_digit_dataset(0, 10_000, glyph_noise=0.0)
    counts = np.bincount(ds.labels, minlength=19)
    # number of (d1, d2) pairs with d1 + d2 = s, by counting
    ways = np.array([sum(1 for a in range(10) for b in range(10) if a + b == s) for s in range(19)])
    expect = 10_000 * ways / 100
    sigma = np.sqrt(expect * (1 - ways / 100))
    assert np.all(np.abs(counts - expect) <= 4 * sigma)
    assert counts.argmax() in (8, 9, 10)
    assert ways.argmax() == 9


def test_weak_supervision_only_sums():
    ds = gen_digit_dataset(0, 10)
    assert ds.labels.shape == (10,)
    assert set(ds.meta) == {"noise"}


def test_multidigit_labels():
    ds = gen_multidigit_dataset(1, 50, glyph_noise=0.0)
    digits = np.array([[np.flatnonzero((GLYPHS == g).all(1))[0] for g in x] for x in ds.items])
    assert_array_equal(ds.labels, 10 * digits[:, 0] + digits[:, 1] + 10 * digits[:, 2] + digits[:, 3])


def test_probe_identities():
    x, d = gen_digit_probe(0, 30, glyph_noise=0.0)
    assert_array_equal(x[:, 0], GLYPHS[d])


@pytest.mark.parametrize("bad", [-0.1, 0.6])
def test_noise_range(bad):
    with pytest.raises(ValueError):
        gen_digit_dataset(0, 5, glyph_noise=bad)


def test_noise_flip_rate():
    ds = gen_digit_dataset(2, 5000, glyph_noise=0.1)
    # distance to the nearest template; expected flips are 0.1 * 64 = 6.4 per glyph
    dist = np.abs(ds.items[:, :, None, :] - GLYPHS[None, None]).sum(-1).min(-1)
    assert dist.mean() == pytest.approx(6.4, abs=0.3)


# -- rules ---------------------------------------------------------------------------------

def test_addition_rules():
    r1 = make_addition_rules(1).rules
    assert len(r1) == 1 and len(r1[0].body) == 2
    (r2,) = make_addition_rules(2).rules
    assert len(r2.body) == 4
    expr = r2.head[0].value_args[0]
    assert isinstance(expr, ValueExpr)
    assert [c for c, _ in expr.coefficients] == [10, 1, 10, 1]
    with pytest.raises(ValueError):
        make_addition_rules(3)


def test_digit_task_pack():
    pack = digit_task()
    assert pack.labels == tuple(range(19))
    assert pack.label_keys[5] == "addition(;5)"
    assert [c.name for c in pack.concepts] == ["digit"]


# -- attributes ----------------------------------------------------------------------------

def test_leopard_noiseless_vector():
    rs = parse_rules(LEOPARD + "pred lynx/1\nR3: likecat(x) & spot(x) => lynx(x)\n")
    data = gen_attribute_dataset(0, 5, rs, test_classes=["lynx"], noise=0.0)
    attrs = data["train"].meta["attributes"]
    first = list(data["train"].labels).index("leopard")
    on = {attrs[i] for i in np.flatnonzero(data["train"].items[first, 0])}
    assert on == {"likecat", "tawny", "spot"}


def test_uncoverable_class():
    # zebra's attributes never occur in a seen class
    with pytest.raises(UncoverableClassError):
        gen_attribute_dataset(0, 5, parse_rules(LEOPARD), test_classes=["zebra"])


def test_default_split_is_disjoint_and_covered():
    rules = default_attribute_rules()
    data = gen_attribute_dataset(0, 4, rules, DEFAULT_TEST_CLASSES)
    train, test = set(data["train"].labels), set(data["test"].labels)
    assert not train & test
    assert train == set(DEFAULT_TRAIN_CLASSES)
    by_head = class_rules_by_head(rules)
    seen = {a.predicate.name for c in train for r in by_head[c] for a in r.body}
    for c in test:
        for r in by_head[c]:
            assert {a.predicate.name for a in r.body} <= seen


def test_attribute_hamming_distance():
    rules = default_attribute_rules()
    data = gen_attribute_dataset(5, 2000, rules, DEFAULT_TEST_CLASSES, noise=0.1)
    clean = gen_attribute_dataset(5, 1, rules, DEFAULT_TEST_CLASSES, noise=0.0)
    dim = data["train"].dim
    ham = []
    for c, x in zip(data["train"].labels, data["train"].items):
        tmpl = clean["train"].items[list(clean["train"].labels).index(c)]
        ham.append(np.abs(x - tmpl).sum())
    n = len(ham)
    sd = np.sqrt(dim * 0.1 * 0.9 / n)
    assert np.mean(ham) == pytest.approx(0.1 * dim, abs=5 * sd)


def test_attribute_generation_is_deterministic():
    rules = default_attribute_rules()
    a = gen_attribute_dataset(9, 3, rules, DEFAULT_TEST_CLASSES)
    b = gen_attribute_dataset(9, 3, rules, DEFAULT_TEST_CLASSES)
    assert_array_equal(a["test"].items, b["test"].items)


def test_attribute_task_pack():
    pack = attribute_task(default_attribute_rules(), DEFAULT_TRAIN_CLASSES, input_dim=10)
    assert pack.label_keys[0] == f"{DEFAULT_TRAIN_CLASSES[0]}(c0)"
    assert all(c.kind == "unary" for c in pack.concepts)


# -- metrics ---------------------------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]).acc == 1.0
    assert accuracy([1, 1, 0], [0, 0, 1], positive=1).acc == 0.0
    m = accuracy([1, 1, 0, 1], [1, 1, 0, 0], positive=1)
    assert (m.tp, m.tn, m.fp, m.fn) == (2, 1, 1, 0)
    assert m.acc == 0.75


def test_multiclass_accuracy_is_fraction_correct():
    assert accuracy([3, 4, 5, 6], [3, 4, 0, 6]).acc == 0.75


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])
    with pytest.raises(ValueError):
        accuracy([], [])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_accuracy_identity(pairs):
    p, t = zip(*pairs)
    for pos in (None, 0):
        m = accuracy(p, t, positive=pos)
        assert m.tp + m.tn + m.fp + m.fn == len(pairs)
        assert m.acc == pytest.approx((m.tp + m.tn) / len(pairs))


# -- files -------------------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    train, test = gen_digit_dataset(0, 20), gen_digit_dataset(1, 7, split="test")
    path = tmp_path / "d.tsv"
    save_dataset(path, [train, test])
    header, splits = load_dataset(path)
    assert header["kind"] == "digit"
    assert_array_equal(splits["train"].items, train.items)
    assert_array_equal(splits["test"].labels, test.labels)


def test_attribute_round_trip(tmp_path):
    data = gen_attribute_dataset(0, 3, default_attribute_rules(), DEFAULT_TEST_CLASSES)
    path = tmp_path / "a.tsv"
    save_dataset(path, [data["train"], data["test"]], {"classes": ",".join(DEFAULT_TRAIN_CLASSES)})
    header, ds = load_dataset(path, split="test")
    assert list(ds.labels) == list(data["test"].labels)


def test_loader_rejects_bad_rows(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("# kind=digit slots=2 dim=64\ntrain\t3\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)
    p.write_text("# kind=digit slots=2 dim=64\ntrain\t3\tAAAA\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "missing.tsv")
