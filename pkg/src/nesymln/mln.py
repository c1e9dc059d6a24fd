"""Markov logic network layer: rule potentials, exact partition function,
blanket conditionals, pseudo-log-likelihood and weight learning.

Everything below works on a :class:`CompiledGraph`, an array form of an
:class:`~nesymln.grounding.MlnGraph` whose methods accept assignment arrays
with arbitrary leading batch dimensions ``(..., n_atoms)``.  The public
functions take graphs and dict/array assignments and delegate to it.
"""

from __future__ import annotations

import itertools
import logging
from typing import Mapping

import numpy as np
from scipy import sparse
from scipy.special import expit, log_expit, logsumexp

from .grounding import MlnGraph, UnknownAtomError

__all__ = [
    "CompiledGraph",
    "MissingAssignmentError",
    "TooManyAtomsError",
    "DivergenceError",
    "compile_graph",
    "as_assignment",
    "as_weights",
    "rule_potential",
    "log_joint_unnormalized",
    "partition_exact",
    "conditional",
    "pseudo_log_likelihood",
    "weight_gradient",
    "m_step",
    "potentials_tsv",
    "EXACT_ATOM_CAP",
]

log = logging.getLogger(__name__)

EXACT_ATOM_CAP = 20


class MissingAssignmentError(KeyError):
    pass


class TooManyAtomsError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


class CompiledGraph:
    """Index arrays for one ground network.

    Padding uses two sentinel columns appended to every assignment: column
    ``n`` holds 1.0 (neutral inside a Łukasiewicz conjunction) and column
    ``n + 1`` holds 0.0 (neutral inside a disjunction).
    """

    def __init__(self, graph: MlnGraph, groups: bool = True):
        self.graph = graph
        self.rule_ids = tuple(graph.rule_ids)
        self.n_atoms = n = len(graph.atoms)
        self.n_rules = len(self.rule_ids)
        rid = {r: i for i, r in enumerate(self.rule_ids)}
        grs = graph.ground_rules
        self.n_ground = len(grs)
        self.g_rule = np.array([rid[g.rule.id] for g in grs], dtype=np.int64)
        mb = max((len(g.body) for g in grs), default=1)
        mh = max((len(g.head) for g in grs), default=1)
        self.body = np.full((self.n_ground, mb), n, dtype=np.int64)
        self.head = np.full((self.n_ground, mh), n + 1, dtype=np.int64)
        self.n_body = np.array([len(g.body) for g in grs], dtype=float)
        for gi, g in enumerate(grs):
            self.body[gi, : len(g.body)] = g.body
            self.head[gi, : len(g.head)] = g.head
        # ground-rule -> rule indicator
        self.rule_onehot = np.zeros((self.n_ground, self.n_rules))
        if self.n_ground:
            self.rule_onehot[np.arange(self.n_ground), self.g_rule] = 1.0

        # (ground rule, distinct atom) incidences with occurrence counts
        inc_g, inc_a, inc_nb, inc_nh = [], [], [], []
        for gi, g in enumerate(grs):
            for a in sorted(set(g.body + g.head)):
                inc_g.append(gi)
                inc_a.append(a)
                inc_nb.append(g.body.count(a))
                inc_nh.append(g.head.count(a))
        self.inc_g = np.array(inc_g, dtype=np.int64)
        self.inc_a = np.array(inc_a, dtype=np.int64)
        self.inc_nb = np.array(inc_nb, dtype=float)
        self.inc_nh = np.array(inc_nh, dtype=float)
        self.inc_rule = self.g_rule[self.inc_g] if len(inc_g) else np.zeros(0, dtype=np.int64)

        self.observed_mask = np.array([a.observed is not None for a in graph.atoms], dtype=bool)
        self.observed_values = np.array([a.score for a in graph.atoms], dtype=float)

        # categorical groups among unobserved value-typed atoms
        self.group_of = np.full(n, -1, dtype=np.int64)
        self.groups: list[np.ndarray] = []
        if groups:
            members: dict = {}
            for i, a in enumerate(graph.atoms):
                if a.group is not None:
                    members.setdefault(a.group, []).append(i)
            for gi, (key, idx) in enumerate(members.items()):
                self.groups.append(np.array(idx, dtype=np.int64))
                self.group_of[idx] = gi
        self._compile_factors()
        n_inc = len(self.inc_g)
        # incidence -> (atom, rule) scatter
        self._inc_scatter = sparse.csr_matrix(
            (np.ones(n_inc), (np.arange(n_inc), self.inc_a * max(self.n_rules, 1) + self.inc_rule)),
            shape=(n_inc, self.n_atoms * max(self.n_rules, 1)),
        )

    # -- helpers ---------------------------------------------------------

    def extend(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        pad = np.zeros(q.shape[:-1] + (2,))
        pad[..., 0] = 1.0
        return np.concatenate([q, pad], axis=-1)

    def full_assignment(self, q=None) -> np.ndarray:
        """Fill observed atoms with their evidence."""
        base = np.where(self.observed_mask, self.observed_values, 0.5)
        if q is None:
            return base
        q = np.asarray(q, dtype=float)
        return np.where(self.observed_mask, self.observed_values, q)

    def weight_array(self, weights) -> np.ndarray:
        return as_weights(weights, self.rule_ids)

    # -- Łukasiewicz potentials -----------------------------------------

    def _sums(self, q):
        qe = self.extend(q)
        bs = qe[..., self.body].sum(-1)
        hs = qe[..., self.head].sum(-1)
        return bs, hs

    def _truth_from_sums(self, bs, hs, nb_pad):
        conj = np.maximum(0.0, bs - (nb_pad - 1.0))
        disj = np.minimum(1.0, hs)
        return np.minimum(1.0, 1.0 - conj + disj)

    def ground_truth(self, q) -> np.ndarray:
        """Łukasiewicz truth of every ground rule, shape ``(..., n_ground)``."""
        bs, hs = self._sums(q)
        return self._truth_from_sums(bs, hs, self.body.shape[1])

    def potentials(self, q) -> np.ndarray:
        """Per-rule sum of ground-rule truths, shape ``(..., n_rules)``."""
        return self.ground_truth(q) @ self.rule_onehot

    def log_joint(self, q, weights) -> np.ndarray:
        return self.potentials(q) @ self.weight_array(weights)

    def _forced_truths(self, q):
        # truth of each incidence's ground rule with its atom forced to 0 / 1
        q = np.asarray(q, dtype=float)
        bs, hs = self._sums(q)
        mb = self.body.shape[1]
        bs_i = bs[..., self.inc_g]
        hs_i = hs[..., self.inc_g]
        qa = q[..., self.inc_a]
        out = []
        for f in (0.0, 1.0):
            b = bs_i + self.inc_nb * (f - qa)
            h = hs_i + self.inc_nh * (f - qa)
            out.append(self._truth_from_sums(b, h, mb))
        return out

    def local_counts(self, q) -> np.ndarray:
        """``c[..., i, r]``: change in rule r's potential when atom i flips 0 -> 1."""
        t0, t1 = self._forced_truths(q)
        diff = t1 - t0
        lead = diff.shape[:-1]
        if not self.n_rules:
            return np.zeros(lead + (self.n_atoms, 0))
        d = diff.reshape((-1, diff.shape[-1]))
        out = np.asarray((self._inc_scatter.T @ d.T).T)
        return out.reshape(lead + (self.n_atoms, self.n_rules))

    def local_delta(self, q, weights) -> np.ndarray:
        """Log-odds of ``P(A_i = 1 | MB)`` for every atom, shape ``(..., n_atoms)``."""
        return self.local_counts(q) @ self.weight_array(weights)

    def conditionals(self, q, weights) -> np.ndarray:
        return expit(self.local_delta(q, weights))

    def pll(self, q, weights) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        delta = self.local_delta(q, weights)
        return (q * log_expit(delta) + (1.0 - q) * log_expit(-delta)).sum(-1)

    def pll_gradient(self, q, weights, form: str = "exact") -> np.ndarray:
        q = np.asarray(q, dtype=float)
        c = self.local_counts(q)
        w = self.weight_array(weights)
        p = expit(c @ w)
        resid = q - p
        if form == "exact":
            return np.einsum("...i,...ir->...r", resid, c)
        if form == "indicator":
            # rule-count factor replaced by the connection indicator
            touches = (c != 0) | self._touch_mask()
            return np.einsum("...i,...ir->...r", resid, touches.astype(float))
        raise ValueError(f"unknown gradient form {form!r}")

    def _touch_mask(self) -> np.ndarray:
        m = np.zeros((self.n_atoms, self.n_rules), dtype=bool)
        if len(self.inc_a):
            m[self.inc_a, self.inc_rule] = True
        return m

    # -- mean-field expectations ----------------------------------------

    def _compile_factors(self):
        """Violation probability of each ground rule under a factorised Q.

        A ground rule is violated when its body holds and its head fails.
        Under independent Bernoulli atoms plus categorical groups this
        probability is a product of affine factors of q; each factor is
        ``const + sum_k coef_k * q_k``.
        """
        n = self.n_atoms
        consts, rows, cols, vals, owners = [], [], [], [], []
        per_ground: list[list[int]] = []
        for gi, g in enumerate(self.graph.ground_rules):
            mine = []
            body = set(g.body)
            head = set(g.head)
            if body & head:
                mine.append(len(consts))
                consts.append(0.0)
                owners.append(gi)
                per_ground.append(mine)
                continue
            by_group: dict = {}
            for a in body:
                by_group.setdefault(self.group_of[a] if self.group_of[a] >= 0 else ("b", a), [set(), set()])[0].add(a)
            for a in head:
                by_group.setdefault(self.group_of[a] if self.group_of[a] >= 0 else ("h", a), [set(), set()])[1].add(a)
            for key, (bset, hset) in by_group.items():
                f = len(consts)
                mine.append(f)
                owners.append(gi)
                if isinstance(key, tuple):
                    (a,) = bset or hset
                    if bset:
                        consts.append(0.0)
                        rows.append(f), cols.append(a), vals.append(1.0)
                    else:
                        consts.append(1.0)
                        rows.append(f), cols.append(a), vals.append(-1.0)
                elif len(bset) > 1:
                    consts.append(0.0)
                elif len(bset) == 1:
                    (a,) = bset
                    consts.append(0.0)
                    rows.append(f), cols.append(a), vals.append(1.0)
                else:
                    consts.append(1.0)
                    for a in hset:
                        rows.append(f), cols.append(a), vals.append(-1.0)
            per_ground.append(mine)
        nf = len(consts)
        self.fac_const = np.array(consts, dtype=float)
        self.fac_coef = sparse.csr_matrix((vals, (rows, cols)), shape=(nf, n))
        mf = max((len(m) for m in per_ground), default=1)
        self.fac_index = np.full((self.n_ground, mf), nf, dtype=np.int64)
        for gi, m in enumerate(per_ground):
            self.fac_index[gi, : len(m)] = m
        # (ground rule, slot) -> factor scatter for the backward pass
        flat = self.fac_index.ravel()
        keep = flat < nf
        self._fac_scatter = sparse.csr_matrix(
            (np.ones(int(keep.sum())), (np.flatnonzero(keep), flat[keep])), shape=(flat.size, nf)
        )

    def _factor_values(self, q):
        q = np.asarray(q, dtype=float)
        lead = q.shape[:-1]
        flat = q.reshape((-1, self.n_atoms))
        fv = np.asarray((self.fac_coef @ flat.T).T) + self.fac_const
        fv = np.concatenate([fv, np.ones((fv.shape[0], 1))], axis=-1)
        return fv.reshape(lead + (fv.shape[-1],))

    def violation(self, q) -> np.ndarray:
        """Probability that each ground rule is false under the factorised Q."""
        return self._factor_values(q)[..., self.fac_index].prod(-1)

    def violation_grad(self, q, upstream) -> np.ndarray:
        """Vector-Jacobian product of :meth:`violation` with ``upstream``."""
        F = self._factor_values(q)[..., self.fac_index]  # (..., G, mf)
        ones = np.ones(F.shape[:-1] + (1,))
        prefix = np.concatenate([ones, np.cumprod(F[..., :-1], axis=-1)], axis=-1)
        suffix = np.concatenate([np.cumprod(F[..., ::-1][..., :-1], axis=-1)[..., ::-1], ones], axis=-1)
        others = prefix * suffix  # d prod / d F_k
        d_f = others * np.asarray(upstream)[..., None]
        lead = F.shape[:-2]
        flat_f = d_f.reshape((-1, F.shape[-2] * F.shape[-1]))
        d_fac = np.asarray((self._fac_scatter.T @ flat_f.T).T)
        d_q = np.asarray((self.fac_coef.T @ d_fac.T).T)
        return d_q.reshape(lead + (self.n_atoms,))

    def expected_potentials(self, q) -> np.ndarray:
        """``E_Q[potential_r]``: expected number of satisfied groundings per rule."""
        return (1.0 - self.violation(q)) @ self.rule_onehot

    def expected_log_joint(self, q, weights) -> np.ndarray:
        return self.expected_potentials(q) @ self.weight_array(weights)

    def expected_log_joint_grad(self, q, weights) -> np.ndarray:
        w = self.weight_array(weights)
        up = -np.broadcast_to(w[self.g_rule], np.shape(q)[:-1] + (self.n_ground,))
        return self.violation_grad(q, up)

    def masked_entropy(self, q, mask):
        """Entropy of ``Q`` restricted to ``mask`` and its gradient.

        Groups lying wholly inside ``mask`` count as categoricals; other
        masked atoms as independent Bernoullis.
        """
        q = np.asarray(q, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        cat = np.zeros(self.n_atoms, dtype=bool)
        for g in self.groups:
            if mask[g].all():
                cat[g] = True
        bern = mask & ~cat
        qc = np.clip(q, 1e-300, 1.0)
        q1 = np.clip(1.0 - q, 1e-300, 1.0)
        h = -(q * np.log(qc) + (1.0 - q) * np.log(q1))
        h_cat = -q * np.log(qc)
        val = (h * bern).sum(-1) + (h_cat * cat).sum(-1)
        grad = np.where(bern, np.log(q1) - np.log(qc), 0.0) + np.where(cat, -np.log(qc) - 1.0, 0.0)
        return val, grad

    def entropy(self, q) -> np.ndarray:
        """Entropy of the factorised Q over unobserved atoms."""
        q = np.asarray(q, dtype=float)
        free = ~self.observed_mask
        grouped = self.group_of >= 0
        qc = np.clip(q, 1e-300, 1.0)
        q1 = np.clip(1.0 - q, 1e-300, 1.0)
        bern = -(q * np.log(qc) + (1.0 - q) * np.log(q1))
        h = (bern * (free & ~grouped)).sum(-1)
        for g in self.groups:
            if self.observed_mask[g].any():
                continue
            qg = q[..., g]
            h = h - (qg * np.log(np.clip(qg, 1e-300, 1.0))).sum(-1)
        return h


def compile_graph(graph: MlnGraph, groups: bool = True) -> CompiledGraph:
    return CompiledGraph(graph, groups=groups)


def _compiled(graph) -> CompiledGraph:
    if isinstance(graph, CompiledGraph):
        return graph
    cache = getattr(graph, "_compiled_cache", None)
    if cache is None:
        cache = CompiledGraph(graph)
        object.__setattr__(graph, "_compiled_cache", cache)
    return cache


def as_weights(weights, rule_ids) -> np.ndarray:
    if isinstance(weights, Mapping):
        try:
            return np.array([float(weights[r]) for r in rule_ids])
        except KeyError as exc:
            raise KeyError(f"no weight for rule {exc.args[0]}") from None
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(rule_ids),):
        raise ValueError(f"expected {len(rule_ids)} weights, got shape {w.shape}")
    return w


def as_assignment(graph, assignment, partial: bool = False) -> np.ndarray:
    """Turn a ``{key or GroundAtom: value}`` map or array into an array.

    Observed atoms take their evidence regardless of the supplied value.
    """
    cg = _compiled(graph)
    g = cg.graph
    if isinstance(assignment, Mapping):
        q = np.full(cg.n_atoms, np.nan)
        for k, v in assignment.items():
            key = getattr(k, "key", k)
            if key not in g.index:
                raise UnknownAtomError(f"assignment for unknown atom {key}")
            q[g.index[key]] = float(v)
        q = np.where(cg.observed_mask, cg.observed_values, q)
        missing = np.isnan(q)
        if missing.any() and not partial:
            names = [g.atoms[i].key for i in np.flatnonzero(missing)[:5]]
            raise MissingAssignmentError(f"no value for atoms {names}")
        return q
    q = np.asarray(assignment, dtype=float)
    if q.shape[-1] != cg.n_atoms:
        raise ValueError(f"assignment has {q.shape[-1]} entries for {cg.n_atoms} atoms")
    return np.where(cg.observed_mask, cg.observed_values, q)


def _rule_index(cg: CompiledGraph, rule) -> int:
    rid = getattr(rule, "id", rule)
    try:
        return cg.rule_ids.index(rid)
    except ValueError:
        raise KeyError(f"rule {rid} not in graph") from None


def rule_potential(graph, rule, assignment) -> float:
    """Sum of Łukasiewicz truths over the groundings of ``rule``.

    At Boolean assignments this is the number of satisfied groundings.
    """
    cg = _compiled(graph)
    r = _rule_index(cg, rule)
    sel = cg.g_rule == r
    if isinstance(assignment, Mapping):
        q = as_assignment(cg, assignment, partial=True)
        needed = np.unique(np.concatenate([cg.body[sel].ravel(), cg.head[sel].ravel()]))
        needed = needed[needed < cg.n_atoms]
        bad = needed[np.isnan(q[needed])]
        if len(bad):
            raise MissingAssignmentError(f"no value for atom {cg.graph.atoms[bad[0]].key}")
        q = np.nan_to_num(q, nan=0.0)
    else:
        q = as_assignment(cg, assignment)
    return float(cg.ground_truth(q)[..., sel].sum(-1))


def log_joint_unnormalized(graph, weights, assignment) -> float:
    """``sum_r w_r * potential_r``: log numerator of the MLN joint."""
    cg = _compiled(graph)
    q = as_assignment(cg, assignment)
    return float(cg.log_joint(q, weights))


def _free_configs(cg: CompiledGraph, cap: int):
    free = np.flatnonzero(~cg.observed_mask)
    if len(free) > cap:
        raise TooManyAtomsError(f"{len(free)} unobserved atoms exceed the exact-enumeration cap {cap}")
    configs = np.array(list(itertools.product((0.0, 1.0), repeat=len(free))), dtype=float).reshape(-1, len(free))
    qs = np.tile(cg.observed_values, (len(configs), 1))
    qs[:, free] = configs
    return qs


def partition_exact(graph, weights, cap: int = EXACT_ATOM_CAP) -> float:
    """``log Z`` by enumerating all Boolean completions of the unobserved atoms."""
    cg = _compiled(graph)
    if cg.n_atoms == 0:
        return 0.0
    qs = _free_configs(cg, cap)
    return float(logsumexp(cg.log_joint(qs, weights)))


def conditional(graph, weights, atom, assignment) -> float:
    """``P(A_i = 1 | MB)`` from the ground rules touching ``atom``.

    The rest of ``assignment`` supplies the blanket; soft values enter through
    the Łukasiewicz potentials.
    """
    cg = _compiled(graph)
    i = cg.graph.idx(atom)
    q = as_assignment(cg, assignment, partial=True)
    others = np.isnan(q)
    others[i] = False
    if others.any():
        blanket = cg.graph.adjacency[i]
        miss = [j for j in np.flatnonzero(others) if j in blanket]
        if miss:
            raise MissingAssignmentError(f"no value for blanket atom {cg.graph.atoms[miss[0]].key}")
    q = np.nan_to_num(q, nan=0.0)
    return float(expit(cg.local_delta(q, weights)[i]))


def pseudo_log_likelihood(graph, weights, q_scores) -> float:
    """``sum_i [q_i log P(A_i=1|MB) + (1-q_i) log P(A_i=0|MB)]``."""
    cg = _compiled(graph)
    if cg.n_atoms == 0:
        return 0.0
    q = as_assignment(cg, q_scores)
    return float(np.sum(cg.pll(q, weights)))


def weight_gradient(graph, weights, q_scores, form: str = "exact") -> dict[str, float]:
    """Per-rule gradient of :func:`pseudo_log_likelihood`.

    Each atom contributes ``(target_i - P(A_i=1|MB))`` where the target is the
    evidence for observed atoms and ``q_i`` otherwise.  ``form="exact"``
    multiplies by the change in the rule's potential when the atom flips;
    ``form="indicator"`` uses 1 for every rule touching the atom instead.
    """
    cg = _compiled(graph)
    if cg.n_atoms == 0:
        return {r: 0.0 for r in cg.rule_ids}
    q = as_assignment(cg, q_scores)
    g = cg.pll_gradient(q, weights, form=form)
    g = g.reshape(-1, cg.n_rules).sum(0)
    return dict(zip(cg.rule_ids, map(float, g)))


def m_step(graph, weights, q_scores, lr: float = 0.05, steps: int = 10, form: str = "exact",
           max_halvings: int = 30) -> dict[str, float]:
    """Gradient ascent on the pseudo-log-likelihood over rule weights.

    ``q_scores`` may carry a leading batch axis; the objective is then the
    mean over the batch.  A step that lowers the objective is halved until it
    does not.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    cg = _compiled(graph)
    w = cg.weight_array(weights).copy()
    q = as_assignment(cg, q_scores)
    batch = q.reshape(-1, cg.n_atoms)

    def objective(wv):
        return float(cg.pll(batch, wv).mean())

    current = objective(w)
    for step in range(steps):
        grad = cg.pll_gradient(batch, w, form=form).mean(0)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite weight gradient at step {step}: {grad}, weights {w}")
        eta = lr
        for _ in range(max_halvings + 1):
            cand = w + eta * grad
            val = objective(cand)
            if val >= current - 1e-12:
                break
            eta *= 0.5
        else:
            log.debug("m_step: no ascent direction found at step %d", step)
            break
        w, current = cand, val
    return dict(zip(cg.rule_ids, map(float, w)))


def potentials_tsv(graph, weights, assignment) -> str:
    """Debug dump: ``rule_id  weight  potential`` per line."""
    cg = _compiled(graph)
    q = as_assignment(cg, assignment)
    pots = cg.potentials(q)
    w = cg.weight_array(weights)
    return "".join(f"{r}\t{float(w[i])!r}\t{float(pots[i])!r}\n" for i, r in enumerate(cg.rule_ids))
