"""Two-layer graphical model tying network predictions to ground atoms.

The high layer holds one pseudo-label node per prediction; each label slot
may be bridged to the ground atom whose key it names.  The log potential of
a Boolean configuration ``A`` is

    -sum_nodes phi_b(y, A) + sum_r w_r * phi_l_r(A)

where ``phi_b`` is an L2 distance (aligned values are rewarded, so it enters
with a minus sign) and ``phi_l_r`` is the rule potential.

Bridge modes:

* ``vector``: the node's bridged slots are exactly one categorical group of
  atoms; ``phi_b = ||y_S - A_S||`` over those slots.
* ``scalar``: anything else; ``phi_b = sum_k |y_k - A_k|`` over bridged slots.

Under a factorised ``Q`` both expectations are linear in each group, which
makes the mean-field coordinate update exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .grounding import GroundAtom, MlnGraph
from .mln import CompiledGraph, _compiled, _free_configs, as_assignment, EXACT_ATOM_CAP
from .neural import PseudoLabel

__all__ = [
    "HighLevelNode",
    "BridgeEdge",
    "BiLevelModel",
    "NodeBridge",
    "UnbridgedPairError",
    "FactorRangeError",
    "attach_levels",
    "bridge_potential",
    "o_logic",
    "expected_o_logic",
    "elbo",
    "log_evidence",
    "mean_field",
    "mean_field_sweep",
    "e_step_objective",
    "revise_labels",
    "revise_distributions",
]

_EPS = 1e-12


class UnbridgedPairError(KeyError):
    pass


class FactorRangeError(ValueError):
    pass


@dataclass(frozen=True)
class HighLevelNode:
    """A pseudo-label node.  ``slot_keys[k]`` names the atom for label ``k``.

    When ``slot_keys`` is omitted the id is read as ``pred@c1,c2`` and bridged
    through slot 0.
    """

    id: str
    label: PseudoLabel
    slot_keys: tuple = None

    def __post_init__(self):
        if self.slot_keys is None:
            pred, _, consts = self.id.partition("@")
            key = f"{pred}({consts})"
            keys = (key,) + (None,) * (len(self.label) - 1)
            object.__setattr__(self, "slot_keys", keys)
        elif len(self.slot_keys) != len(self.label):
            raise ValueError(f"node {self.id}: {len(self.slot_keys)} slot keys for {len(self.label)} labels")
        else:
            object.__setattr__(self, "slot_keys", tuple(self.slot_keys))


@dataclass(frozen=True)
class BridgeEdge:
    high: HighLevelNode
    low: GroundAtom
    slot: int


class NodeBridge:
    """Array form of one node's bridges against a compiled graph."""

    def __init__(self, cg: CompiledGraph, slots: Sequence[int], atoms: Sequence[int]):
        self.slots = np.asarray(slots, dtype=np.int64)
        self.atoms = np.asarray(atoms, dtype=np.int64)
        self.mode = "scalar"
        if len(self.atoms):
            gids = set(int(cg.group_of[a]) for a in self.atoms)
            if len(gids) == 1 and -1 not in gids:
                members = set(cg.groups[gids.pop()].tolist())
                if members == set(self.atoms.tolist()) and len(members) == len(self.atoms):
                    self.mode = "vector"

    def __len__(self) -> int:
        return len(self.atoms)

    def distances(self, y) -> np.ndarray:
        """``||y_S - e_v||`` per bridged slot (vector mode)."""
        ys = np.asarray(y, dtype=float)[..., self.slots]
        r2 = (ys * ys).sum(-1, keepdims=True)
        return np.sqrt(np.maximum(r2 - 2.0 * ys + 1.0, _EPS))

    def plug_in(self, y, q) -> np.ndarray:
        """``phi_b`` evaluated at a (possibly soft) assignment."""
        ys = np.asarray(y, dtype=float)[..., self.slots]
        qs = np.asarray(q, dtype=float)[..., self.atoms]
        if self.mode == "vector":
            return np.sqrt(((ys - qs) ** 2).sum(-1))
        return np.abs(ys - qs).sum(-1)

    def expected(self, y, q):
        """``E_Q[phi_b]`` and its gradients ``(value, d_y, d_q)``."""
        y = np.asarray(y, dtype=float)
        q = np.asarray(q, dtype=float)
        ys = y[..., self.slots]
        qs = q[..., self.atoms]
        dy = np.zeros(np.broadcast_shapes(y.shape, q.shape[:-1] + (y.shape[-1],)))
        dq = np.zeros(np.broadcast_shapes(q.shape, y.shape[:-1] + (q.shape[-1],)))
        if not len(self.atoms):
            return np.zeros(dq.shape[:-1]), dy, dq
        if self.mode == "vector":
            d = self.distances(y)
            val = (qs * d).sum(-1)
            dys = ys * (qs / d).sum(-1, keepdims=True) - qs / d
            dqs = d
        else:
            val = (qs * (1.0 - ys) + (1.0 - qs) * ys).sum(-1)
            dys = 1.0 - 2.0 * qs
            dqs = np.broadcast_to(1.0 - 2.0 * ys, dq[..., self.atoms].shape)
        dy[..., self.slots] = dys
        dq[..., self.atoms] = dqs
        return val, dy, dq

    def cross_entropy(self, y, q, free, form: str = "literal"):
        """Concept cross-entropy over bridged unobserved atoms, with gradients."""
        y = np.asarray(y, dtype=float)
        q = np.asarray(q, dtype=float)
        sel = np.asarray(free, dtype=bool)[self.atoms]
        dy = np.zeros(y.shape)
        dq = np.zeros(q.shape)
        if not sel.any():
            return np.zeros(q.shape[:-1]), dy, dq
        s, a = self.slots[sel], self.atoms[sel]
        ys, qs = y[..., s], q[..., a]
        if form == "literal":
            yc = np.maximum(ys, _EPS)
            val = (qs * np.log(yc)).sum(-1)
            dy[..., s] = np.where(ys > _EPS, qs / yc, 0.0)
            dq[..., a] = np.log(yc)
        elif form == "conventional":
            qc = np.maximum(qs, _EPS)
            val = -(ys * np.log(qc)).sum(-1)
            dy[..., s] = -np.log(qc)
            dq[..., a] = np.where(qs > _EPS, -ys / qc, 0.0)
        else:
            raise ValueError(f"unknown cross-entropy form {form!r}")
        return val, dy, dq


@dataclass(frozen=True)
class BiLevelModel:
    high_nodes: tuple
    mln: MlnGraph
    bridges: tuple
    weights: Mapping[str, float]
    unbridged: tuple = ()
    layouts: tuple = field(default=(), compare=False, repr=False)

    @property
    def compiled(self) -> CompiledGraph:
        return _compiled(self.mln)

    def with_weights(self, weights) -> "BiLevelModel":
        return BiLevelModel(self.high_nodes, self.mln, self.bridges, dict(weights), self.unbridged, self.layouts)

    def node_distributions(self) -> list[np.ndarray]:
        return [n.label.distribution for n in self.high_nodes]


def attach_levels(pseudo: Sequence[HighLevelNode], mln: MlnGraph, weights=None) -> BiLevelModel:
    """Bridge every node slot whose key names an atom of ``mln``."""
    cg = _compiled(mln)
    bridges, unbridged, layouts = [], [], []
    for node in pseudo:
        slots, atoms = [], []
        for k, key in enumerate(node.slot_keys):
            if key is not None and key in mln.index:
                i = mln.index[key]
                bridges.append(BridgeEdge(node, mln.atoms[i], k))
                slots.append(k)
                atoms.append(i)
        if not slots:
            unbridged.append(node.id)
        layouts.append(NodeBridge(cg, slots, atoms))
    if weights is None:
        weights = {r: r_w for r, r_w in ((r.id, r.weight) for r in mln.ruleset.rules)}
    return BiLevelModel(tuple(pseudo), mln, tuple(bridges), dict(weights), tuple(unbridged), tuple(layouts))


def bridge_potential(high, low, score=None) -> float:
    """L2 distance between a node's value and an atom's value.

    Either pass plain numbers/vectors, or a :class:`HighLevelNode` and a
    :class:`GroundAtom` (the atom's score is taken from ``score`` or its
    observed value).
    """
    if isinstance(high, HighLevelNode):
        key = getattr(low, "key", low)
        if key not in high.slot_keys:
            raise UnbridgedPairError(f"node {high.id} is not bridged to {key}")
        y = high.label.distribution[high.slot_keys.index(key)]
        a = score if score is not None else low.score
        return float(abs(y - a))
    y = np.atleast_1d(np.asarray(high, dtype=float))
    a = np.atleast_1d(np.asarray(low, dtype=float))
    return float(np.sqrt(((y - a) ** 2).sum()))


def _label_matrix(model: BiLevelModel) -> list[np.ndarray]:
    return [n.label.distribution for n in model.high_nodes]


def o_logic(model: BiLevelModel, assignment) -> float:
    """``-sum phi_b + sum_r w_r phi_l_r`` at a (soft) assignment."""
    cg = model.compiled
    q = as_assignment(cg, assignment)
    val = float(cg.log_joint(q, model.weights))
    for node, lay in zip(model.high_nodes, model.layouts):
        if len(lay):
            val -= float(lay.plug_in(node.label.distribution, q))
    return val


def expected_o_logic(model: BiLevelModel, q) -> float:
    """``E_Q`` of the log potential under the factorised ``Q``."""
    cg = model.compiled
    q = as_assignment(cg, q)
    val = float(cg.expected_log_joint(q, model.weights))
    for node, lay in zip(model.high_nodes, model.layouts):
        if len(lay):
            val -= float(lay.expected(node.label.distribution, q)[0])
    return val


def elbo(model: BiLevelModel, q_scores) -> float:
    """``E_Q[log potential] + H(Q)``."""
    cg = model.compiled
    q = as_assignment(cg, q_scores)
    return expected_o_logic(model, q) + float(cg.entropy(q))


def log_evidence(model: BiLevelModel, cap: int = EXACT_ATOM_CAP) -> float:
    """Log of the potential summed over all Boolean completions."""
    cg = model.compiled
    if cg.n_atoms == 0:
        return 0.0
    qs = _free_configs(cg, cap)
    vals = cg.log_joint(qs, model.weights)
    for node, lay in zip(model.high_nodes, model.layouts):
        if len(lay):
            vals = vals - lay.plug_in(node.label.distribution, qs)
    return float(logsumexp(vals))


def _units(cg: CompiledGraph, free: np.ndarray) -> list[tuple[np.ndarray, bool]]:
    """Update units: whole free categorical groups, then single free atoms."""
    units = []
    seen = np.zeros(cg.n_atoms, dtype=bool)
    for g in cg.groups:
        if free[g].all():
            units.append((g, True))
            seen[g] = True
    for i in np.flatnonzero(free & ~seen):
        units.append((np.array([i]), False))
    return units


def mean_field_sweep(cg: CompiledGraph, q, weights, free, bridges=(), ys=(), scale: float = 1.0) -> np.ndarray:
    """One ordered coordinate-ascent pass over the free atoms.

    ``q`` has shape ``(..., n_atoms)``; ``bridges``/``ys`` give the node
    layouts and their label arrays ``(..., L)``.  Each free group is set to
    ``softmax(scale * E[log potential | group = v])`` in turn.
    """
    q = np.array(q, dtype=float, copy=True)
    free = np.asarray(free, dtype=bool)
    w = cg.weight_array(weights)
    for unit, grouped in _units(cg, free):
        if grouped:
            V = len(unit)
            cand = np.repeat(q[..., None, :], V, axis=-2)
            cand[..., unit] = np.eye(V)
        else:
            cand = np.repeat(q[..., None, :], 2, axis=-2)
            cand[..., 0, unit[0]] = 0.0
            cand[..., 1, unit[0]] = 1.0
        score = cg.expected_log_joint(cand, w)
        for lay, y in zip(bridges, ys):
            if len(lay):
                score = score - lay.expected(np.asarray(y)[..., None, :], cand)[0]
        p = softmax(scale * score, axis=-1)
        if grouped:
            q[..., unit] = p
        else:
            q[..., unit[0]] = p[..., 1]
    return q


def mean_field(model: BiLevelModel, q0=None, sweeps: int = 5, trace: list | None = None) -> np.ndarray:
    """Mean-field marginals for the unobserved atoms of ``model``.

    Observed atoms keep their evidence.  If ``trace`` is a list, the ELBO after
    every sweep is appended to it.
    """
    cg = model.compiled
    q = cg.full_assignment() if q0 is None else as_assignment(cg, q0)
    free = ~cg.observed_mask
    ys = _label_matrix(model)
    for _ in range(sweeps):
        q = mean_field_sweep(cg, q, model.weights, free, model.layouts, ys)
        if trace is not None:
            trace.append(elbo(model, q))
    return q


def _factors(cfg=None, alpha=None, beta=None, gamma=None):
    a = alpha if alpha is not None else getattr(cfg, "alpha")
    b = beta if beta is not None else getattr(cfg, "beta")
    g = gamma if gamma is not None else getattr(cfg, "gamma")
    for name, v in (("alpha", a), ("beta", b), ("gamma", g)):
        if not (0.0 <= v <= 1.0):
            raise FactorRangeError(f"{name}={v} outside [0, 1]")
    return a, b, g


def e_step_objective(o_task, o_logic, l_cro, cfg=None, *, alpha=None, beta=None, gamma=None):
    """``alpha * o_task + beta * o_logic - gamma * l_cro``.

    A term whose factor is zero is dropped outright, so its value (even a
    non-finite one) cannot leak into the result.
    """
    a, b, g = _factors(cfg, alpha, beta, gamma)
    total = 0.0
    if a:
        total = total + a * o_task
    if b:
        total = total + b * o_logic
    if g:
        total = total - g * l_cro
    return total


def revise_distributions(ys, q, layouts) -> list[np.ndarray]:
    """Override bridged slots with ``Q`` and renormalise, per node."""
    out = []
    q = np.asarray(q, dtype=float)
    for y, lay in zip(ys, layouts):
        y = np.array(y, dtype=float, copy=True)
        if len(lay):
            y[..., lay.slots] = q[..., lay.atoms]
            s = y.sum(-1, keepdims=True)
            y = np.where(s > 0, y / np.where(s > 0, s, 1.0), 1.0 / y.shape[-1])
        out.append(y)
    return out


def revise_labels(model: BiLevelModel, q_scores) -> list[PseudoLabel]:
    """Pseudo-labels with bridged slots replaced by their atom marginals."""
    cg = model.compiled
    q = as_assignment(cg, q_scores)
    revised = revise_distributions(_label_matrix(model), q, model.layouts)
    return [PseudoLabel(y) for y in revised]
