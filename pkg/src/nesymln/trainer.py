"""Variational EM training loop, evaluation and checkpoints.

Each dataset item is its own small world: its slots are the constants
``c0 .. c{k-1}`` and the task's rules are grounded once over them.  Every
item shares that template, so a batch is an array ``(batch, n_atoms)`` of
atom marginals:

* concept atoms take their value from the concept network;
* label atoms (bridged to the task network's prediction) carry the training
  label as evidence, or are inferred by mean field at test time;
* any other atom is filled in by mean field.

One round is a minibatch pass of E-step updates to both networks on
``alpha * O_task + beta * O_logic - gamma * L_cro``, then an M-step on the
rule weights, then label revision.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .bilevel import NodeBridge, _factors, e_step_objective, mean_field_sweep, revise_distributions
from .grounding import DEFAULT_GROUNDING_CAP, ground_rules
from .inference import classify_by_rules, infer_inductive_batch
from .logic import RuleSet, parse_rules, render_rules
from .mln import CompiledGraph, DivergenceError, m_step
from .neural import Adam, ConceptSpec
from .tasks import (
    Dataset,
    Metrics,
    Networks,
    TaskPack,
    accuracy,
    attribute_task,
    build_networks,
    digit_task,
)

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "CheckpointError",
    "RuleHashMismatchError",
    "TrainResult",
    "World",
    "DivergenceError",
    "train",
    "evaluate",
    "predict_transductive",
    "rule_hash",
    "pack_for",
    "diagnostics_tsv",
    "ablation_variants",
]

log = logging.getLogger(__name__)

ABLATIONS = (
    ("full", 1.0, 1.0, 1.0),
    ("-SRM", 1.0, 0.0, 0.0),
    ("-NRM", 0.5, 1.0, 1.0),
    ("-OI", 1.0, 1.0, 0.0),
)


def ablation_variants():
    """``(name, alpha, beta, gamma)`` for the full model and its three ablations."""
    return ABLATIONS


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    em_rounds: int = 30
    e_passes: int = 1
    m_steps: int = 10
    lr_theta1: float = 1e-3
    lr_theta2: float = 1e-3
    lr_w: float = 0.05
    batch: int = 64
    seed: int = 0
    grounding_cap: int = DEFAULT_GROUNDING_CAP
    l_cro_form: str = "literal"
    pll_form: str = "exact"
    hidden: int = 64
    feature_dim: int = 64
    mf_sweeps: int = 3
    max_halvings: int = 5
    entropy: bool = False

    def __post_init__(self):
        _factors(self)
        if self.em_rounds < 1:
            raise ValueError("em_rounds must be at least 1")
        for name in ("lr_theta1", "lr_theta2", "lr_w"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative rate")
        for name in ("e_passes", "m_steps", "mf_sweeps", "max_halvings"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.l_cro_form not in ("literal", "conventional"):
            raise ValueError(f"l_cro_form must be 'literal' or 'conventional', not {self.l_cro_form!r}")
        if self.pll_form not in ("exact", "indicator"):
            raise ValueError(f"pll_form must be 'exact' or 'indicator', not {self.pll_form!r}")

    @property
    def symbolic(self) -> bool:
        return self.beta > 0 or self.gamma > 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            default = getattr(cls, k)
            if isinstance(default, bool) and isinstance(v, str):
                if v.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"{k} expects a boolean, got {v!r}")
                kw[k] = v.strip().lower() in ("true", "1", "yes")
            elif isinstance(default, str):
                kw[k] = str(v)
            elif isinstance(default, int) and not isinstance(default, bool):
                f = float(v)
                if f != int(f):
                    raise ValueError(f"{k} expects an integer, got {v!r}")
                kw[k] = int(f)
            else:
                kw[k] = type(default)(v)
        return cls(**kw)


# -- the per-item world -------------------------------------------------------

class World:
    """Ground template shared by all items of a task, in array form."""

    def __init__(self, pack: TaskPack, cap: int = DEFAULT_GROUNDING_CAP):
        self.pack = pack
        self.graph = ground_rules(pack.rules, pack.constants, pack.value_domains, cap=cap)
        self.cg = cg = CompiledGraph(self.graph)
        n = cg.n_atoms
        slots, atoms = [], []
        for k, key in enumerate(pack.label_keys):
            if key in self.graph.index:
                slots.append(k)
                atoms.append(self.graph.index[key])
        self.bridge = NodeBridge(cg, slots, atoms)
        self.label_mask = np.zeros(n, dtype=bool)
        self.label_mask[atoms] = True

        S = pack.n_slots
        self._sizes, offset, start = {}, 0, {}
        for spec in pack.concepts:
            size = {"value": S * spec.n_values, "unary": S, "binary": S * S}[spec.kind]
            start[spec.name] = offset
            self._sizes[spec.name] = size
            offset += size
        self._flat = offset
        c_atoms, c_src = [], []
        specs = {s.name: s for s in pack.concepts}
        for i, a in enumerate(self.graph.atoms):
            s = specs.get(a.predicate.name)
            if s is None or self.label_mask[i]:
                continue
            if s.kind == "value":
                v = pack.value_domains[s.name].index(a.value_args[0])
                src = start[s.name] + a.entity_args[0] * s.n_values + v
            elif s.kind == "unary":
                src = start[s.name] + a.entity_args[0]
            else:
                src = start[s.name] + a.entity_args[0] * S + a.entity_args[1]
            c_atoms.append(i)
            c_src.append(src)
        self.concept_atoms = np.array(c_atoms, dtype=np.int64)
        self.concept_src = np.array(c_src, dtype=np.int64)
        self.concept_mask = np.zeros(n, dtype=bool)
        self.concept_mask[self.concept_atoms] = True
        self.other_mask = ~(self.concept_mask | self.label_mask)

    @property
    def n_atoms(self) -> int:
        return self.cg.n_atoms

    def flatten(self, outs: Mapping[str, np.ndarray]) -> np.ndarray:
        B = next(iter(outs.values())).shape[0] if outs else 0
        parts = [outs[s.name].reshape(B, -1) for s in self.pack.concepts]
        return np.concatenate(parts, axis=1) if parts else np.zeros((B, 0))

    def unflatten(self, d_flat: np.ndarray, outs: Mapping[str, np.ndarray]) -> dict:
        res, off = {}, 0
        for s in self.pack.concepts:
            size = self._sizes[s.name]
            res[s.name] = d_flat[:, off:off + size].reshape(outs[s.name].shape)
            off += size
        return res

    def assemble(self, outs, y_idx=None) -> np.ndarray:
        """Marginals ``(B, n)`` from concept outputs and optional label evidence."""
        B = next(iter(outs.values())).shape[0] if outs else (len(y_idx) if y_idx is not None else 0)
        q = np.full((B, self.n_atoms), 0.5)
        if len(self.concept_atoms):
            q[:, self.concept_atoms] = self.flatten(outs)[:, self.concept_src]
        if y_idx is not None and len(self.bridge):
            q[:, self.bridge.atoms] = (self.bridge.slots[None, :] == np.asarray(y_idx)[:, None]).astype(float)
        return q

    def free_mask(self, observed_labels: bool) -> np.ndarray:
        return self.other_mask | (self.label_mask if not observed_labels else False)

    def infer_free(self, q, probs, weights, observed_labels: bool, sweeps: int) -> np.ndarray:
        free = self.free_mask(observed_labels)
        if not free.any():
            return q
        if not observed_labels and len(self.bridge):
            # start label atoms at the network's belief
            q = q.copy()
            q[:, self.bridge.atoms] = probs[:, self.bridge.slots]
        for _ in range(max(1, sweeps)):
            q = mean_field_sweep(self.cg, q, weights, free, (self.bridge,), (probs,))
        return q

    def concept_adjoint(self, dq: np.ndarray) -> np.ndarray:
        d_flat = np.zeros((dq.shape[0], self._flat))
        if len(self.concept_atoms):
            d_flat[:, self.concept_src] = dq[:, self.concept_atoms]
        return d_flat


# -- objective ---------------------------------------------------------------------

@dataclass
class _Eval:
    objective: float
    o_task: float
    o_logic: float
    l_cro: float
    phi_b: float
    probs: np.ndarray
    q: np.ndarray | None
    grads_task: dict | None = None
    grads_concept: dict | None = None


def _objective(world: World, nets: Networks, cfg: TrainConfig, X, targets, y_idx, w, grad: bool) -> _Eval:
    B = X.shape[0]
    probs, feats, t1 = nets.task.forward(X)
    logp = np.log(np.maximum(probs, 1e-12))
    o_task = float((targets * logp).sum() / B)
    o_logic = l_cro = phi_b = 0.0
    q = None
    d_probs = np.zeros_like(probs)
    d_feats = None
    g_concept = None
    if cfg.alpha:
        d_probs += cfg.alpha * np.where(probs > 1e-12, targets / np.maximum(probs, 1e-12), 0.0) / B
    if cfg.symbolic:
        outs, t2 = nets.concept.forward(feats)
        q = world.assemble(outs, y_idx)
        q = world.infer_free(q, probs, w, y_idx is not None, cfg.mf_sweeps)
        free = world.free_mask(y_idx is not None)
        elj = world.cg.expected_log_joint(q, w)
        if cfg.entropy:
            ent, d_ent = world.cg.masked_entropy(q, world.concept_mask)
            elj = elj + ent
        eb, dy_b, dq_b = world.bridge.expected(probs, q)
        o_logic = float((elj - eb).sum() / B)
        phi_b = float(world.bridge.plug_in(probs, q).mean()) if len(world.bridge) else 0.0
        lc, dy_c, dq_c = world.bridge.cross_entropy(probs, q, free, cfg.l_cro_form)
        l_cro = float(lc.sum() / B)
        if grad:
            dq = np.zeros_like(q)
            if cfg.beta:
                dq += cfg.beta * (world.cg.expected_log_joint_grad(q, w) - dq_b) / B
                if cfg.entropy:
                    dq += cfg.beta * d_ent / B
                d_probs += -cfg.beta * dy_b / B
            if cfg.gamma:
                dq += -cfg.gamma * dq_c / B
                d_probs += -cfg.gamma * dy_c / B
            d_out = world.unflatten(world.concept_adjoint(dq), outs)
            g_concept, d_feats = nets.concept.backward(t2, d_out)
    obj = e_step_objective(o_task, o_logic, l_cro, cfg)
    ev = _Eval(float(obj), o_task, o_logic, l_cro, phi_b, probs, q)
    if grad:
        ev.grads_task = nets.task.backward(t1, d_probs=d_probs, d_features=d_feats)
        ev.grads_concept = g_concept
    return ev


def _e_step(world, nets, cfg, opt_t, opt_c, X, targets, y_idx, w) -> tuple[float, float]:
    """One backtracking ascent step; returns objective before and after."""
    ev = _objective(world, nets, cfg, X, targets, y_idx, w, grad=True)
    if not np.isfinite(ev.objective):
        raise DivergenceError(f"non-finite E-step objective {ev.objective}")
    moves = [(nets.task, opt_t, ev.grads_task)]
    if cfg.symbolic and ev.grads_concept is not None:
        moves.append((nets.concept, opt_c, ev.grads_concept))
    plans = []
    for net, opt, g in moves:
        for v in g.values():
            if not np.all(np.isfinite(v)):
                raise DivergenceError("non-finite gradient in E-step")
        d, mom = opt.direction(g)
        plans.append((net, opt, d, mom, net.state_dict()))
    eta = 1.0
    accepted = False
    after = ev.objective
    for _ in range(cfg.max_halvings + 1):
        for net, opt, d, _, saved in plans:
            for k in d:
                net.params[k] = saved[k] + eta * opt.lr * d[k]
            net.touch()
        after = _objective(world, nets, cfg, X, targets, y_idx, w, grad=False).objective
        if after >= ev.objective:
            accepted = True
            break
        eta *= 0.5
    if not accepted:
        for net, _, _, _, saved in plans:
            net.load_state_dict(saved)
        after = ev.objective
    for _, opt, _, mom, _ in plans:
        opt.commit(mom)
    return ev.objective, after


def _full_q(world, nets, cfg, X, y_idx, w, batch=1024) -> tuple[np.ndarray, np.ndarray]:
    probs_all, q_all = [], []
    for s in range(0, len(X), batch):
        xb = X[s:s + batch]
        probs, feats, _ = nets.task.forward(xb)
        outs, _ = nets.concept.forward(feats)
        yb = None if y_idx is None else y_idx[s:s + batch]
        q = world.assemble(outs, yb)
        q = world.infer_free(q, probs, w, yb is not None, cfg.mf_sweeps)
        probs_all.append(probs)
        q_all.append(q)
    return np.concatenate(probs_all), np.concatenate(q_all)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"NSLNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class RuleHashMismatchError(CheckpointError):
    pass


def rule_hash(rules: RuleSet) -> str:
    return hashlib.sha256(render_rules(rules).encode("utf-8")).hexdigest()


def _pack_to_dict(pack: TaskPack) -> dict:
    return {
        "kind": pack.kind,
        "n_slots": pack.n_slots,
        "input_dim": pack.input_dim,
        "labels": list(pack.labels),
        "label_keys": list(pack.label_keys),
        "label_predicates": sorted(pack.label_predicates),
        "value_domains": {k: list(v) for k, v in pack.value_domains.items()},
        "concepts": [[c.name, c.kind, c.n_values] for c in pack.concepts],
    }


def _pack_from_dict(d: Mapping, rules: RuleSet) -> TaskPack:
    return TaskPack(
        kind=d["kind"],
        n_slots=int(d["n_slots"]),
        input_dim=int(d["input_dim"]),
        labels=tuple(d["labels"]),
        rules=rules,
        value_domains={k: tuple(v) for k, v in d["value_domains"].items()},
        label_keys=tuple(d["label_keys"]),
        label_predicates=frozenset(d["label_predicates"]),
        concepts=tuple(ConceptSpec(n, k, int(v)) for n, k, v in d["concepts"]),
    )


@dataclass
class Checkpoint:
    config: TrainConfig
    task_state: dict
    concept_state: dict
    weights: dict
    rules_text: str
    pack: dict
    round: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def rules(self) -> RuleSet:
        return parse_rules(self.rules_text)

    @property
    def rule_hash(self) -> str:
        return rule_hash(self.rules)

    def task_pack(self) -> TaskPack:
        return _pack_from_dict(self.pack, self.rules)

    def networks(self) -> Networks:
        pack = self.task_pack()
        nets = build_networks(pack, self.config.hidden, self.config.feature_dim, self.config.seed)
        nets.task.load_state_dict(self.task_state)
        nets.concept.load_state_dict(self.concept_state)
        return nets

    def check_rules(self, rules: RuleSet) -> None:
        if rule_hash(rules) != self.rule_hash:
            raise RuleHashMismatchError("rule set does not match the one this checkpoint was trained with")

    def to_bytes(self) -> bytes:
        header = {
            "config": self.config.to_dict(),
            "weights": {k: float(v) for k, v in self.weights.items()},
            "rules": self.rules_text,
            "rule_hash": self.rule_hash,
            "pack": self.pack,
            "round": int(self.round),
            "meta": self.meta,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HQ", VERSION, len(hb)))
        buf.write(hb)
        tensors = [("task/" + k, v) for k, v in sorted(self.task_state.items())]
        tensors += [("concept/" + k, v) for k, v in sorted(self.concept_state.items())]
        buf.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        mv = memoryview(data)
        if bytes(mv[:8]) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, hlen = struct.unpack_from("<HQ", mv, 8)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            pos = 8 + 10
            header = json.loads(bytes(mv[pos:pos + hlen]).decode("utf-8"))
            pos += hlen
            (count,) = struct.unpack_from("<I", mv, pos)
            pos += 4
            task, concept = {}, {}
            for _ in range(count):
                (nl,) = struct.unpack_from("<H", mv, pos)
                pos += 2
                name = bytes(mv[pos:pos + nl]).decode("utf-8")
                pos += nl
                (nd,) = struct.unpack_from("<B", mv, pos)
                pos += 1
                shape = struct.unpack_from(f"<{nd}Q", mv, pos)
                pos += 8 * nd
                size = int(np.prod(shape)) if nd else 1
                arr = np.frombuffer(bytes(mv[pos:pos + 8 * size]), dtype="<f8").reshape(shape).astype(float)
                pos += 8 * size
                section, _, key = name.partition("/")
                (task if section == "task" else concept)[key] = arr
        except (struct.error, ValueError, KeyError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"corrupt checkpoint: {exc}") from None
        ck = cls(TrainConfig.from_dict(header["config"]), task, concept, dict(header["weights"]),
                 header["rules"], header["pack"], int(header["round"]), header.get("meta", {}))
        if ck.rule_hash != header["rule_hash"]:
            raise RuleHashMismatchError("stored rule hash does not match stored rules")
        return ck

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(data)


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    diagnostics: list


def pack_for(dataset: Dataset, rules) -> TaskPack:
    """Task pack for a dataset: ``rules`` may already be one."""
    if isinstance(rules, TaskPack):
        return rules
    if dataset.kind == "digit":
        return digit_task(rules, dataset.n_slots, dataset.dim)
    if dataset.kind == "attribute":
        classes = dataset.meta.get("classes")
        if isinstance(classes, str):
            classes = [c for c in classes.split(",") if c]
        if not classes:
            classes = list(dict.fromkeys(str(l) for l in dataset.labels))
        return attribute_task(rules, classes, dataset.dim)
    raise ValueError(f"unknown dataset kind {dataset.kind!r}")


def _checkpoint(cfg, nets, pack, w, rnd, meta) -> Checkpoint:
    return Checkpoint(cfg, nets.task.state_dict(), nets.concept.state_dict(), dict(w),
                      render_rules(pack.rules), _pack_to_dict(pack), rnd, dict(meta))


def train(cfg: TrainConfig, dataset: Dataset, ruleset, meta: Mapping | None = None,
          callback=None) -> TrainResult:
    """Run ``cfg.em_rounds`` rounds of variational EM on ``dataset``.

    Returns the final checkpoint and one diagnostics record per round.  A
    non-finite objective raises :class:`DivergenceError` whose
    ``checkpoint`` attribute holds the last good state.
    """
    pack = pack_for(dataset, ruleset)
    world = World(pack, cfg.grounding_cap)
    nets = build_networks(pack, cfg.hidden, cfg.feature_dim, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    X = dataset.items
    y_idx = pack.encode_labels(dataset.labels)
    L = len(pack.labels)
    targets = np.eye(L)[y_idx]
    w = {r.id: float(r.weight) for r in pack.rules.rules}
    opt_t = Adam(cfg.lr_theta1)
    opt_c = Adam(cfg.lr_theta2)
    meta = dict(meta or {})
    diagnostics = []
    last_good = _checkpoint(cfg, nets, pack, w, 0, meta)
    n = len(X)
    for rnd in range(1, cfg.em_rounds + 1):
        try:
            perm = rng.permutation(n)
            e_before = e_after = 0.0
            for s in range(0, n, cfg.batch):
                idx = perm[s:s + cfg.batch]
                for p in range(cfg.e_passes):
                    b, a = _e_step(world, nets, cfg, opt_t, opt_c, X[idx], targets[idx], y_idx[idx], w)
                    e_before += b if p == 0 else 0.0
                    e_after = a
            if cfg.beta > 0 and cfg.lr_w > 0 and cfg.m_steps > 0:
                _, q = _full_q(world, nets, cfg, X, y_idx, w)
                w = m_step(world.cg, w, q, lr=cfg.lr_w, steps=cfg.m_steps, form=cfg.pll_form)
            if cfg.symbolic:
                probs, q = _full_q(world, nets, cfg, X, y_idx, w)
                targets = revise_distributions([probs], q, [world.bridge])[0] if len(world.bridge) else targets
                targets = np.where(np.isfinite(targets), targets, np.eye(L)[y_idx])
            ev = _objective(world, nets, cfg, X, targets, y_idx, w, grad=False)
        except DivergenceError as exc:
            exc.checkpoint = last_good
            raise
        if not np.isfinite(ev.objective) or not all(np.isfinite(v) for v in w.values()):
            exc = DivergenceError(f"round {rnd}: non-finite objective {ev.objective} or weights {w}")
            exc.checkpoint = last_good
            raise exc
        train_acc = float(np.mean(ev.probs.argmax(1) == y_idx))
        rec = {
            "round": rnd,
            "o_task": ev.o_task,
            "o_logic": ev.o_logic,
            "l_cro": ev.l_cro,
            "objective": ev.objective,
            "phi_b": ev.phi_b,
            "train_acc": train_acc,
            "weights": dict(w),
        }
        diagnostics.append(rec)
        log.info("round %d objective %.6f train_acc %.4f", rnd, ev.objective, train_acc)
        last_good = _checkpoint(cfg, nets, pack, w, rnd, meta)
        if callback is not None:
            callback(rec, nets)
    return TrainResult(last_good, diagnostics)


def diagnostics_tsv(records) -> str:
    cols = ["round", "o_task", "o_logic", "l_cro", "objective", "phi_b", "train_acc"]
    lines = ["\t".join(cols)]
    for r in records:
        lines.append("\t".join(repr(r[c]) for c in cols))
    return "\n".join(lines) + "\n"


# -- evaluation ----------------------------------------------------------------------

def predict_transductive(checkpoint: Checkpoint, items, nets: Networks | None = None) -> np.ndarray:
    """Label indices for ``items``: revised labels when the logic layer was used."""
    nets = nets or checkpoint.networks()
    cfg = checkpoint.config
    X = np.asarray(items, dtype=float)
    if not cfg.symbolic:
        probs, _, _ = nets.task.forward(X)
        return probs.argmax(1)
    world = World(nets.pack, cfg.grounding_cap)
    probs, q = _full_q(world, nets, cfg, X, None, checkpoint.weights)
    if not len(world.bridge):
        return probs.argmax(1)
    revised = revise_distributions([probs], q, [world.bridge])[0]
    return revised.argmax(1)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, mode: str = "transductive",
             ruleset: RuleSet | None = None) -> Metrics:
    """Accuracy on ``dataset``.

    ``transductive`` scores the (revised) task predictions; ``ruleset`` if
    given must be the training rule set.  ``inductive`` applies a rewritten
    rule set: a value-expression rule for digit tasks, class rules for
    attribute tasks.
    """
    nets = checkpoint.networks()
    if mode == "transductive":
        if ruleset is not None:
            checkpoint.check_rules(ruleset)
        pred = predict_transductive(checkpoint, dataset.items, nets)
        truth = nets.pack.encode_labels(dataset.labels)
        return accuracy(pred.tolist(), truth.tolist())
    if mode == "inductive":
        if ruleset is None:
            raise ValueError("inductive evaluation needs the rewritten rule set")
        if nets.pack.kind == "attribute":
            preds, _ = classify_by_rules(nets, dataset.items, ruleset,
                                         classes=sorted(set(str(l) for l in dataset.labels)))
            return accuracy(preds, [str(l) for l in dataset.labels])
        heads = infer_inductive_batch(ruleset, nets, dataset.items)
        return accuracy(heads.tolist(), [int(l) for l in dataset.labels])
    raise ValueError(f"unknown evaluation mode {mode!r}")
