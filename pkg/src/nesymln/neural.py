"""Small dense networks with hand-written reverse mode.

``TaskNetwork`` maps raw per-slot inputs to a label distribution (the
pseudo-label) and one feature vector per slot.  ``ConceptNetwork`` scores
ground atoms from those features: value-typed predicates get a softmax over
their domain, unary predicates a logistic of an affine map, binary
predicates a logistic of a bilinear form.

Every forward pass returns a :class:`Tape`.  ``backward`` consumes a tape and
output adjoints and returns parameter gradients plus the adjoint of the
inputs; a tape recorded before the parameters changed is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, softmax

__all__ = [
    "PseudoLabel",
    "Tape",
    "StaleTapeError",
    "ShapeMismatchError",
    "MissingFeatureError",
    "PredicateKindError",
    "ConceptSpec",
    "TaskNetwork",
    "ConceptNetwork",
    "Adam",
    "task_forward",
    "concept_score",
    "concept_cross_entropy",
    "concept_cross_entropy_grad",
    "LOG_CLAMP",
]

LOG_CLAMP = 1e-12


class StaleTapeError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


class MissingFeatureError(KeyError):
    pass


class PredicateKindError(TypeError):
    pass


@dataclass(frozen=True)
class PseudoLabel:
    distribution: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distribution, dtype=float)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("pseudo-label must be a non-empty vector")
        if np.any(d < -1e-12) or abs(d.sum() - 1.0) > 1e-6:
            raise ValueError(f"not a distribution: sum {d.sum()!r}")
        object.__setattr__(self, "distribution", d)

    @property
    def hard(self) -> int:
        # argmax returns the first maximal index
        return int(np.argmax(self.distribution))

    def __len__(self) -> int:
        return self.distribution.size


@dataclass
class Tape:
    owner: object
    version: int
    cache: dict


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _softmax_backward(p, dp):
    return p * (dp - (dp * p).sum(-1, keepdims=True))


class _Params:
    """Named parameter tensors plus a version counter for tape checks."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.version = 0

    def names(self) -> list[str]:
        return list(self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters {sorted(missing)}")
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected parameter {k}")
            v = np.asarray(v, dtype=float)
            if v.shape != self.params[k].shape:
                raise ShapeMismatchError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k] = v.copy()
        self.version += 1

    def touch(self) -> None:
        self.version += 1

    def _tape(self, cache) -> Tape:
        return Tape(self, self.version, cache)

    def _check(self, tape: Tape) -> None:
        if tape.owner is not self or tape.version != self.version:
            raise StaleTapeError("tape was recorded for a different parameter state")


class TaskNetwork(_Params):
    """Shared per-slot encoder followed by a linear classifier.

    Input ``x`` has shape ``(batch, slots, input_dim)``.  Each slot passes
    through two dense ELU layers to a feature vector; the classifier reads the
    concatenated slot features.
    """

    def __init__(self, input_dim: int, n_labels: int, n_slots: int = 1, hidden: int = 64,
                 feature_dim: int = 64, seed: int = 0, zero_head: bool = False):
        super().__init__()
        self.input_dim = input_dim
        self.n_labels = n_labels
        self.n_slots = n_slots
        self.hidden = hidden
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        cat = n_slots * feature_dim
        self.params = {
            "enc1.W": _uniform(rng, input_dim, (input_dim, hidden)),
            "enc1.b": _uniform(rng, input_dim, (hidden,)),
            "enc2.W": _uniform(rng, hidden, (hidden, feature_dim)),
            "enc2.b": _uniform(rng, hidden, (feature_dim,)),
            "cls.W": np.zeros((cat, n_labels)) if zero_head else _uniform(rng, cat, (cat, n_labels)),
            "cls.b": np.zeros(n_labels) if zero_head else _uniform(rng, cat, (n_labels,)),
        }

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and self.n_slots == 1:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[1:] != (self.n_slots, self.input_dim):
            raise ShapeMismatchError(
                f"expected input (batch, {self.n_slots}, {self.input_dim}), got {x.shape}")
        return x

    def encode(self, x) -> np.ndarray:
        """Features for any number of slots: ``(..., input_dim) -> (..., D)``."""
        p = self.params
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ShapeMismatchError(f"expected inputs of width {self.input_dim}, got {x.shape}")
        return _elu(_elu(x @ p["enc1.W"] + p["enc1.b"]) @ p["enc2.W"] + p["enc2.b"])

    def forward(self, x):
        """Return ``(probs (B, L), features (B, S, D), tape)``."""
        p = self.params
        x = self._check_input(x)
        a1 = x @ p["enc1.W"] + p["enc1.b"]
        h1 = _elu(a1)
        a2 = h1 @ p["enc2.W"] + p["enc2.b"]
        e = _elu(a2)
        flat = e.reshape(e.shape[0], -1)
        logits = flat @ p["cls.W"] + p["cls.b"]
        probs = softmax(logits, axis=-1)
        return probs, e, self._tape(dict(x=x, a1=a1, h1=h1, a2=a2, flat=flat, probs=probs))

    def backward(self, tape: Tape, d_probs=None, d_features=None, d_logits=None):
        """Parameter gradients given adjoints of the outputs.

        ``d_logits`` may be given directly (it is added to the softmax
        backward of ``d_probs``).
        """
        self._check(tape)
        p, c = self.params, tape.cache
        B = c["x"].shape[0]
        dz = np.zeros((B, self.n_labels))
        if d_probs is not None:
            dz = dz + _softmax_backward(c["probs"], np.asarray(d_probs, dtype=float))
        if d_logits is not None:
            dz = dz + d_logits
        g = {"cls.W": c["flat"].T @ dz, "cls.b": dz.sum(0)}
        de = (dz @ p["cls.W"].T).reshape(B, self.n_slots, self.feature_dim)
        if d_features is not None:
            de = de + d_features
        da2 = de * _elu_grad(c["a2"])
        g["enc2.W"] = np.einsum("bsh,bsd->hd", c["h1"], da2)
        g["enc2.b"] = da2.sum((0, 1))
        dh1 = da2 @ p["enc2.W"].T
        da1 = dh1 * _elu_grad(c["a1"])
        g["enc1.W"] = np.einsum("bsi,bsh->ih", c["x"], da1)
        g["enc1.b"] = da1.sum((0, 1))
        return g


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    kind: str  # "unary" | "binary" | "value"
    n_values: int = 0

    def __post_init__(self):
        if self.kind not in ("unary", "binary", "value"):
            raise ValueError(f"unknown concept kind {self.kind!r}")
        if self.kind == "value" and self.n_values < 1:
            raise ValueError("value-typed concepts need n_values >= 1")


class ConceptNetwork(_Params):
    """Per-predicate scorers over slot features ``(batch, slots, D)``."""

    def __init__(self, specs: Sequence[ConceptSpec], feature_dim: int = 64, seed: int = 0,
                 zero_init: bool = False):
        super().__init__()
        self.specs = {s.name: s for s in specs}
        self.feature_dim = D = feature_dim
        rng = np.random.default_rng(seed)

        def init(fan_in, shape):
            return np.zeros(shape) if zero_init else _uniform(rng, fan_in, shape)

        for s in specs:
            if s.kind == "value":
                self.params[f"{s.name}.W"] = init(D, (D, s.n_values))
                self.params[f"{s.name}.b"] = init(D, (s.n_values,))
            elif s.kind == "unary":
                self.params[f"{s.name}.W"] = init(D, (D,))
                self.params[f"{s.name}.b"] = init(D, ())
            else:
                self.params[f"{s.name}.W"] = init(D, (D, D))
                self.params[f"{s.name}.b"] = init(D, ())

    def forward(self, e):
        """Score every predicate on every slot (or slot pair).

        Returns ``(outputs, tape)``: value-typed ``(B, S, V)``, unary
        ``(B, S)``, binary ``(B, S, S)`` indexed ``[b, first, second]``.
        """
        e = np.asarray(e, dtype=float)
        if e.ndim != 3 or e.shape[-1] != self.feature_dim:
            raise ShapeMismatchError(f"expected features (batch, slots, {self.feature_dim}), got {e.shape}")
        out = {}
        for name, s in self.specs.items():
            W, b = self.params[f"{name}.W"], self.params[f"{name}.b"]
            if s.kind == "value":
                out[name] = softmax(e @ W + b, axis=-1)
            elif s.kind == "unary":
                out[name] = expit(e @ W + b)
            else:
                out[name] = expit(np.einsum("bsd,de,bte->bst", e, W, e) + b)
        return out, self._tape(dict(e=e, out=out))

    def backward(self, tape: Tape, d_out: Mapping[str, np.ndarray]):
        """Return ``(param_grads, d_features)``."""
        self._check(tape)
        e = tape.cache["e"]
        de = np.zeros_like(e)
        g = {k: np.zeros_like(v) for k, v in self.params.items()}
        for name, d in d_out.items():
            if d is None:
                continue
            s = self.specs[name]
            y = tape.cache["out"][name]
            W = self.params[f"{name}.W"]
            d = np.asarray(d, dtype=float)
            if s.kind == "value":
                dz = _softmax_backward(y, d)
                g[f"{name}.W"] += np.einsum("bsd,bsv->dv", e, dz)
                g[f"{name}.b"] += dz.sum((0, 1))
                de += dz @ W.T
            elif s.kind == "unary":
                dz = d * y * (1.0 - y)
                g[f"{name}.W"] += np.einsum("bsd,bs->d", e, dz)
                g[f"{name}.b"] += dz.sum()
                de += dz[..., None] * W
            else:
                dz = d * y * (1.0 - y)
                g[f"{name}.W"] += np.einsum("bst,bsd,bte->de", dz, e, e)
                g[f"{name}.b"] += dz.sum()
                de += np.einsum("bst,de,bte->bsd", dz, W, e)
                de += np.einsum("bst,de,bsd->bte", dz, W, e)
        return g, de

    def score(self, predicate: str, features: Sequence[np.ndarray]):
        """Score one atom from the feature vectors of its entity arguments."""
        if predicate not in self.specs:
            raise PredicateKindError(f"no concept scorer for predicate {predicate}")
        s = self.specs[predicate]
        need = 2 if s.kind == "binary" else 1
        if len(features) != need:
            raise PredicateKindError(f"{predicate} is {s.kind} and takes {need} feature vector(s), got {len(features)}")
        W, b = self.params[f"{predicate}.W"], self.params[f"{predicate}.b"]
        f = [np.asarray(v, dtype=float) for v in features]
        if s.kind == "value":
            return softmax(f[0] @ W + b)
        if s.kind == "unary":
            return float(expit(f[0] @ W + b))
        return float(expit(f[0] @ W @ f[1] + b))


def task_forward(state: TaskNetwork, batch) -> tuple[list[PseudoLabel], np.ndarray]:
    """Pseudo-labels and per-slot features for a batch; does not mutate ``state``."""
    probs, feats, _ = state.forward(batch)
    return [PseudoLabel(p) for p in probs], feats


def concept_score(state: ConceptNetwork, atom, features: Mapping[int, np.ndarray]):
    """``Q(A_i)`` for a ground atom given features keyed by constant index.

    Value-typed predicates return a distribution over the domain; otherwise a
    scalar in [0, 1].
    """
    vecs = []
    for c in atom.entity_args:
        if c not in features:
            raise MissingFeatureError(f"no feature vector for constant {c} of {atom.key}")
        vecs.append(features[c])
    return state.score(atom.predicate.name, vecs)


def _ce_inputs(q, targets):
    q = np.asarray(q, dtype=float)
    t = np.asarray(targets, dtype=float)
    if q.shape != t.shape:
        raise ValueError(f"atom sets differ: {q.shape} vs {t.shape}")
    return q, t


def concept_cross_entropy(q_scores, targets, form: str = "literal") -> float:
    """Cross-entropy between concept posteriors and pseudo-label targets.

    ``form="literal"`` is ``sum Q log y``; ``form="conventional"`` is
    ``-sum y log Q``.  Logs are clamped at ``LOG_CLAMP``.
    """
    q, t = _ce_inputs(q_scores, targets)
    if q.size == 0:
        return 0.0
    if form == "literal":
        return float(np.sum(q * np.log(np.maximum(t, LOG_CLAMP))))
    if form == "conventional":
        return float(-np.sum(t * np.log(np.maximum(q, LOG_CLAMP))))
    raise ValueError(f"unknown cross-entropy form {form!r}")


def concept_cross_entropy_grad(q_scores, targets, form: str = "literal"):
    """Gradients ``(d/dQ, d/dy)`` of :func:`concept_cross_entropy`."""
    q, t = _ce_inputs(q_scores, targets)
    if form == "literal":
        tc = np.maximum(t, LOG_CLAMP)
        return np.log(tc), np.where(t > LOG_CLAMP, q / tc, 0.0)
    if form == "conventional":
        qc = np.maximum(q, LOG_CLAMP)
        return np.where(q > LOG_CLAMP, -t / qc, 0.0), -np.log(qc)
    raise ValueError(f"unknown cross-entropy form {form!r}")


class Adam:
    """Adam over a dict of parameters, ascending or descending.

    ``direction`` returns the update direction without committing; ``commit``
    stores the moment estimates of the accepted step.  This lets the caller
    backtrack on the step size.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def direction(self, grads: Mapping[str, np.ndarray]):
        t = self.t + 1
        m, v, d = {}, {}, {}
        for k, g in grads.items():
            m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            mh = m[k] / (1 - self.beta1 ** t)
            vh = v[k] / (1 - self.beta2 ** t)
            d[k] = mh / (np.sqrt(vh) + self.eps)
        return d, (m, v)

    def commit(self, moments) -> None:
        self.m, self.v = moments
        self.t += 1

    def step(self, net: _Params, grads: Mapping[str, np.ndarray], ascent: bool = True, scale: float = 1.0) -> None:
        d, moments = self.direction(grads)
        sign = 1.0 if ascent else -1.0
        for k, dk in d.items():
            net.params[k] = net.params[k] + sign * scale * self.lr * dk
        net.touch()
        self.commit(moments)
