"""The sequence-to-sequence compression tagger and its graph-attention variants.

Variants:

* ``base``   -- bi-LSTM encoder, LSTM decoder, ``d_t = tanh(W_d [h_t, s_t] + b_d)``.
* ``parent`` -- adds head attention and recursive parent attention; the child
  summary is a zero vector but the selective gate is kept.
* ``child``  -- symmetric: recursive child attention only, gate kept.
* ``slahan`` -- both recursive attentions mixed by the selective gate.

Graph variants replace ``d_t`` with ``d'_t = [h_t, Omega_t, s_t]`` both for the
output layer and for the decoder input at the next step.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph_algebra as ga
from .corpus import NUM_LABELS, LabelCodec
from .numerics import ParameterStore, Tape, glorot_init

VARIANTS = ("base", "parent", "child", "slahan")
SYNTAX_LOG_FLOOR = 1e-12


@dataclass
class ModelConfig:
    variant: str = "slahan"
    orders: tuple = (1, 2, 3, 4)
    hidden_dim: int = 200
    attention_dim: int = 0  # 0 -> same as hidden_dim
    lstm_depth: int = 2
    dropout: float = 0.3
    syntax_lambda: float = 1.0
    static_dim: int = 0
    contextual: tuple = ()  # ((name, layers, dim), ...)
    tie_order_weights: bool = False

    def __post_init__(self):
        self.orders = tuple(sorted(set(int(d) for d in self.orders)))
        self.contextual = tuple(tuple(c) for c in self.contextual)
        if not self.attention_dim:
            self.attention_dim = self.hidden_dim
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant != "base" and (not self.orders or self.orders[0] < 1):
            raise ValueError("graph variants need a nonempty set of positive orders")
        if self.syntax_lambda < 0:
            raise ValueError("syntax_lambda must be >= 0")
        if self.variant == "base" and self.syntax_lambda > 0:
            raise ValueError("the base variant has no head attention; use syntax_lambda=0")
        if self.hidden_dim < 1 or self.lstm_depth < 1:
            raise ValueError("hidden_dim and lstm_depth must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.embedding_dim < 1:
            raise ValueError("at least one feature source is required")

    @property
    def graph(self):
        return self.variant != "base"

    @property
    def embedding_dim(self):
        return self.static_dim + sum(int(c[2]) for c in self.contextual)

    @property
    def feedback_dim(self):
        h = self.hidden_dim
        return 5 * h if self.graph else h

    def to_dict(self):
        d = asdict(self)
        d["orders"] = list(self.orders)
        d["contextual"] = [list(c) for c in self.contextual]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class StepTrace:
    """Per-step diagnostics collected when ``trace=True``."""

    fed_labels: list = field(default_factory=list)
    label_probs: list = field(default_factory=list)
    gate: list = field(default_factory=list)
    eta_parent: list = field(default_factory=list)
    eta_child: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    mu_parent: list = field(default_factory=list)
    mu_child: list = field(default_factory=list)
    head_attention: np.ndarray = None
    parent_graphs: dict = None
    child_graphs: dict = None


@dataclass
class Encoded:
    E: object
    H: object
    hb0: object
    hfn: object
    init_states: list
    A1: object = None
    parent_cands: object = None  # (|d|, n+1, 2h) stacked gamma
    child_cands: object = None  # (|d|, n+1, 2h) stacked rho
    parents: dict = None
    children: dict = None


class SlahanModel:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        if params is None:
            params = self.init_params(config, np.random.default_rng(seed))
        self.params = params
        missing = set(self.param_shapes(config)) - set(params.names())
        if missing:
            raise KeyError(f"parameter store lacks {sorted(missing)}")

    # -- parameters ----------------------------------------------------------

    @staticmethod
    def param_shapes(config):
        c = config
        h = c.hidden_dim
        D = 2 * h
        a = c.attention_dim
        shapes = {}
        if c.static_dim:
            shapes["emb/root"] = (c.static_dim,)
            shapes["emb/unk"] = (c.static_dim,)
        for name, layers, dim in c.contextual:
            shapes[f"emb/phi/{name}"] = (int(layers), int(dim))
        for layer in range(c.lstm_depth):
            d_in = c.embedding_dim if layer == 0 else D
            for direction in ("fwd", "bwd"):
                shapes[f"enc/{direction}{layer}/W"] = (4 * h, d_in + h)
                shapes[f"enc/{direction}{layer}/b"] = (4 * h,)
        for layer in range(c.lstm_depth):
            d_in = NUM_LABELS + c.feedback_dim + c.embedding_dim if layer == 0 else h
            shapes[f"dec{layer}/W"] = (4 * h, d_in + h)
            shapes[f"dec{layer}/b"] = (4 * h,)
        ctx = 5 * h
        if c.graph:
            shapes["att/U"] = (a, D)
            shapes["att/W"] = (a, D)
            shapes["att/v"] = (a,)
            sides = {"parent": ("parent", "slahan"), "child": ("child", "slahan")}
            for side, users in sides.items():
                if c.variant in users:
                    if c.tie_order_weights:
                        shapes[f"order/{side}"] = (D, ctx)
                    else:
                        for d in c.orders:
                            shapes[f"order/{side}/{d}"] = (D, ctx)
            shapes["gate/W"] = (D, D + D + ctx)
        else:
            shapes["out/Wd"] = (h, D + h)
            shapes["out/bd"] = (h,)
        shapes["out/Wo"] = (NUM_LABELS, c.feedback_dim)
        return shapes

    @classmethod
    def init_params(cls, config, rng):
        """Glorot for weights and vectors, zeros for biases (forget gate included)."""
        store = ParameterStore()
        for name, shape in cls.param_shapes(config).items():
            if name.endswith("/b") or name == "out/bd":
                store.add(name, np.zeros(shape))
            else:
                store.add(name, glorot_init(shape, rng))
        return store

    # -- embedding / encoder ---------------------------------------------------

    def embed(self, tape, sentence, features):
        """``E`` of shape (n+1, emb); ``features`` is ``(static_vectors, contextual_blocks)``."""
        c = self.config
        static, ctx = features
        P = lambda name: tape.parameter(self.params, name)  # noqa: E731
        parts = []
        if c.static_dim:
            if static is None or len(static) != sentence.n + 1:
                raise ValueError("static features missing for this sentence")
            rows = [P("emb/root")]
            for vec in static[1:]:
                rows.append(P("emb/unk") if vec is None else tape.constant(vec))
            parts.append(tape.stack(rows))
        if len(ctx) != len(c.contextual):
            raise ValueError(
                f"model expects {len(c.contextual)} contextual sources, got {len(ctx)}"
            )
        for (name, layers, dim), block in zip(c.contextual, ctx):
            if block.shape != (layers, sentence.n + 1, dim):
                raise ValueError(
                    f"contextual source {name!r}: shape {block.shape}, "
                    f"expected {(layers, sentence.n + 1, dim)}"
                )
            parts.append(self.layer_weighted_features(tape, tape.constant(block), P(f"emb/phi/{name}")))
        return parts[0] if len(parts) == 1 else tape.concat(parts, axis=1)

    @staticmethod
    def layer_weighted_features(tape, L, phi):
        """``F_i = sum_k psi_k L_k,i`` with ``psi = softmax_k(phi_k . L_k,i)`` per token."""
        layers, positions, dim = L.shape
        scores = tape.sum(tape.mul(L, tape.reshape(phi, (layers, 1, dim))), axis=2)
        psi = tape.softmax(scores, axis=0)
        return tape.sum(tape.mul(L, tape.reshape(psi, (layers, positions, 1))), axis=0)

    def encode(self, tape, E, train=False, rng=None):
        """Stacked bi-LSTM. Returns ``(H, hb0, hfn, init_states)``.

        ``init_states[l]`` is the backward layer-``l`` state at position 0,
        handed to decoder layer ``l``.
        """
        c = self.config
        h = c.hidden_dim
        P = lambda name: tape.parameter(self.params, name)  # noqa: E731
        zeros = tape.constant(np.zeros(h))
        X = E
        init_states = []
        Hf = Hb = None
        for layer in range(c.lstm_depth):
            Xd = tape.dropout(X, c.dropout, rng, train)
            Hf, _ = tape.lstm_sequence(Xd, zeros, zeros, P(f"enc/fwd{layer}/W"), P(f"enc/fwd{layer}/b"))
            Hb, Cb = tape.lstm_sequence(
                Xd, zeros, zeros, P(f"enc/bwd{layer}/W"), P(f"enc/bwd{layer}/b"), reverse=True
            )
            init_states.append((tape.take(Hb, 0), tape.take(Cb, 0)))
            X = tape.concat([Hf, Hb], axis=1)
        n = E.shape[0] - 1
        return X, init_states[-1][0], tape.take(Hf, n), init_states

    def head_attention_scores(self, tape, H):
        """``scores[j, t] = v . tanh(U h_j + W h_t)``."""
        P = lambda name: tape.parameter(self.params, name)  # noqa: E731
        size = H.shape[0]
        a = self.config.attention_dim
        Uh = tape.matmul(H, tape.transpose(P("att/U")))
        Wh = tape.matmul(H, tape.transpose(P("att/W")))
        pre = tape.add(tape.reshape(Uh, (size, 1, a)), tape.reshape(Wh, (1, size, a)))
        return tape.matmul(tape.tanh(pre), P("att/v"))

    def prepare(self, tape, sentence, features, train=False, rng=None):
        """Everything computed once per sentence before decoding starts."""
        c = self.config
        E = self.embed(tape, sentence, features)
        H, hb0, hfn, init_states = self.encode(tape, E, train, rng)
        enc = Encoded(E=E, H=H, hb0=hb0, hfn=hfn, init_states=init_states)
        if not c.graph:
            return enc
        scores = self.head_attention_scores(tape, H)
        enc.A1 = ga.constrained_head_distribution(scores, tape)
        enc.parents = ga.compose_parent_graphs(enc.A1, c.orders, tape)
        enc.children = ga.child_graphs_from_parent(enc.parents, tape)
        if c.variant in ("parent", "slahan"):
            enc.parent_cands = tape.stack(
                [ga.parent_weighted_states(enc.parents[d], H, tape) for d in c.orders]
            )
        if c.variant in ("child", "slahan"):
            enc.child_cands = tape.stack(
                [ga.child_pooled_states(enc.children[d], H, tape) for d in c.orders]
            )
        return enc

    # -- decoder ---------------------------------------------------------------

    def order_gated_summary(self, tape, candidates, ctx, side):
        """Softmax over orders of ``cand_d . (W_d ctx)``; returns ``(mu, eta)``.

        ``candidates`` has shape (|orders|, dim).
        """
        c = self.config
        k, dim = candidates.shape
        if c.tie_order_weights:
            Wc = tape.matmul(tape.parameter(self.params, f"order/{side}"), ctx)
        else:
            W = tape.concat(
                [tape.parameter(self.params, f"order/{side}/{d}") for d in c.orders], axis=0
            )
            Wc = tape.reshape(tape.matmul(W, ctx), (k, dim))
        eta = tape.softmax(tape.sum(tape.mul(candidates, Wc), axis=1))
        return tape.matmul(eta, candidates), eta

    def selective_gate(self, tape, mu_parent, mu_child, ctx, force_gate=None):
        """``Omega = z * mu_parent + (1 - z) * mu_child`` with ``z = sigmoid(W_z [mu_p, mu_c, ctx])``."""
        if force_gate is None:
            z = tape.sigmoid(
                tape.matmul(tape.parameter(self.params, "gate/W"), tape.concat([mu_parent, mu_child, ctx]))
            )
        else:
            z = tape.constant(np.full(mu_parent.shape, float(force_gate)))
        omega = tape.add(tape.mul(z, mu_parent), tape.mul(tape.one_minus(z), mu_child))
        return omega, z

    def decode_step(self, tape, enc, t, y_prev, d_prev, states, train=False, rng=None,
                    overrides=None, trace=None):
        """One decoder step for word position ``t``; returns ``(logits, d_t, states)``."""
        c = self.config
        P = lambda name: tape.parameter(self.params, name)  # noqa: E731
        overrides = overrides or {}
        x = tape.concat(
            [tape.constant(LabelCodec.one_hot(y_prev)), d_prev, tape.take(enc.E, t)]
        )
        new_states = []
        for layer, (h, cell) in enumerate(states):
            x = tape.dropout(x, c.dropout, rng, train)
            h, cell = tape.lstm_cell(x, h, cell, P(f"dec{layer}/W"), P(f"dec{layer}/b"))
            new_states.append((h, cell))
            x = h
        s_t = x
        h_t = tape.take(enc.H, t)
        if not c.graph:
            d_t = tape.tanh(tape.affine(P("out/Wd"), tape.concat([h_t, s_t]), P("out/bd")))
        else:
            ctx = tape.concat([enc.hb0, enc.hfn, h_t, s_t])
            D = enc.H.shape[1]
            zero = tape.constant(np.zeros(D))
            mu_p = mu_c = zero
            eta_p = eta_c = None
            if enc.parent_cands is not None:
                mu_p, eta_p = self.order_gated_summary(
                    tape, tape.take(enc.parent_cands, (slice(None), t)), ctx, "parent"
                )
            if enc.child_cands is not None and not overrides.get("zero_child"):
                mu_c, eta_c = self.order_gated_summary(
                    tape, tape.take(enc.child_cands, (slice(None), t)), ctx, "child"
                )
            if overrides.get("zero_parent"):
                mu_p = zero
            omega, z = self.selective_gate(tape, mu_p, mu_c, ctx, overrides.get("force_gate"))
            d_t = tape.concat([h_t, omega, s_t])
            if trace is not None:
                trace.gate.append(z.value.copy())
                trace.omega.append(omega.value.copy())
                trace.mu_parent.append(mu_p.value.copy())
                trace.mu_child.append(mu_c.value.copy())
                trace.eta_parent.append(None if eta_p is None else eta_p.value.copy())
                trace.eta_child.append(None if eta_c is None else eta_c.value.copy())
        logits = tape.matmul(P("out/Wo"), d_t)
        return logits, d_t, new_states

    def _run(self, tape, sentence, features, gold=None, train=False, rng=None,
             overrides=None, trace=None):
        """Teacher-forced when ``gold`` is given, greedy otherwise.

        Returns ``(enc, logits_per_step, predicted_labels)``.
        """
        enc = self.prepare(tape, sentence, features, train, rng)
        if trace is not None and enc.A1 is not None:
            trace.head_attention = enc.A1.value.copy()
            trace.parent_graphs = {d: A.value.copy() for d, A in enc.parents.items()}
            trace.child_graphs = {d: B.value.copy() for d, B in enc.children.items()}
        states = list(enc.init_states)
        d_prev = tape.constant(np.zeros(self.config.feedback_dim))
        y_prev = None
        all_logits = []
        predicted = []
        for t in range(1, sentence.n + 1):
            logits, d_prev, states = self.decode_step(
                tape, enc, t, y_prev, d_prev, states, train, rng, overrides, trace
            )
            all_logits.append(logits)
            y_hat = int(np.argmax(logits.value))
            predicted.append(y_hat)
            if trace is not None:
                trace.fed_labels.append(y_prev)
                p = np.exp(logits.value - logits.value.max())
                trace.label_probs.append(p / p.sum())
            y_prev = gold[t - 1] if gold is not None else y_hat
        return enc, all_logits, predicted

    # -- public API --------------------------------------------------------------

    def sentence_loss(self, tape, sentence, features, syntax_lambda=None, train=False,
                      rng=None, overrides=None, trace=None):
        """Label negative log-likelihood (teacher forced) plus the weighted head-attention term."""
        lam = self.config.syntax_lambda if syntax_lambda is None else float(syntax_lambda)
        if sentence.labels is None:
            raise ValueError("sentence_loss needs gold labels")
        if lam > 0 and sentence.heads is None:
            raise ValueError("syntax_lambda > 0 requires gold heads")
        if lam > 0 and not self.config.graph:
            raise ValueError("the base variant has no head attention for the syntax term")
        enc, all_logits, _ = self._run(
            tape, sentence, features, gold=sentence.labels, train=train, rng=rng,
            overrides=overrides, trace=trace,
        )
        picks = [
            tape.take(tape.log_softmax(lg), y) for lg, y in zip(all_logits, sentence.labels)
        ]
        loss = tape.scale(tape.add_n(picks), -1.0)
        if lam > 0:
            loss = tape.add(loss, self.syntax_term(tape, enc.A1, sentence.heads, lam))
        return loss

    @staticmethod
    def syntax_term(tape, A1, heads, lam):
        """``-lam * sum_t log max(A1[head(t), t], floor)`` over gold edges ``t = 1..n``."""
        n = len(heads) - 1
        alpha = tape.gather(A1, list(heads[1:]), list(range(1, n + 1)))
        return tape.scale(tape.sum(tape.log(alpha, floor=SYNTAX_LOG_FLOOR)), -lam)

    def greedy_decode(self, sentence, features, overrides=None, trace=None):
        """Returns ``(labels, compressed_words)``; predicted labels feed the next step."""
        tape = Tape(record=False)
        _, _, predicted = self._run(tape, sentence, features, overrides=overrides, trace=trace)
        return predicted, sentence.compress(predicted)

    def forward_probs(self, sentence, features, gold=None, overrides=None):
        """Label distributions per step (inference mode), mainly for tests."""
        trace = StepTrace()
        self._run(Tape(record=False), sentence, features, gold=gold, overrides=overrides, trace=trace)
        return np.array(trace.label_probs), trace

    def head_argmax(self, sentence, features):
        """Predicted head of every word (argmax over each column of ``A1``)."""
        if not self.config.graph:
            raise ValueError("the base variant has no head attention")
        tape = Tape(record=False)
        enc = self.prepare(tape, sentence, features)
        return np.argmax(enc.A1.value, axis=0)


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_MAGIC = b"SLAHANCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, vocab_hash="", extra=None):
    """Header (magic, version, JSON) followed by little-endian float64 tensors in header order."""
    names = model.params.names()
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab_hash": vocab_hash,
        "tensors": [{"name": n, "shape": list(model.params.value(n).shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params.value(n), dtype="<f8").tobytes())


def load_checkpoint(path, expected_config=None, expected_vocab=None):
    """Returns ``(model, header)``; rejects unknown versions and mismatched config or vocabulary."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, size = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(size).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        if expected_config is not None and config.to_dict() != expected_config.to_dict():
            raise CheckpointError(f"{path}: model config does not match")
        if expected_vocab is not None and header["vocab_hash"] != expected_vocab:
            raise CheckpointError(f"{path}: vocabulary hash does not match")
        store = ParameterStore()
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise CheckpointError(f"{path}: truncated tensor {spec['name']!r}")
            store.add(spec["name"], data.reshape(shape))
    return SlahanModel(config, store), header


def params_digest(params):
    h = hashlib.sha256()
    for n in params.names():
        h.update(n.encode("utf-8"))
        h.update(np.ascontiguousarray(params.value(n), dtype="<f8").tobytes())
    return h.hexdigest()
