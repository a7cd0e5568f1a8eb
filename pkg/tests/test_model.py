import math

import numpy as np
import pytest
from conftest import tiny_features, tiny_model
from golden import PATH as GOLDEN_PATH
from golden import golden_values

from slahan.corpus import KEEP, Sentence
from slahan.model import (
    CheckpointError,
    ModelConfig,
    SlahanModel,
    StepTrace,
    load_checkpoint,
    params_digest,
    save_checkpoint,
)
from slahan.numerics import Tape, check_gradients, kernels


def feats(sentence, fs=None):
    return (fs or tiny_features()).for_sentence(0, sentence)


def set_param(model, name, value):
    model.params.set_value(name, np.asarray(value, dtype=np.float64))


class TestConfig:
    def test_base_with_syntax_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="base", syntax_lambda=1.0, static_dim=2)

    def test_needs_features(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="parent", static_dim=0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="sibling", static_dim=2)

    def test_dict_roundtrip(self):
        cfg = ModelConfig(variant="child", orders=(3, 1), static_dim=2, contextual=(("e", 3, 4),))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.orders == (1, 3)

    def test_feedback_width(self):
        assert ModelConfig(hidden_dim=7, static_dim=2).feedback_dim == 35
        assert ModelConfig(variant="base", hidden_dim=7, syntax_lambda=0.0, static_dim=2).feedback_dim == 7


class TestEmbedding:
    def _mix(self, L, phi):
        t = Tape()
        return SlahanModel.layer_weighted_features(t, t.constant(L), t.constant(phi)).value

    def test_single_layer(self, rng):
        L = rng.normal(size=(1, 4, 3))
        np.testing.assert_array_equal(self._mix(L, rng.normal(size=(1, 3))), L[0])

    def test_identical_layers(self, rng):
        v = rng.normal(size=(1, 5, 3))
        np.testing.assert_allclose(self._mix(np.concatenate([v, v]), rng.normal(size=(2, 3))), v[0], rtol=1e-15)

    def test_ln3_mixture(self):
        u = np.array([math.log(3.0), 0.0])
        w = np.array([0.0, 5.0])
        L = np.stack([u[None], w[None]])
        phi = np.array([[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(self._mix(L, phi)[0], 0.75 * u + 0.25 * w, rtol=1e-14)

    def test_unk_uses_trained_vector(self, sentence4):
        m = tiny_model()
        static, ctx = feats(sentence4)
        static[2] = None
        E = m.embed(Tape(), sentence4, (static, ctx)).value
        np.testing.assert_array_equal(E[2, :3], m.params.value("emb/unk"))
        np.testing.assert_array_equal(E[0, :3], m.params.value("emb/root"))

    def test_wrong_source_count(self, sentence4):
        with pytest.raises(ValueError):
            tiny_model().embed(Tape(), sentence4, (feats(sentence4)[0], []))


class TestEncoder:
    def test_root_only(self):
        m = tiny_model()
        t = Tape()
        E = t.constant(np.zeros((1, m.config.embedding_dim)))
        H, *_ = m.encode(t, E)
        assert H.shape == (1, 8)

    def test_dropout_modes(self, sentence4):
        m = tiny_model(dropout=0.3)
        t = Tape()
        E = m.embed(t, sentence4, feats(sentence4))
        ev1 = m.encode(t, E)[0].value
        ev2 = m.encode(t, E)[0].value
        tr = m.encode(t, E, train=True, rng=np.random.default_rng(0))[0].value
        assert np.array_equal(ev1, ev2)
        assert not np.array_equal(ev1, tr)

    def test_gradients_two_layers(self, rng):
        m = tiny_model(depth=2)
        s = Sentence.from_words(["a", "b", "c"])
        f = feats(s)
        w = rng.normal(size=(4, 8))
        names = [n for n in m.params.names() if n.startswith(("enc/", "emb/"))]

        def build(t):
            H = m.encode(t, m.embed(t, s, f))[0]
            return t.sum(t.mul(H, t.constant(w)))

        assert max(check_gradients(build, m.params, names).values()) < 1e-4


class TestHeadAttention:
    def test_zero_v_gives_uniform(self, sentence4):
        m = tiny_model()
        set_param(m, "att/v", np.zeros(4))
        A = m.prepare(Tape(), sentence4, feats(sentence4)).A1.value
        assert A[:, 0].tolist() == [1.0, 0, 0, 0, 0]
        np.testing.assert_allclose(A[:, 1], [0.25, 0, 0.25, 0.25, 0.25], rtol=1e-15)
        np.testing.assert_allclose(A[:, 3], [0.25, 0.25, 0.25, 0, 0.25], rtol=1e-15)

    def test_closed_form(self):
        cfg = ModelConfig(variant="slahan", orders=(1,), hidden_dim=1, attention_dim=1, lstm_depth=1,
                          dropout=0.0, static_dim=1)
        m = SlahanModel(cfg, seed=0)
        set_param(m, "att/U", [[0.5, -1.0]])
        set_param(m, "att/W", [[2.0, 0.25]])
        set_param(m, "att/v", [1.5])
        H = np.array([[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]])
        t = Tape()
        S = m.head_attention_scores(t, t.constant(H)).value
        for j in range(3):
            for k in range(3):
                u = 0.5 * H[j, 0] - 1.0 * H[j, 1]
                w = 2.0 * H[k, 0] + 0.25 * H[k, 1]
                assert S[j, k] == pytest.approx(1.5 * math.tanh(u + w), abs=1e-15)

    def test_independent_of_decoding(self, sentence4):
        m = tiny_model()
        a = m.forward_probs(sentence4, feats(sentence4))[1].head_attention
        b = m.forward_probs(sentence4, feats(sentence4), gold=[1, 1, 1, 1])[1].head_attention
        assert np.array_equal(a, b)


class TestOrderGating:
    def _model(self, orders=(1, 2)):
        cfg = ModelConfig(variant="slahan", orders=orders, hidden_dim=1, lstm_depth=1, dropout=0.0, static_dim=1)
        return SlahanModel(cfg, seed=0)

    def test_single_order(self, rng):
        m = self._model(orders=(1,))
        t = Tape()
        cand = rng.normal(size=(1, 2))
        mu, _ = m.order_gated_summary(t, t.constant(cand), t.constant(rng.normal(size=5)), "parent")
        np.testing.assert_array_equal(mu.value, cand[0])

    def test_identical_candidates(self, rng):
        m = self._model()
        t = Tape()
        v = rng.normal(size=2)
        mu, _ = m.order_gated_summary(t, t.constant(np.stack([v, v])), t.constant(rng.normal(size=5)), "child")
        np.testing.assert_allclose(mu.value, v, rtol=1e-15)

    def test_ln4_weights(self):
        m = self._model()
        W1 = np.zeros((2, 5))
        W1[0, 0] = math.log(4.0)
        set_param(m, "order/parent/1", W1)
        set_param(m, "order/parent/2", np.zeros((2, 5)))
        t = Tape()
        cand = np.array([[1.0, 0.0], [0.0, 1.0]])
        mu, eta = m.order_gated_summary(t, t.constant(cand), t.constant([1.0, 0, 0, 0, 0]), "parent")
        np.testing.assert_allclose(eta.value, [0.8, 0.2], rtol=1e-15)
        np.testing.assert_allclose(mu.value, [0.8, 0.2], rtol=1e-15)

    def test_tied_weights(self, sentence4):
        cfg = ModelConfig(variant="slahan", orders=(1, 2, 3), hidden_dim=2, lstm_depth=1, dropout=0.0,
                          static_dim=3, contextual=(("ctx", 2, 3),), tie_order_weights=True)
        m = SlahanModel(cfg, seed=0)
        assert "order/parent" in m.params and "order/parent/1" not in m.params
        probs, _ = m.forward_probs(sentence4, feats(sentence4))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestSelectiveGate:
    def _model(self):
        cfg = ModelConfig(variant="slahan", orders=(1,), hidden_dim=1, lstm_depth=1, dropout=0.0, static_dim=1)
        return SlahanModel(cfg, seed=0)

    def test_zero_weights(self, rng):
        m = self._model()
        set_param(m, "gate/W", np.zeros((2, 9)))
        t = Tape()
        mp, mc = rng.normal(size=2), rng.normal(size=2)
        omega, z = m.selective_gate(t, t.constant(mp), t.constant(mc), t.constant(rng.normal(size=5)))
        assert z.value.tolist() == [0.5, 0.5]
        np.testing.assert_allclose(omega.value, (mp + mc) / 2, rtol=1e-15)

    def test_equal_inputs(self, rng):
        m = self._model()
        t = Tape()
        v = rng.normal(size=2)
        omega, _ = m.selective_gate(t, t.constant(v), t.constant(v), t.constant(rng.normal(size=5)))
        np.testing.assert_allclose(omega.value, v, rtol=1e-15)

    def test_hand_sigmoid(self, rng):
        m = self._model()
        Wz = rng.normal(size=(2, 9))
        set_param(m, "gate/W", Wz)
        mp, mc, ctx = rng.normal(size=2), rng.normal(size=2), rng.normal(size=5)
        t = Tape()
        _, z = m.selective_gate(t, t.constant(mp), t.constant(mc), t.constant(ctx))
        x = np.concatenate([mp, mc, ctx])
        for k in range(2):
            assert z.value[k] == pytest.approx(1 / (1 + math.exp(-float(Wz[k] @ x))), rel=1e-14)


class TestDecoder:
    def test_probabilities(self, sentence4):
        for variant in ("base", "parent", "child", "slahan"):
            probs, _ = tiny_model(variant).forward_probs(sentence4, feats(sentence4))
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_base_feedback_range(self, sentence4):
        m = tiny_model("base")
        t = Tape()
        enc = m.prepare(t, sentence4, feats(sentence4))
        _, d, _ = m.decode_step(t, enc, 1, None, t.constant(np.zeros(4)), list(enc.init_states))
        assert np.all(np.abs(d.value) < 1.0)

    def test_golden_step(self):
        want = np.load(GOLDEN_PATH)
        got = golden_values()
        for key in want.files:
            np.testing.assert_array_equal(got[key], want[key], err_msg=key)

    @pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")
    def test_golden_step_compiled_close(self):
        want = np.load(GOLDEN_PATH)
        got = golden_values("compiled")
        for key in want.files:
            np.testing.assert_allclose(got[key], want[key], rtol=1e-12, atol=1e-14)

    def test_gate_convexity(self, sentence4):
        trace = StepTrace()
        tiny_model().greedy_decode(sentence4, feats(sentence4), trace=trace)
        for om, mp, mc in zip(trace.omega, trace.mu_parent, trace.mu_child):
            lo, hi = np.minimum(mp, mc), np.maximum(mp, mc)
            assert np.all(om >= lo - 1e-15) and np.all(om <= hi + 1e-15)

    def test_feeding_regimes(self, sentence4):
        m = tiny_model()
        tr = StepTrace()
        m.sentence_loss(Tape(), sentence4, feats(sentence4), trace=tr)
        assert tr.fed_labels == [None] + list(sentence4.labels[:-1])
        inf = StepTrace()
        labels, _ = m.greedy_decode(sentence4, feats(sentence4), trace=inf)
        assert inf.fed_labels == [None] + labels[:-1]


class TestGreedyDecode:
    def test_all_keep(self, sentence4):
        m = tiny_model()
        set_param(m, "out/Wo", np.zeros_like(m.params.value("out/Wo")))
        labels, comp = m.greedy_decode(sentence4, feats(sentence4))
        assert labels == [KEEP] * 4 and comp == sentence4.words

    def test_deterministic(self, sentence4):
        m = tiny_model(dropout=0.3)
        assert m.greedy_decode(sentence4, feats(sentence4)) == m.greedy_decode(sentence4, feats(sentence4))


class TestLoss:
    def test_uniform_labels(self, sentence4):
        m = tiny_model(lam=0.0)
        set_param(m, "out/Wo", np.zeros_like(m.params.value("out/Wo")))
        loss = m.sentence_loss(Tape(), sentence4, feats(sentence4)).value
        assert loss == pytest.approx(4 * math.log(3), rel=1e-14)

    def test_lambda_zero_is_label_nll(self, sentence4):
        m = tiny_model()
        f = feats(sentence4)
        probs, _ = m.forward_probs(sentence4, f, gold=sentence4.labels)
        nll = -sum(math.log(p[y]) for p, y in zip(probs, sentence4.labels))
        assert m.sentence_loss(Tape(), sentence4, f, syntax_lambda=0.0).value == pytest.approx(nll, rel=1e-12)

    def test_syntax_term_by_hand(self):
        t = Tape()
        A1 = np.array([[1.0, 0.5, 0.5], [0.0, 0.0, 0.5], [0.0, 0.5, 0.0]])
        term = SlahanModel.syntax_term(t, t.constant(A1), [0, 0], 1.0)
        assert term.value == pytest.approx(-math.log(0.5), rel=1e-15)

    def test_syntax_term_floor(self):
        t = Tape()
        A1 = np.array([[1.0, 1.0], [0.0, 0.0]])
        term = SlahanModel.syntax_term(t, t.constant(A1), [0, 1], 2.0)
        assert term.value == pytest.approx(-2.0 * math.log(1e-12))

    def test_requires_heads(self):
        s = Sentence.from_words(["a", "b"], None, ["KEEP", "KEEP"])
        with pytest.raises(ValueError):
            tiny_model().sentence_loss(Tape(), s, feats(s))

    def test_full_gradient_check(self):
        s = Sentence.from_words(["a", "(", "b", ")"], [0, 1, 2, 2], ["KEEP", "DELETE", "DELETE", "DELETE"])
        m = tiny_model(hidden=4, orders=(1, 2), depth=1)
        f = feats(s)
        report = check_gradients(lambda t: m.sentence_loss(t, s, f), m.params)
        assert max(report.values()) < 1e-4, report


class TestVariantEquivalence:
    def _pair(self, other):
        full = tiny_model("slahan", orders=(1, 2, 3))
        sub = SlahanModel(
            ModelConfig(**{**full.config.to_dict(), "variant": other}), params=full.params
        )
        return full, sub

    def test_parent(self, sentence4):
        full, parent = self._pair("parent")
        f = feats(sentence4)
        a = full.forward_probs(sentence4, f, overrides={"zero_child": True, "force_gate": 1.0})[0]
        b = parent.forward_probs(sentence4, f, overrides={"force_gate": 1.0})[0]
        assert np.array_equal(a, b)
        la = full.sentence_loss(Tape(), sentence4, f, overrides={"zero_child": True, "force_gate": 1.0}).value
        lb = parent.sentence_loss(Tape(), sentence4, f, overrides={"force_gate": 1.0}).value
        assert la == lb

    def test_parent_learned_gate(self, sentence4):
        full, parent = self._pair("parent")
        f = feats(sentence4)
        a = full.forward_probs(sentence4, f, overrides={"zero_child": True})[0]
        assert np.array_equal(a, parent.forward_probs(sentence4, f)[0])

    def test_child(self, sentence4):
        full, child = self._pair("child")
        f = feats(sentence4)
        a = full.forward_probs(sentence4, f, overrides={"zero_parent": True, "force_gate": 0.0})[0]
        b = child.forward_probs(sentence4, f, overrides={"force_gate": 0.0})[0]
        assert np.array_equal(a, b)

    def test_unforced_models_differ(self, sentence4):
        full, parent = self._pair("parent")
        f = feats(sentence4)
        assert not np.array_equal(full.forward_probs(sentence4, f)[0], parent.forward_probs(sentence4, f)[0])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, sentence4):
        m = tiny_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, vocab_hash="abc", extra={"epoch": 3})
        back, header = load_checkpoint(path, expected_config=m.config, expected_vocab="abc")
        assert params_digest(back.params) == params_digest(m.params)
        assert header["extra"] == {"epoch": 3}
        f = feats(sentence4)
        assert back.greedy_decode(sentence4, f) == m.greedy_decode(sentence4, f)

    def test_mismatches(self, tmp_path):
        m = tiny_model()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, m, vocab_hash="abc")
        with pytest.raises(CheckpointError, match="vocabulary"):
            load_checkpoint(path, expected_vocab="xyz")
        with pytest.raises(CheckpointError, match="config"):
            load_checkpoint(path, expected_config=tiny_model(hidden=3).config)

    def test_bad_magic_and_version(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        m = tiny_model()
        save_checkpoint(p, m)
        raw = bytearray(p.read_bytes())
        raw[8] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(p, tiny_model())
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "a", tiny_model(seed=5))
        save_checkpoint(tmp_path / "b", tiny_model(seed=5))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
