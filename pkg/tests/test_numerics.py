import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slahan.numerics import (
    NumericalError,
    ParameterStore,
    ShapeError,
    Tape,
    check_gradients,
    glorot_init,
    kernels,
    relative_error,
)
from slahan.numerics import _kernels_py

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _store(**values):
    s = ParameterStore()
    for k, v in values.items():
        s.add(k, v)
    return s


def _assert_grads(build, store, tol=1e-4):
    report = check_gradients(build, store)
    assert max(report.values()) < tol, report


class TestPrimitives:
    def test_masked_softmax_uniform(self):
        y = Tape().masked_softmax(Tape().constant([0.0, 0.0, 0.0]), [True, True, True])
        np.testing.assert_allclose(y.value, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_masked_softmax_exact_zero(self):
        t = Tape()
        y = t.masked_softmax(t.constant([5.0, -1000.0, 5.0]), [True, False, True])
        assert y.value.tolist() == [0.5, 0.0, 0.5]

    def test_matmul_by_hand(self):
        t = Tape()
        y = t.matmul(t.constant([[1, 2], [3, 4]]), t.constant([[5, 6], [7, 8]]))
        assert y.value.tolist() == [[19, 22], [43, 50]]

    def test_mask_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            t.masked_softmax(t.constant([1.0, 2.0, 3.0]), [True, False])

    def test_fully_masked_row(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.masked_softmax(t.constant([[1.0, 2.0]]), [[False, False]])

    @given(arrays(np.float64, (4, 5), elements=finite), arrays(bool, (4, 5)))
    def test_masked_softmax_rows(self, x, mask):
        mask[:, 0] = True
        y = Tape(record=False).masked_softmax(Tape().constant(x), mask, axis=1).value
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y[~mask] == 0.0)

    def test_non_finite_output_raises(self):
        t = Tape()
        with pytest.raises(NumericalError, match="log"):
            t.log(t.constant([0.0, 1.0]))

    def test_log_floor(self):
        t = Tape()
        assert t.log(t.constant([0.0]), floor=1e-12).value[0] == pytest.approx(math.log(1e-12))


class TestOpGradients:
    """Every primitive against central differences."""

    @pytest.fixture
    def store(self, rng):
        return _store(
            a=rng.normal(size=(3, 4)),
            b=rng.normal(size=(3, 4)),
            m=rng.normal(size=(4, 2)),
            v=rng.normal(size=4),
            w=rng.normal(size=3),
            p=rng.uniform(0.1, 1.0, size=(3, 4)),
            q=rng.normal(size=(3, 3)),
        )

    @pytest.fixture
    def weights(self, rng):
        cache = {}

        def get(shape):
            if shape not in cache:
                cache[shape] = rng.normal(size=shape)
            return cache[shape]

        return get

    def _loss(self, t, node, weights):
        return t.sum(t.mul(node, t.constant(weights(node.shape))))

    @pytest.mark.parametrize(
        "op",
        [
            lambda t, P: t.add(P("a"), P("b")),
            lambda t, P: t.sub(P("a"), P("v")),
            lambda t, P: t.mul(P("a"), P("b")),
            lambda t, P: t.scale(P("a"), -2.5),
            lambda t, P: t.one_minus(P("a")),
            lambda t, P: t.add_n([P("a"), P("b"), P("a")]),
            lambda t, P: t.tanh(P("a")),
            lambda t, P: t.sigmoid(P("a")),
            lambda t, P: t.log(P("p")),
            lambda t, P: t.matmul(P("a"), P("m")),
            lambda t, P: t.matmul(P("a"), P("v")),
            lambda t, P: t.matmul(P("w"), P("a")),
            lambda t, P: t.affine(P("a"), P("v"), P("w")),
            lambda t, P: t.dot(P("v"), P("v")),
            lambda t, P: t.transpose(P("a")),
            lambda t, P: t.concat([P("a"), P("b")], axis=0),
            lambda t, P: t.concat([P("v"), P("w")]),
            lambda t, P: t.stack([P("v"), P("v")]),
            lambda t, P: t.reshape(P("a"), (4, 3)),
            lambda t, P: t.take(P("a"), (slice(None), 2)),
            lambda t, P: t.gather(P("a"), [0, 2, 2], [1, 3, 3]),
            lambda t, P: t.sum(P("a"), axis=1),
            lambda t, P: t.max(P("a"), axis=0),
            lambda t, P: t.softmax(P("a"), axis=0),
            lambda t, P: t.masked_softmax(P("a"), np.eye(3, 4) < 1, axis=1),
            lambda t, P: t.log_softmax(P("v")),
            lambda t, P: t.weighted_maxpool(t.softmax(P("q"), axis=0), P("a")),
        ],
    )
    def test_primitive(self, op, store, weights):
        def build(t):
            return self._loss(t, op(t, lambda n: t.parameter(store, n)), weights)

        _assert_grads(build, store)

    def test_lstm_sequence(self, rng, backend):
        store = _store(X=rng.normal(size=(5, 3)), W=rng.normal(size=(8, 5)) * 0.5, b=rng.normal(size=8),
                       h0=rng.normal(size=2), c0=rng.normal(size=2))
        w = rng.normal(size=(2, 5, 2))
        for reverse in (False, True):
            def build(t):
                P = lambda n: t.parameter(store, n)  # noqa: E731
                H, C = t.lstm_sequence(P("X"), P("h0"), P("c0"), P("W"), P("b"), reverse)
                return t.add(t.sum(t.mul(H, t.constant(w[0]))), t.sum(t.mul(C, t.constant(w[1]))))

            _assert_grads(build, store)


class TestLstmCell:
    def test_zero_weights(self):
        t = Tape()
        z = t.constant(np.zeros(3))
        h, c = t.lstm_cell(t.constant(np.zeros(2)), z, z, t.constant(np.zeros((12, 5))), t.constant(np.zeros(12)))
        assert h.value.tolist() == [0.0] * 3 and c.value.tolist() == [0.0] * 3

    def test_deterministic(self, rng):
        W, b = rng.normal(size=(12, 5)), rng.normal(size=12)
        x, h0, c0 = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
        outs = []
        for _ in range(2):
            t = Tape()
            h, c = t.lstm_cell(t.constant(x), t.constant(h0), t.constant(c0), t.constant(W), t.constant(b))
            outs.append(np.concatenate([h.value, c.value]))
        assert np.array_equal(outs[0], outs[1])

    def test_gradient_of_sum_h(self, rng, backend):
        store = _store(x=rng.normal(size=2), h=rng.normal(size=3), c=rng.normal(size=3),
                       W=rng.normal(size=(12, 5)), b=rng.normal(size=12))

        def build(t):
            P = lambda n: t.parameter(store, n)  # noqa: E731
            h, c = t.lstm_cell(P("x"), P("h"), P("c"), P("W"), P("b"))
            return t.add(t.sum(h), t.scale(t.sum(c), 0.3))

        _assert_grads(build, store)

    def test_shape_error(self):
        t = Tape()
        z = t.constant(np.zeros(3))
        with pytest.raises(ShapeError):
            t.lstm_cell(t.constant(np.zeros(2)), z, z, t.constant(np.zeros((12, 4))), t.constant(np.zeros(12)))

    def test_matches_textbook_formula(self, rng):
        W, b = rng.normal(size=(8, 4)), rng.normal(size=8)
        x, h0, c0 = rng.normal(size=2), rng.normal(size=2), rng.normal(size=2)
        sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
        z = W @ np.concatenate([x, h0]) + b
        i, f, o, g = sig(z[:2]), sig(z[2:4]), sig(z[4:6]), np.tanh(z[6:])
        c = f * c0 + i * g
        t = Tape()
        hn, cn = t.lstm_cell(t.constant(x), t.constant(h0), t.constant(c0), t.constant(W), t.constant(b))
        np.testing.assert_allclose(cn.value, c, rtol=1e-13)
        np.testing.assert_allclose(hn.value, o * np.tanh(c), rtol=1e-13)


class TestBackward:
    def test_constant_times_param(self):
        store = _store(p=np.array(2.0))
        t = Tape()
        t.backward(t.scale(t.parameter(store, "p"), 3.5))
        assert store.grad("p") == 3.5

    def test_sum_tanh_wx(self, rng):
        store = _store(W=rng.normal(size=(3, 4)))
        x = rng.normal(size=4)
        _assert_grads(lambda t: t.sum(t.tanh(t.matmul(t.parameter(store, "W"), t.constant(x)))), store)

    def test_accumulates_without_zeroing(self, rng):
        store = _store(W=rng.normal(size=(3, 4)))
        x = rng.normal(size=4)
        snapshots = []
        for _ in range(2):
            t = Tape()
            t.backward(t.sum(t.tanh(t.matmul(t.parameter(store, "W"), t.constant(x)))))
            snapshots.append(store.grad("W").copy())
        assert np.array_equal(snapshots[1], 2 * snapshots[0])

    def test_reused_parameter_sums_paths(self):
        store = _store(p=np.array(3.0))
        t = Tape()
        p = t.parameter(store, "p")
        t.backward(t.mul(p, p))
        assert store.grad("p") == 6.0

    def test_non_scalar_loss(self):
        t = Tape()
        with pytest.raises(ShapeError):
            t.backward(t.tanh(t.constant([1.0, 2.0])))

    def test_inference_tape_cannot_backward(self):
        t = Tape(record=False)
        with pytest.raises(RuntimeError):
            t.backward(t.sum(t.constant([1.0])))
        assert len(t) == 0

    def test_deterministic_backward(self, rng):
        W = rng.normal(size=(3, 4))
        x = rng.normal(size=4)
        grads = []
        for _ in range(2):
            store = _store(W=W)
            t = Tape()
            t.backward(t.sum(t.sigmoid(t.matmul(t.parameter(store, "W"), t.constant(x)))))
            grads.append(store.grad("W").copy())
        assert np.array_equal(*grads)


class TestDropout:
    def test_identity_at_eval(self, rng):
        t = Tape()
        x = t.constant(rng.normal(size=10))
        assert t.dropout(x, 0.3, rng, train=False) is x

    def test_inverted_scaling(self):
        t = Tape()
        y = t.dropout(t.constant(np.ones(200_000)), 0.3, np.random.default_rng(0), train=True).value
        assert set(np.unique(y).round(12)) == {0.0, round(1 / 0.7, 12)}
        assert y.mean() == pytest.approx(1.0, abs=0.01)

    def test_seeded(self):
        t = Tape()
        a = t.dropout(t.constant(np.ones(50)), 0.5, np.random.default_rng(7), True).value
        b = t.dropout(t.constant(np.ones(50)), 0.5, np.random.default_rng(7), True).value
        assert np.array_equal(a, b)


class TestGlorot:
    def test_bound(self):
        w = glorot_init((200, 200), np.random.default_rng(0))
        bound = math.sqrt(6 / 400)
        assert bound == pytest.approx(0.12247, abs=1e-5)
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.99 * bound

    def test_seeded(self):
        a = glorot_init((3, 5), np.random.default_rng(3))
        b = glorot_init((3, 5), np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_mean_near_zero(self):
        assert abs(glorot_init((1000, 1000), np.random.default_rng(0)).mean()) < 0.01

    def test_rejects_3d(self):
        with pytest.raises(ValueError):
            glorot_init((2, 2, 2), np.random.default_rng(0))


class TestParameterStore:
    def test_duplicate(self):
        s = _store(a=np.zeros(2))
        with pytest.raises(KeyError):
            s.add("a", np.zeros(2))

    def test_state_roundtrip(self, rng):
        s = _store(a=rng.normal(size=(2, 3)), b=rng.normal(size=4))
        t = ParameterStore()
        t.add("a", np.zeros((2, 3)))
        t.add("b", np.zeros(4))
        t.load_state_dict(s.state_dict())
        assert all(np.array_equal(s.value(n), t.value(n)) for n in s.names())

    def test_relative_error_floor(self):
        assert relative_error(1e-9, 0.0).item() == pytest.approx(1e-4)
        assert relative_error(2.0, 1.0).item() == pytest.approx(0.5)


class TestKernelParity:
    """The compiled kernels against the numpy reference."""

    pytestmark = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")

    @pytest.fixture(autouse=True)
    def _ext(self):
        from slahan.numerics import _ckernels

        self.ck = _ckernels

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 5), st.integers(1, 6), st.booleans(), st.integers(0, 2**32 - 1))
    def test_lstm_sequence(self, T, m, n, reverse, seed):
        r = np.random.default_rng(seed)
        W, b = r.normal(size=(4 * n, m + n)), r.normal(size=4 * n)
        X, h0, c0 = r.normal(size=(T, m)), r.normal(size=n), r.normal(size=n)
        py = _kernels_py.lstm_sequence_forward(W, b, X, h0, c0, reverse)
        cy = self.ck.lstm_sequence_forward(W, b, X, h0, c0, reverse)
        for a, c in zip(py, cy):
            np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-14)
        dH, dC = r.normal(size=(T, n)), r.normal(size=(T, n))
        grads = []
        for mod, fwd in ((_kernels_py, py), (self.ck, cy)):
            dW, db = np.zeros_like(W), np.zeros_like(b)
            out = mod.lstm_sequence_backward(W, X, c0, fwd[1], fwd[2], fwd[3], fwd[4], dH, dC, reverse, dW, db)
            grads.append((*out, dW, db))
        for a, c in zip(*grads):
            np.testing.assert_allclose(a, c, rtol=1e-11, atol=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_weighted_maxpool(self, n, k, seed):
        r = np.random.default_rng(seed)
        B, H = r.uniform(size=(n, n)), r.normal(size=(n, k))
        B[r.uniform(size=(n, n)) < 0.3] = 0.0
        (o1, a1), (o2, a2) = _kernels_py.weighted_maxpool_forward(B, H), self.ck.weighted_maxpool_forward(B, H)
        assert np.array_equal(o1, o2) and np.array_equal(a1, a2)
        g = r.normal(size=(n, k))
        for x, y in zip(_kernels_py.weighted_maxpool_backward(B, H, a1, g), self.ck.weighted_maxpool_backward(B, H, a2, g)):
            np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-15)

    @given(st.lists(st.integers(0, 4), max_size=15), st.lists(st.integers(0, 4), max_size=15))
    def test_lcs(self, a, b):
        assert _kernels_py.lcs_length(a, b) == self.ck.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))

    def test_maxpool_tie_goes_to_first(self):
        B = np.zeros((3, 3))
        H = np.ones((3, 2))
        for mod in (_kernels_py, self.ck):
            _, arg = mod.weighted_maxpool_forward(B, H)
            assert np.all(np.asarray(arg) == 0)
