import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtrdistill import autograd as ag

SEEDS = range(10)


def _param(rng, shape, scale=1.0):
    return ag.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _probe(out: ag.Tensor, rng) -> ag.Tensor:
    """Contract an output with a fixed random tensor so every entry matters."""
    w = rng.normal(size=out.shape)
    return ag.sum(ag.mul(out, w))


UNARY = {
    "tanh": lambda x: ag.tanh(x),
    "sigmoid": lambda x: ag.sigmoid(x),
    "gelu": lambda x: ag.gelu(x),
    "square": lambda x: ag.square(x),
    "softmax": lambda x: ag.softmax(x, axis=-1),
    "log_softmax": lambda x: ag.log_softmax(x, axis=-1),
    "reshape": lambda x: ag.reshape(x, (4, 3)),
    "transpose": lambda x: ag.transpose(x, (1, 0)),
    "swapaxes": lambda x: ag.swapaxes(x, 0, 1),
    "index": lambda x: ag.index(x, (slice(1, 3), [0, 2, 2])),
    "sum_axis": lambda x: ag.sum(x, axis=1),
    "mean_keep": lambda x: ag.mean(x, axis=0, keepdims=True),
    "neg": lambda x: -x,
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    @pytest.mark.parametrize("seed", SEEDS)
    def test_unary(self, name, seed):
        rng = np.random.default_rng(seed)
        p = {"x": _param(rng, (3, 4))}
        probe_rng = np.random.default_rng(1000 + seed)
        w = None

        def f(q):
            nonlocal w
            out = UNARY[name](q["x"])
            if w is None:
                w = probe_rng.normal(size=out.shape)
            return ag.sum(ag.mul(out, w))

        assert ag.grad_check(f, p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_away_from_kink(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        x = np.where(np.abs(x) < 0.05, 0.5, x)
        p = {"x": ag.Tensor(x, requires_grad=True)}
        w = rng.normal(size=(3, 4))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(ag.relu(q["x"]), w)), p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_binary_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": _param(rng, (2, 3, 4)), "b": _param(rng, (3, 1)), "c": _param(rng, (4,))}
        w = rng.normal(size=(2, 3, 4))

        def f(q):
            y = ag.mul(ag.add(q["a"], q["b"]), q["c"]) - q["b"]
            return ag.sum(ag.mul(y, w))

        assert ag.grad_check(f, p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_batched(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": _param(rng, (2, 3, 4)), "b": _param(rng, (4, 5)), "c": _param(rng, (2, 5, 2))}
        w = rng.normal(size=(2, 3, 2))
        assert ag.grad_check(lambda q: ag.sum(ag.mul((q["a"] @ q["b"]) @ q["c"], w)), p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        p = {"x": _param(rng, (2, 3, 6)), "g": _param(rng, (6,)), "b": _param(rng, (6,))}
        w = rng.normal(size=(2, 3, 6))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(ag.layer_norm(q["x"], q["g"], q["b"]), w)), p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_embedding_repeated_ids(self, seed):
        rng = np.random.default_rng(seed)
        p = {"t": _param(rng, (7, 3))}
        ids = rng.integers(0, 7, size=(2, 5))
        ids[0, :2] = 3
        w = rng.normal(size=(2, 5, 3))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(ag.embedding(q["t"], ids), w)), p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_masked_softmax(self, seed):
        rng = np.random.default_rng(seed)
        p = {"x": _param(rng, (3, 5))}
        mask = np.ones((3, 5), dtype=bool)
        mask[:, 3:] = False
        w = rng.normal(size=(3, 5))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(ag.softmax(q["x"], mask=mask), w)), p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_stack_where(self, seed):
        rng = np.random.default_rng(seed)
        p = {"a": _param(rng, (2, 3)), "b": _param(rng, (2, 2))}
        mask = rng.random((2, 5)) > 0.5
        w = rng.normal(size=(2, 2, 5))

        def f(q):
            c = ag.concat([q["a"], q["b"]], axis=1)
            s = ag.stack([c, ag.where(mask, c, ag.tanh(c))], axis=1)
            return ag.sum(ag.mul(s, w))

        assert ag.grad_check(f, p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gather_time_and_mean_pool(self, seed):
        rng = np.random.default_rng(seed)
        p = {"x": _param(rng, (3, 5, 2))}
        idx = np.stack([rng.permutation(5) for _ in range(3)])
        dup = np.array([[0, 0, 1, 4, 4], [2, 2, 2, 2, 2], [4, 3, 2, 1, 0]])
        lengths = np.array([5, 2, 3])
        w = rng.normal(size=(3, 2))

        def f(q):
            g = ag.add(ag.gather_time(q["x"], idx), ag.gather_time(q["x"], dup))
            return ag.sum(ag.mul(ag.mean_pool(g, lengths), w))

        assert ag.grad_check(f, p) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_lstm_scan(self, seed):
        rng = np.random.default_rng(seed)
        B, T, d = 3, 5, 2
        p = {"xw": _param(rng, (B, T, 4 * d)), "w": _param(rng, (d, 4 * d), 0.5)}
        valid = np.arange(T)[None, :] < np.array([5, 3, 1])[:, None]
        w = rng.normal(size=(B, T, d))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(ag.lstm_scan(q["xw"], q["w"], valid), w)), p) < 1e-4


def _lstm_composed(xw, w_hh, valid):
    """Reference recurrence built from elementary taped ops."""
    B, T, G = xw.shape
    d = G // 4
    h = ag.Tensor(np.zeros((B, d)))
    c = ag.Tensor(np.zeros((B, d)))
    outs = []
    for t in range(T):
        z = ag.index(xw, (slice(None), t)) + h @ w_hh
        i = ag.sigmoid(z[:, :d])
        f = ag.sigmoid(z[:, d:2 * d])
        o = ag.sigmoid(z[:, 2 * d:3 * d])
        g = ag.tanh(z[:, 3 * d:])
        c_new = f * c + i * g
        h_new = o * ag.tanh(c_new)
        m = valid[:, t:t + 1]
        c = ag.where(m, c_new, c)
        h = ag.where(m, h_new, h)
        outs.append(h)
    return ag.stack(outs, axis=1)


class TestLstmScanOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_composition(self, seed):
        rng = np.random.default_rng(seed)
        B, T, d = 4, 6, 3
        xw = rng.normal(size=(B, T, 4 * d))
        w_hh = rng.normal(scale=0.5, size=(d, 4 * d))
        valid = np.arange(T)[None, :] < rng.integers(1, T + 1, size=B)[:, None]
        gH = rng.normal(size=(B, T, d))

        results = []
        for fn in (ag.lstm_scan, _lstm_composed):
            a = ag.Tensor(xw.copy(), requires_grad=True)
            b = ag.Tensor(w_hh.copy(), requires_grad=True)
            with ag.GradTape() as tape:
                out = fn(a, b, valid)
                loss = ag.sum(ag.mul(out, gH))
            tape.backward(loss)
            results.append((out.data, a.grad, b.grad))
        (h1, ga1, gb1), (h2, ga2, gb2) = results
        np.testing.assert_allclose(h1, h2, atol=1e-13)
        np.testing.assert_allclose(ga1, ga2, atol=1e-12)
        np.testing.assert_allclose(gb1, gb2, atol=1e-12)


class TestMatmul:
    def test_identity(self):
        b = np.random.default_rng(0).normal(size=(3, 4))
        out = ag.matmul(ag.tensor(np.eye(3)), ag.tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_small_example(self):
        out = ag.matmul(ag.tensor([[1.0, 2.0], [3.0, 4.0]]), ag.tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_random_gradient_tight(self):
        rng = np.random.default_rng(3)
        p = {"a": _param(rng, (5, 4)), "b": _param(rng, (4, 3))}
        w = rng.normal(size=(5, 3))
        assert ag.grad_check(lambda q: ag.sum(ag.mul(q["a"] @ q["b"], w)), p) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ag.DimensionError) as exc:
            ag.matmul(ag.tensor(np.zeros((2, 3))), ag.tensor(np.zeros((4, 5))))
        msg = str(exc.value)
        assert "(2, 3)" in msg and "(4, 5)" in msg


class TestSoftmax:
    def test_zeros(self):
        np.testing.assert_array_equal(ag.softmax(ag.tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_equal_logits(self):
        y = ag.softmax(ag.tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_array_equal(y, [0.5, 0.5])

    def test_high_precision_reference(self):
        mpmath.mp.dps = 50
        xs = [1, 2, 3]
        den = mpmath.fsum(mpmath.exp(v) for v in xs)
        ref = [float(mpmath.exp(v) / den) for v in xs]
        y = ag.softmax(ag.tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(y, ref, rtol=1e-15, atol=0)

    def test_masked_entries_are_zero(self):
        y = ag.softmax(ag.tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, True, False]])).data
        assert y[0, 2] == 0.0
        assert math.isclose(y[0].sum(), 1.0, rel_tol=0, abs_tol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-500, 500))
    def test_shift_invariance(self, xs, c):
        x = np.array(xs)
        a = ag.softmax(ag.tensor(x)).data
        b = ag.softmax(ag.tensor(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestGradCheck:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(0)
        p = {"a": _param(rng, (4, 3)), "b": _param(rng, (5,))}
        err = ag.grad_check(lambda q: ag.sum(ag.square(q["a"])) + ag.sum(ag.square(q["b"])), p)
        assert err < 1e-8

    def test_non_finite_raises(self):
        p = {"x": ag.Tensor(np.array([1000.0]), requires_grad=True)}

        def f(q):
            return ag.Tensor(np.exp(q["x"].data * 1000.0).sum())

        with np.errstate(over="ignore"), pytest.raises(ag.GradCheckError):
            ag.grad_check(f, p)

    def test_detects_wrong_gradient(self):
        def bad_square(x):
            return ag._make(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

        rng = np.random.default_rng(0)
        p = {"x": _param(rng, (6,))}
        assert ag.grad_check(lambda q: ag.sum(bad_square(q["x"])), p) > 1e-2

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            ag.grad_check(lambda q: ag.sum(q["x"]), {"x": ag.tensor([1.0], requires_grad=True)}, eps=0)

    def test_subsampling_is_deterministic(self):
        rng = np.random.default_rng(1)
        p = {"x": _param(rng, (50,))}
        f = lambda q: ag.sum(ag.tanh(q["x"]))  # noqa: E731
        assert ag.grad_check(f, p, max_entries=7, seed=3) == ag.grad_check(f, p, max_entries=7, seed=3)


class TestTape:
    def test_replay_visits_each_op_once_in_reverse(self):
        x = ag.tensor([1.0, 2.0], requires_grad=True)
        with ag.GradTape() as tape:
            y = ag.tanh(x)
            z = ag.mul(y, y)
            loss = ag.sum(z)
        tape.backward(loss)
        assert len(tape) == 3
        assert tape.replay_order == [2, 1, 0]

    def test_accumulates_shared_use(self):
        x = ag.tensor([3.0], requires_grad=True)
        with ag.GradTape() as tape:
            loss = ag.sum(x * x + x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_tape_no_record(self):
        x = ag.tensor([1.0], requires_grad=True)
        y = ag.tanh(x)
        with ag.GradTape() as tape:
            pass
        assert len(tape) == 0 and y.requires_grad

    def test_non_scalar_backward_needs_grad(self):
        x = ag.tensor([1.0, 2.0], requires_grad=True)
        with ag.GradTape() as tape:
            y = ag.tanh(x)
        with pytest.raises(ag.DimensionError):
            tape.backward(y)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            a = _param(rng, (4, 4))
            with ag.GradTape() as tape:
                loss = ag.sum(ag.gelu(a @ a))
            tape.backward(loss)
            return loss.data.tobytes(), a.grad.tobytes()

        assert run() == run()


class TestPrecision:
    def test_modes(self):
        assert ag.tensor([1.0]).dtype == np.float64
        with ag.precision("benchmark"):
            assert ag.tensor([1.0]).dtype == np.float32
        assert ag.tensor([1.0]).dtype == np.float64

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            with ag.precision("half"):
                pass
