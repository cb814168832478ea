import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from incongrufl import numerics as nx
from incongrufl.numerics import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(nx.matmul(eye, eye).data, eye)
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(nx.matmul(a, eye).data, a)

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(nx.matmul(a, b).data, triple_loop(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_reaches_both_inputs(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(nx.softmax_lastdim(np.zeros(2)).data, [0.5, 0.5])

    def test_masked_entry_is_exact_zero(self):
        out = nx.softmax_lastdim(np.array([5.0, -np.inf])).data
        assert out[0] == 1.0 and out[1] == 0.0

    def test_sentinel_entry_is_exact_zero(self):
        out = nx.softmax_lastdim(np.array([0.0, nx.MASK_SENTINEL, 1.0])).data
        assert out[1] == 0.0

    def test_exp_normalize_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x)
        np.testing.assert_allclose(nx.softmax_lastdim(x).data, e / e.sum(), atol=1e-12, rtol=0)

    def test_all_masked_row_rejected(self):
        with pytest.raises(nx.DegenerateInputError):
            nx.softmax_lastdim(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))

    @given(hnp.arrays(np.float64, (3, 5), elements=finite), finite)
    def test_probability_rows_and_shift_invariance(self, x, c):
        p = nx.softmax_lastdim(x).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(nx.softmax_lastdim(x + c).data, p, atol=1e-12)

    @given(hnp.arrays(np.bool_, (4, 6)), hnp.arrays(np.float64, (4, 6), elements=finite))
    def test_masked_positions_zero(self, mask, x):
        mask[:, 0] = False  # keep one attendable key per row
        p = nx.softmax_lastdim(np.where(mask, -np.inf, x)).data
        assert np.all(p[mask] == 0.0)


class TestLayerNorm:
    def test_constant_slice(self):
        out = nx.layer_norm(Tensor(np.full(3, 7.0)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_already_normalized(self):
        out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                            eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-10)

    def test_moments(self, rng):
        x = rng.standard_normal(16) * 3 + 2
        y = nx.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
        assert abs(y.mean()) < 1e-9
        assert abs(y.var() - 1) < 1e-6

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nx.layer_norm(Tensor(np.ones(2)), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0)


def naive_bce(z, y):
    s = 1 / (1 + np.exp(-z))
    return np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s)))


class TestBCE:
    def test_zero_logit(self):
        assert nx.bce_with_logits(np.zeros((1, 1)), np.ones((1, 1))).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_saturation_is_finite(self):
        v = nx.bce_with_logits(np.array([[50.0, -50.0]]), np.array([[1.0, 0.0]])).item()
        assert np.isfinite(v) and v < 1e-20

    def test_naive_oracle(self, rng):
        z = rng.uniform(-4, 4, (8, 14))
        y = (rng.random((8, 14)) < 0.3).astype(float)
        assert nx.bce_with_logits(z, y).item() == pytest.approx(naive_bce(z, y), abs=1e-9)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            nx.bce_with_logits(np.zeros((1, 2)), np.array([[0.5, 1.0]]))

    @given(hnp.arrays(np.float64, (2, 14), elements=st.floats(-30, 30)),
           hnp.arrays(np.bool_, (2, 14)))
    def test_label_flip_symmetry(self, z, y):
        y = y.astype(float)
        a = nx.bce_with_logits(z, y).item()
        b = nx.bce_with_logits(-z, 1 - y).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestKL:
    def test_identical_is_zero(self, rng):
        p = rng.standard_normal((4, 5))
        assert nx.kl_softmax(p, p).item() == 0.0

    def test_two_category_enumeration(self):
        p, q = np.array([[0.0, 0.0]]), np.array([[np.log(3), 0.0]])
        pp = np.array([0.5, 0.5])
        qq = np.array([0.75, 0.25])
        expected = sum(pp[i] * np.log(pp[i] / qq[i]) for i in range(2))
        assert nx.kl_softmax(p, q).item() == pytest.approx(expected, abs=1e-14)

    def test_nonnegative_monte_carlo(self, rng):
        p = rng.standard_normal((1000, 6)) * 3
        q = rng.standard_normal((1000, 6)) * 3
        for i in range(0, 1000, 100):
            assert nx.kl_softmax(p[i:i + 100], q[i:i + 100]).item() >= -1e-12
        per_pair = [nx.kl_softmax(p[i:i + 1], q[i:i + 1]).item() for i in range(1000)]
        assert min(per_pair) >= -1e-12


class TestCosine:
    @pytest.mark.parametrize("a,b,expected", [
        ([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 1.0),
        ([1.0, 2.0, 3.0], [-1.0, -2.0, -3.0], -1.0),
        ([1.0, 0.0], [0.0, 1.0], 0.0),
    ])
    def test_hand_values(self, a, b, expected):
        assert nx.cosine_sim(np.array(a), np.array(b)).item() == pytest.approx(expected, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(nx.DegenerateInputError):
            nx.cosine_sim(np.zeros(3), np.ones(3))

    @given(hnp.arrays(np.float64, 5, elements=st.floats(0.1, 5)), st.floats(0.01, 100))
    def test_scale_invariant(self, a, s):
        b = a[::-1].copy()
        assert nx.cosine_sim(a * s, b).item() == pytest.approx(nx.cosine_sim(a, b).item(), abs=1e-12)


class TestGradCheck:
    def test_sum_has_zero_error(self, rng):
        assert nx.grad_check(lambda x: x.sum(), rng.standard_normal(5)) < 1e-9

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            nx.grad_check(lambda x: x * 2, np.ones(3))

    def test_bce(self, rng):
        y = (rng.random((3, 14)) < 0.3).astype(float)
        assert nx.grad_check(lambda z: nx.bce_with_logits(z, y), rng.standard_normal((3, 14))) < 1e-4


# one entry per primitive: (name, function of a single tensor, input shape)
def _ops(rng):
    w = rng.standard_normal((4, 3))
    g, b = rng.standard_normal(4) + 1.5, rng.standard_normal(4)
    other = rng.standard_normal((3, 4))
    ids = np.array([[0, 2], [1, 1]])
    return [
        ("add", lambda x: (x + other).sum() * 1.0 + (x * x).sum(), (3, 4)),
        ("sub_div", lambda x: ((x - 2.0) / (x * x + 1.0)).sum(), (3, 4)),
        ("mul", lambda x: (x * other).sum(), (3, 4)),
        ("power", lambda x: nx.power(x * x + 1.0, 1.5).sum(), (3, 4)),
        ("exp", lambda x: nx.exp(x).sum(), (3, 4)),
        ("log", lambda x: nx.log(x * x + 0.5).sum(), (3, 4)),
        ("tanh", lambda x: nx.tanh(x).sum(), (3, 4)),
        ("relu", lambda x: (nx.relu(x) * other).sum(), (3, 4)),
        ("gelu", lambda x: nx.gelu(x).sum(), (3, 4)),
        ("mean", lambda x: (x.mean(axis=0) * np.arange(4)).sum(), (3, 4)),
        ("reshape_transpose", lambda x: (x.reshape(4, 3).transpose(1, 0) * other).sum(), (3, 4)),
        ("index", lambda x: (x[1:, ::2] * 3.0).sum() + (x[0] * x[0]).sum(), (3, 4)),
        ("concat", lambda x: (nx.concat([x, x * x], axis=0) * np.ones((6, 4))).sum(), (3, 4)),
        ("embedding", lambda x: (nx.embedding(x, ids) ** 2).sum(), (3, 4)),
        ("matmul", lambda x: ((x @ w) ** 2).sum(), (3, 4)),
        ("batched_matmul", lambda x: ((x @ nx.transpose(x, (0, 2, 1))) * 0.1).sum(), (2, 3, 4)),
        ("softmax", lambda x: (nx.softmax_lastdim(x) * other).sum(), (3, 4)),
        ("log_softmax", lambda x: (nx.log_softmax_lastdim(x) * other).sum(), (3, 4)),
        ("layer_norm", lambda x: (nx.layer_norm(x, Tensor(g), Tensor(b)) * other).sum(), (3, 4)),
        ("kl_q", lambda x: nx.kl_softmax(other, x), (3, 4)),
        ("kl_p", lambda x: nx.kl_softmax(x, other), (3, 4)),
        ("cosine", lambda x: nx.cosine_sim(x, other).sum(), (3, 4)),
        ("bce", lambda x: nx.bce_with_logits(x, (other > 0).astype(float)), (3, 4)),
    ]


@pytest.mark.parametrize("op_index", range(23))
def test_primitive_gradients(op_index):
    rng = np.random.default_rng(op_index)
    name, f, shape = _ops(rng)[op_index]
    worst = 0.0
    for trial in range(50):
        x = rng.standard_normal(shape)
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay away from the kink
        worst = max(worst, nx.grad_check(f, x, h=1e-6))
    assert worst < 1e-4, name


def test_ops_table_complete():
    assert len(_ops(np.random.default_rng(0))) == 23


class TestOptimizers:
    def test_adamw_zero_lr_is_noop(self, rng):
        p = {"w": rng.standard_normal(3)}
        before = p["w"].copy()
        nx.AdamW(p, lr=0.0).step({"w": np.ones(3)})
        np.testing.assert_array_equal(p["w"], before)

    def test_adamw_first_step(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = nx.AdamW(p, lr=0.1, weight_decay=0.01)
        opt.step({"w": np.array([0.5, -0.25])})
        # bias correction makes the first step lr * g / (|g| + eps), after decoupled decay
        g = np.array([0.5, -0.25])
        expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p["w"], expected, atol=1e-12)

    def test_sgd_step(self):
        p = {"w": np.array([1.0, 2.0])}
        nx.SGD(p, lr=0.5).step({"w": np.array([2.0, -2.0])})
        np.testing.assert_array_equal(p["w"], [0.0, 3.0])


class TestRng:
    def test_streams_reproducible(self):
        a = nx.rng_stream(7, "local", 2, 3).standard_normal(4)
        b = nx.rng_stream(7, "local", 2, 3).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("path", [("local", 2, 4), ("local", 3, 3), ("server", 2, 3)])
    def test_streams_distinct(self, path):
        a = nx.rng_stream(7, "local", 2, 3).standard_normal(4)
        assert not np.array_equal(a, nx.rng_stream(7, *path).standard_normal(4))


def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y + y
    z.sum().backward()
    np.testing.assert_allclose(x.grad, [12.0])
