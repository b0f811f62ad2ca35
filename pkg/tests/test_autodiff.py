import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compad import autodiff as ad
from compad.autodiff import (
    DomainError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    const,
    grad_check,
    param,
)


# ---------------------------------------------------------------------------
# brute-force oracles, independent of the engine
# ---------------------------------------------------------------------------

def matmul_oracle(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv1d_oracle(x, kernels, stride, padding):
    c_in, length = x.shape
    c_out, _, k = kernels.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding : padding + length] = x
    l_out = (length + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for pos in range(l_out):
            acc = 0.0
            for ci in range(c_in):
                for t in range(k):
                    acc += kernels[o, ci, t] * xp[ci, pos * stride + t]
            out[o, pos] = acc
    return out


def softmax_oracle(scores):
    e = [np.exp(s) for s in scores]
    z = sum(e)
    return np.array([v / z for v in e])


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

class TestMatmul:
    def test_identity(self):
        a = const(np.eye(2))
        b = const([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_projector_row_selection(self):
        a = const([[1.0, 0.0], [0.0, 0.0]])
        b = const([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_random_vs_triple_loop_exact(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        got = ad.matmul(const(a), const(b)).data
        assert np.array_equal(got, matmul_oracle(a, b))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(const(np.zeros((2, 3))), const(np.zeros((2, 3))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(4)
        a = param(rng.uniform(-1, 1, (3, 4)))
        b = param(rng.uniform(-1, 1, (4, 2)))
        with Tape() as tape:
            c = ad.matmul(a, b)
            loss = ad.sum_all(c)
        tape.backward(loss)
        g = np.ones((3, 2))
        assert np.allclose(a.grad, g @ b.data.T)
        assert np.allclose(b.grad, a.data.T @ g)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

class TestLeakyRelu:
    def test_zero(self):
        assert ad.leaky_relu(const([0.0]), 0.2).data[0] == 0.0

    def test_negative(self):
        assert ad.leaky_relu(const([-1.0]), 0.2).data[0] == pytest.approx(-0.2)

    def test_positive_passthrough(self):
        assert ad.leaky_relu(const([3.5]), 0.7).data[0] == 3.5

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            ad.leaky_relu(const([np.nan]), 0.2)

    def test_bad_slope(self):
        for slope in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(DomainError):
                ad.leaky_relu(const([1.0]), slope)


class TestSigmoid:
    def test_zero_is_half(self):
        assert ad.sigmoid(const([0.0])).data[0] == 0.5

    def test_saturation_no_overflow(self):
        y = ad.sigmoid(const([1000.0])).data[0]
        assert abs(y - 1.0) < 1e-12
        y = ad.sigmoid(const([-1000.0])).data[0]
        assert 0.0 <= y < 1e-12

    def test_symmetry_identity(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-50, 50, 64)
        total = ad.sigmoid(const(x)).data + ad.sigmoid(const(-x)).data
        assert np.allclose(total, 1.0, atol=1e-15)


class TestMaskedSoftmax:
    def test_equal_scores(self):
        out = ad.masked_softmax(const([3.0, 3.0, 3.0, 3.0]), [True] * 4)
        assert np.allclose(out.data, 0.25, atol=1e-15)

    def test_single_entry(self):
        out = ad.masked_softmax(const([5.0, -2.0, 0.1]), [False, True, False])
        assert out.data[1] == 1.0
        assert out.data[0] == 0.0 and out.data[2] == 0.0

    def test_vs_direct_formula(self):
        out = ad.masked_softmax(const([1.0, 2.0, 3.0]), [True, True, True])
        assert np.allclose(out.data, softmax_oracle([1.0, 2.0, 3.0]), atol=1e-12)

    def test_all_false_mask(self):
        with pytest.raises(DomainError):
            ad.masked_softmax(const([1.0, 2.0]), [False, False])

    @given(
        scores=st.lists(st.floats(-30, 30), min_size=1, max_size=12),
        data=st.data(),
    )
    @settings(max_examples=200, deadline=None)
    def test_invariants(self, scores, data):
        mask = data.draw(
            st.lists(st.booleans(), min_size=len(scores), max_size=len(scores)).filter(any)
        )
        out = ad.masked_softmax(const(scores), mask).data
        masked_in = out[np.asarray(mask)]
        assert abs(masked_in.sum() - 1.0) < 1e-12
        assert (out[~np.asarray(mask)] == 0.0).all()


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

class TestConv1d:
    def test_identity_kernel(self):
        x = np.array([[1.0, -2.0, 3.0, 0.5]])
        out = ad.conv1d(const(x), const(np.ones((1, 1, 1))), 1, 0)
        assert np.array_equal(out.data, x)

    def test_hand_sums(self):
        x = const([[1.0, 2.0, 3.0, 4.0]])
        k = const(np.ones((1, 1, 2)))
        assert np.array_equal(ad.conv1d(x, k, 1, 0).data, [[3.0, 5.0, 7.0]])

    def test_random_vs_nested_loop_exact(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-2, 2, (2, 9))
        k = rng.uniform(-2, 2, (3, 2, 3))
        got = ad.conv1d(const(x), const(k), 1, 0).data
        assert np.array_equal(got, conv1d_oracle(x, k, 1, 0))

    def test_all_small_shapes_exact(self):
        rng = np.random.default_rng(7)
        for length in range(1, 17):
            for k in range(1, 6):
                for stride in (1, 2):
                    for padding in (0, 1, k // 2):
                        if length + 2 * padding < k:
                            continue
                        x = rng.uniform(-2, 2, (2, length))
                        w = rng.uniform(-2, 2, (2, 2, k))
                        got = ad.conv1d(const(x), const(w), stride, padding).data
                        assert np.array_equal(got, conv1d_oracle(x, w, stride, padding))

    def test_kernel_longer_than_padded_input(self):
        with pytest.raises(ShapeError):
            ad.conv1d(const(np.zeros((1, 2))), const(np.zeros((1, 1, 5))), 1, 0)

    def test_output_length(self):
        out = ad.conv1d(const(np.zeros((1, 10))), const(np.zeros((1, 1, 3))), 2, 1)
        assert out.shape == (1, (10 + 2 - 3) // 2 + 1)


# ---------------------------------------------------------------------------
# backward / tape
# ---------------------------------------------------------------------------

class TestBackward:
    def test_identity_gradient(self):
        x = param([2.0])
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        assert np.array_equal(x.grad, [1.0])

    def test_linear_map(self):
        x = param([1.0, -2.0, 0.5])
        with Tape() as tape:
            loss = ad.sum_all(ad.scale(x, 2.0))
        tape.backward(loss)
        assert np.array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_fanout_accumulates(self):
        x = param([3.0])
        with Tape() as tape:
            y = ad.add(x, x)
            loss = ad.sum_all(y)
        tape.backward(loss)
        assert np.array_equal(x.grad, [2.0])

    def test_non_scalar_loss_rejected(self):
        x = param([1.0, 2.0])
        with Tape() as tape:
            y = ad.scale(x, 1.0)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_no_tape_is_pure_forward(self):
        x = param([1.0])
        y = ad.scale(x, 3.0)
        assert y.data[0] == 3.0
        assert x.grad is None

    def test_determinism(self):
        rng = np.random.default_rng(8)
        a_data = rng.uniform(-1, 1, (4, 4))
        b_data = rng.uniform(-1, 1, (4, 4))

        def run():
            a, b = param(a_data.copy()), param(b_data.copy())
            with Tape() as tape:
                out = ad.sigmoid(ad.matmul(a, b))
                loss = ad.sum_all(out)
            tape.backward(loss)
            return out.data.copy(), a.grad.copy(), b.grad.copy()

        first, second = run(), run()
        for x, y in zip(first, second):
            assert np.array_equal(x, y)


class TestElementwiseGradients:
    """Central finite differences against every op's analytic JVP."""

    @pytest.mark.parametrize(
        "name,f",
        [
            ("leaky_relu", lambda t: ad.leaky_relu(t, 0.2)),
            ("sigmoid", ad.sigmoid),
            ("softplus", ad.softplus),
            ("neg", ad.neg),
            ("scale", lambda t: ad.scale(t, -1.7)),
            ("clamp", lambda t: ad.clamp(t, -1.5, 1.5)),
        ],
    )
    def test_unary_ops(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        p = param(rng.uniform(-2, 2, 7) + 0.013)  # avoid kinks at 0/bounds
        w = const(rng.uniform(-1, 1, 7))
        err = grad_check(lambda: ad.sum_all(ad.mul(f(p), w)), [p])
        assert err < 1e-4

    def test_log(self):
        rng = np.random.default_rng(11)
        p = param(rng.uniform(0.5, 2, 5))
        err = grad_check(lambda: ad.sum_all(ad.log(p)), [p])
        assert err < 1e-6

    def test_masked_softmax_grad(self):
        rng = np.random.default_rng(12)
        p = param(rng.uniform(-2, 2, 6))
        mask = [True, False, True, True, False, True]
        w = const(rng.uniform(-1, 1, 6))
        err = grad_check(lambda: ad.sum_all(ad.mul(ad.masked_softmax(p, mask), w)), [p])
        assert err < 1e-6

    def test_conv1d_grads(self):
        rng = np.random.default_rng(13)
        x = param(rng.uniform(-2, 2, (2, 8)))
        k = param(rng.uniform(-2, 2, (3, 2, 3)))
        w = const(rng.uniform(-1, 1, (3, 8)))
        err = grad_check(
            lambda: ad.sum_all(ad.mul(ad.conv1d(x, k, 1, 1), w)), [x, k]
        )
        assert err < 1e-4

    def test_matmul_broadcast_add_mul(self):
        rng = np.random.default_rng(14)
        a = param(rng.uniform(-2, 2, (3, 4)))
        b = param(rng.uniform(-2, 2, (4, 2)))
        bias = param(rng.uniform(-1, 1, (3, 1)))
        w = const(rng.uniform(-1, 1, (3, 2)))
        err = grad_check(
            lambda: ad.sum_all(ad.mul(ad.add(ad.matmul(a, b), bias), w)), [a, b, bias]
        )
        assert err < 1e-4

    def test_gat_attention_grad(self):
        rng = np.random.default_rng(15)
        z = param(rng.uniform(-1, 1, (4, 3)))
        attn = param(rng.uniform(-1, 1, 6))
        mask = np.array(
            [
                [True, True, True, True],
                [True, True, False, False],
                [True, False, True, False],
                [True, False, False, True],
            ]
        )
        w = const(rng.uniform(-1, 1, (4, 4)))
        err = grad_check(
            lambda: ad.sum_all(ad.mul(ad.gat_attention(z, attn, mask, 0.2), w)),
            [z, attn],
        )
        assert err < 1e-4

    def test_pad_rows_transpose_concat(self):
        rng = np.random.default_rng(16)
        rows = [param(rng.uniform(-1, 1, (1, 3))) for _ in range(2)]
        w = const(rng.uniform(-1, 1, (3, 8)))

        def f():
            stacked = ad.pad_rows(rows, 4)
            t = ad.transpose(stacked)
            joined = ad.concat_cols([t, t])
            return ad.sum_all(ad.mul(joined, w))

        err = grad_check(f, rows)
        assert err < 1e-4


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------

class TestGradCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(17)
        theta = param(rng.uniform(-2, 2, 6))
        err = grad_check(lambda: ad.scale(ad.sum_all(ad.mul(theta, theta)), 0.5), [theta])
        assert err < 1e-9

    def test_sigmoid_composition(self):
        rng = np.random.default_rng(18)
        theta = param(rng.uniform(-2, 2, (3, 3)))
        x = const(rng.uniform(-1, 1, (3, 2)))
        w = const(rng.uniform(-1, 1, (3, 2)))

        def f():
            h = ad.sigmoid(ad.matmul(theta, x))
            return ad.sum_all(ad.mul(ad.sigmoid(ad.matmul(theta, h)), w))

        assert grad_check(f, [theta]) < 1e-6

    def test_eps_domain(self):
        theta = param([1.0])
        for eps in (1e-8, 1e-3, 1.0):
            with pytest.raises(DomainError):
                grad_check(lambda: ad.sum_all(theta), [theta], eps=eps)

    def test_non_finite_output(self):
        theta = param([1.0])
        with pytest.raises(NumericError):
            grad_check(lambda: ad.sum_all(ad.scale(theta, np.inf)), [theta])


class TestTensorInvariants:
    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.data.size == 6

    def test_grad_same_shape_after_backward(self):
        x = param(np.zeros((2, 3)))
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        assert x.grad.shape == x.shape

    @given(st.lists(st.floats(-2, 2), min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_forward_finite_on_finite_inputs(self, values):
        x = const(values)
        for f in (lambda t: ad.sigmoid(t), lambda t: ad.softplus(t), lambda t: ad.leaky_relu(t, 0.2)):
            assert np.isfinite(f(x).data).all()
