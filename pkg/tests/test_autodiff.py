import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evfuse import autodiff as ad
from evfuse.autodiff import (
    ContractError,
    DimensionError,
    GradientTape,
    NumericalError,
    Tensor,
)


def test_tensor_stores_contiguous_float64():
    t = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)[:, ::-1])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == 6


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_computed(self):
        # [[1,2]] x [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))
        assert "(2, 3)" in str(exc.value) and "(4, 3)" in str(exc.value)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = Tensor(rng.uniform(-1, 1, (3, 4)))
            b = Tensor(rng.uniform(-1, 1, (4, 5)))
            c = Tensor(rng.uniform(-1, 1, (5, 2)))
            left = ad.matmul(ad.matmul(a, b), c).data
            right = ad.matmul(a, ad.matmul(b, c)).data
            np.testing.assert_allclose(left, right, atol=1e-9)

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(-1, 1, (2, 3, 4))
        b = rng.uniform(-1, 1, (2, 4, 5))
        out = ad.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b)


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), rtol=1e-15)

    def test_no_overflow_on_large_inputs(self):
        out = ad.softmax(Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_against_high_precision_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        x = [1.0, 2.0, 3.0]
        denom = sum(mpmath.e**v for v in x)
        expected = np.array([float(mpmath.e**v / denom) for v in x])
        out = ad.softmax(Tensor(x))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @given(
        st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=8)
    )
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, values):
        out = ad.softmax(Tensor(values))
        assert abs(out.data.sum() - 1.0) <= 1e-12


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = ad.layer_norm(
            Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))
        )
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)

    def test_two_point_closed_form(self):
        # mean 2, population var 1 -> (x - 2)/sqrt(1 + eps) ~ [-1, 1]
        out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)

    def test_zero_gamma_broadcasts_beta(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-2, 2, (4, 5)))
        beta = Tensor(rng.uniform(-1, 1, 5))
        out = ad.layer_norm(x, Tensor(np.zeros(5)), beta)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data, (4, 5)))


class TestConv1d:
    def test_identity_kernel_exact(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-1, 1, (5, 3)))
        for mode in ("causal", "same"):
            out = ad.conv1d(x, Tensor(np.ones((1, 3))), mode=mode)
            np.testing.assert_array_equal(out.data, x.data)

    def test_causal_direct_summation(self):
        # x = [1,2,3], kernel [1,1]: y[t] = x[t-1] + x[t] with x[-1] = 0
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        out = ad.conv1d(x, Tensor(np.ones((2, 1))), mode="causal")
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 3.0, 5.0])

    def test_zero_kernel(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        out = ad.conv1d(x, Tensor(np.zeros((2, 1))), mode="causal")
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 0.0, 0.0])

    def test_same_mode_kernel_longer_than_sequence(self):
        x = Tensor(np.ones((2, 1)))
        out = ad.conv1d(x, Tensor(np.ones((5, 1))), mode="same")
        assert out.shape == (2, 1)


class TestReverseMode:
    def test_quadratic_gradient_is_exact(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        err = ad.grad_check(lambda t: ad.tsum(ad.power(t, 2)), x)
        assert err < 1e-8

    @pytest.mark.parametrize(
        "name,builder",
        [
            ("matmul", lambda x: ad.tsum(ad.matmul(x, ad.Tensor(_W3)))),
            ("softmax", lambda x: ad.tsum(ad.mul(ad.softmax(x, axis=-1), ad.Tensor(_W)))),
            ("sigmoid", lambda x: ad.tsum(ad.mul(ad.sigmoid(x), ad.Tensor(_W)))),
            ("silu", lambda x: ad.tsum(ad.mul(ad.silu(x), ad.Tensor(_W)))),
            ("softplus", lambda x: ad.tsum(ad.mul(ad.softplus(x), ad.Tensor(_W)))),
            ("exp", lambda x: ad.tsum(ad.mul(ad.exp(x), ad.Tensor(_W)))),
            ("mean", lambda x: ad.tsum(ad.mul(ad.tmean(x, axis=0, keepdims=True), ad.Tensor(_W[:1])))),
            ("layer_norm", lambda x: ad.tsum(ad.mul(ad.layer_norm(x, ad.Tensor(_G), ad.Tensor(_B)), ad.Tensor(_W)))),
            ("conv1d_causal", lambda x: ad.tsum(ad.mul(ad.conv1d(x, ad.Tensor(_K), "causal"), ad.Tensor(_W)))),
            ("conv1d_same", lambda x: ad.tsum(ad.mul(ad.conv1d(x, ad.Tensor(_K), "same"), ad.Tensor(_W)))),
            ("flip", lambda x: ad.tsum(ad.mul(ad.flip(x, 0), ad.Tensor(_W)))),
            ("div", lambda x: ad.tsum(ad.div(ad.Tensor(_W), ad.add(ad.power(x, 2), 1.0)))),
        ],
    )
    def test_primitive_matches_finite_differences(self, name, builder):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        assert ad.grad_check(builder, x) < 1e-4

    def test_conv1d_kernel_gradient(self):
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.uniform(-1, 1, (6, 2)))
        w = ad.Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        err = ad.grad_check(
            lambda k: ad.tsum(ad.power(ad.conv1d(x, k, "causal"), 2)), w
        )
        assert err < 1e-4

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(-1, 1, (5, 5, 2)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 3, 2, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)

        def head(t):
            return ad.tsum(ad.power(ad.conv2d(t, w, b, stride=2, padding=1), 2))

        assert ad.grad_check(head, x) < 1e-4
        err_w = ad.grad_check(
            lambda k: ad.tsum(ad.power(ad.conv2d(x, k, b, stride=2, padding=1), 2)), w
        )
        assert err_w < 1e-4

    def test_cross_entropy_gradient(self):
        rng = np.random.default_rng(8)
        logits = Tensor(rng.uniform(-1, 1, (4, 7)), requires_grad=True)
        labels = np.array([0, 3, 6, 2])
        err = ad.grad_check(lambda t: ad.cross_entropy(t, labels), logits)
        assert err < 1e-6

    def test_gradients_flow_through_structure_ops(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)

        def head(t):
            a = ad.slice_axis(t, 0, 0, 2)
            b = ad.index_axis(t, 0, 2)
            c = ad.concat([a, ad.reshape(b, (1, 4))], axis=0)
            d = ad.stack([c, ad.transpose(ad.transpose(c))], axis=0)
            return ad.tmean(ad.power(d, 2))

        assert ad.grad_check(head, x) < 1e-6

    def test_tape_consumed_once(self):
        x = Tensor([1.0], requires_grad=True)
        with GradientTape() as tape:
            y = ad.tsum(ad.power(x, 2))
        tape.gradients(y, [x])
        with pytest.raises(ContractError):
            tape.gradients(y, [x])

    def test_gradients_for_every_leaf(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        unused = Tensor([9.0], requires_grad=True)
        with GradientTape() as tape:
            y = ad.tsum(ad.mul(a, b))
        ga, gb, gu = tape.gradients(y, [a, b, unused])
        np.testing.assert_array_equal(ga, b.data)
        np.testing.assert_array_equal(gb, a.data)
        np.testing.assert_array_equal(gu, np.zeros(1))

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with GradientTape() as tape:
            pass
        ad.tsum(ad.power(x, 2))  # outside the with-block
        assert len(tape) == 0

    def test_non_scalar_target_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.grad_check(lambda t: ad.power(t, 2), x)


def test_finite_check_mode_names_offending_op():
    ad.set_finite_check(True)
    try:
        with pytest.raises(NumericalError) as exc:
            ad.log(Tensor([-1.0]))
        assert "log" in str(exc.value)
    finally:
        ad.set_finite_check(False)
    # disabled by default: same computation just yields nan
    assert np.isnan(ad.log(Tensor([-1.0])).data[0])


_W = np.random.default_rng(100).uniform(-1, 1, (4, 3))
_W3 = np.random.default_rng(101).uniform(-1, 1, (3, 3))
_G = np.random.default_rng(102).uniform(0.5, 1.5, 3)
_B = np.random.default_rng(103).uniform(-0.5, 0.5, 3)
_K = np.random.default_rng(104).uniform(-1, 1, (3, 3))
