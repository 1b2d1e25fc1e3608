import copy

import numpy as np
import pytest

from evfuse import autodiff as ad
from evfuse.autodiff import ContractError, DimensionError, Tensor
from evfuse.ssm import (
    coupled_ssm_forward,
    discretize,
    init_coupled_ssm,
    joint_opt,
    selective_scan,
    zero_joint_fusion,
)


# --- independent numpy oracles ---------------------------------------------


def unrolled_scan(x, a_bar, b_bar, c, d, reverse=False):
    """Hand-unrolled recurrence; no library calls."""
    if reverse:
        x, c = x[::-1], c[::-1]
        a_bar, b_bar = a_bar[::-1], b_bar[::-1]
    m, dim = x.shape
    n = c.shape[1]
    h = np.zeros((dim, n))
    ys = []
    for t in range(m):
        h = a_bar[t] * h + b_bar[t] * x[t][:, None]
        ys.append(h @ c[t] + d * x[t])
    y = np.stack(ys)
    return y[::-1] if reverse else y


def np_silu(v):
    return v / (1.0 + np.exp(-v))


def single_branch_bidirectional(tokens, branch):
    """Independently coded one-modality bidirectional selective SSM."""
    x = tokens @ branch.in_x_w.data + branch.in_x_b.data
    z = tokens @ branch.in_z_w.data + branch.in_z_b.data
    k = branch.conv_kernel.data
    kk, m = k.shape[0], x.shape[0]
    xp = np.concatenate([np.zeros((kk - 1, x.shape[1])), x], axis=0)
    xc = np_silu(sum(xp[j : j + m] * k[j] for j in range(kk)))
    total = np.zeros_like(xc)
    for name in ("fwd", "bwd"):
        dp = getattr(branch, name)
        seq = xc if name == "fwd" else xc[::-1]
        b = seq @ dp.b_proj.data
        c = seq @ dp.c_proj.data
        delta = np.logaddexp(0.0, seq @ dp.delta_w.data + dp.delta_b.data)
        a = -np.exp(dp.a_log.data)
        a_bar = np.exp(delta[:, :, None] * a)
        b_bar = delta[:, :, None] * b[:, None, :]
        y = unrolled_scan(seq, a_bar, b_bar, c, dp.d_skip.data)
        total += y if name == "fwd" else y[::-1]
    return (np_silu(z) * total) @ branch.out_w.data + branch.out_b.data


def random_scan_instance(rng, m, dim, n):
    x = rng.uniform(-1, 1, (m, dim))
    a_bar = rng.uniform(0.1, 0.95, (m, dim, n))
    b_bar = rng.uniform(-1, 1, (m, dim, n))
    c = rng.uniform(-1, 1, (m, n))
    d = rng.uniform(-1, 1, dim)
    return x, a_bar, b_bar, c, d


# --- joint_opt ---------------------------------------------------------------


class TestJointOpt:
    def test_zero_mix_is_residual_identity(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.uniform(-1, 1, (4, 3)))
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        out = joint_opt(a, b, Tensor(np.zeros((6, 3))), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_selecting_second_half_adds_streams(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(-1, 1, (4, 3)))
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        w = np.zeros((6, 3))
        w[3:, :] = np.eye(3)  # pick out the second (b) half of the concat
        out = joint_opt(a, b, Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, a.data + b.data, rtol=1e-12)

    def test_asymmetric_in_arguments(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.uniform(-1, 1, (4, 3)))
        b = Tensor(rng.uniform(-1, 1, (4, 3)))
        w = Tensor(rng.uniform(-1, 1, (6, 3)))
        bias = Tensor(rng.uniform(-1, 1, 3))
        ab = joint_opt(a, b, w, bias).data
        ba = joint_opt(b, a, w, bias).data
        assert not np.allclose(ab, ba)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            joint_opt(
                Tensor(np.zeros((4, 3))),
                Tensor(np.zeros((5, 3))),
                Tensor(np.zeros((6, 3))),
                Tensor(np.zeros(3)),
            )


# --- discretize --------------------------------------------------------------


class TestDiscretize:
    def test_small_delta_limit(self):
        delta = Tensor(np.full((2, 3), 1e-12))
        a = Tensor(-np.ones((3, 4)))
        b = Tensor(np.ones((2, 4)))
        a_bar, b_bar = discretize(delta, a, b)
        np.testing.assert_allclose(a_bar.data, np.ones((2, 3, 4)), atol=1e-11)
        np.testing.assert_allclose(b_bar.data, np.zeros((2, 3, 4)), atol=1e-11)

    def test_scalar_closed_form(self):
        a_bar, _ = discretize(
            Tensor([[0.5]]), Tensor([[-1.0]]), Tensor([[1.0]])
        )
        assert a_bar.data.ravel()[0] == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_softplus_of_zero_is_ln2(self):
        assert ad.softplus(Tensor([0.0])).data[0] == pytest.approx(np.log(2.0), rel=1e-15)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ContractError):
            discretize(Tensor([[0.0]]), Tensor([[-1.0]]), Tensor([[1.0]]))

    def test_euler_rule_differs(self):
        a_bar_exp, _ = discretize(Tensor([[0.5]]), Tensor([[-1.0]]), Tensor([[1.0]]))
        a_bar_eul, _ = discretize(
            Tensor([[0.5]]), Tensor([[-1.0]]), Tensor([[1.0]]), rule="euler"
        )
        assert a_bar_eul.data.ravel()[0] == pytest.approx(0.5)
        assert a_bar_exp.data.ravel()[0] != a_bar_eul.data.ravel()[0]


# --- selective_scan ----------------------------------------------------------


class TestSelectiveScan:
    def test_memoryless_when_a_bar_zero(self):
        rng = np.random.default_rng(3)
        x, _, b_bar, c, d = random_scan_instance(rng, 5, 3, 2)
        a_bar = np.zeros((5, 3, 2))
        y = selective_scan(Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d))
        expected = np.einsum("mdn,md,mn->md", b_bar, x, c) + d * x
        np.testing.assert_allclose(y.data, expected, atol=1e-12)

    def test_m3_scalar_instance_matches_hand_unrolled(self):
        rng = np.random.default_rng(4)
        x, a_bar, b_bar, c, d = random_scan_instance(rng, 3, 1, 1)
        y = selective_scan(Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d))
        np.testing.assert_allclose(
            y.data, unrolled_scan(x, a_bar, b_bar, c, d), atol=1e-12
        )

    @pytest.mark.parametrize("direction", ["forward", "backward"])
    def test_random_instances_match_oracle(self, direction):
        rng = np.random.default_rng(5)
        for _ in range(25):
            m = int(rng.integers(1, 9))
            dim = int(rng.integers(1, 5))
            n = int(rng.integers(1, 5))
            x, a_bar, b_bar, c, d = random_scan_instance(rng, m, dim, n)
            y = selective_scan(
                Tensor(x),
                Tensor(a_bar),
                Tensor(b_bar),
                Tensor(c),
                Tensor(d),
                direction,
            )
            expected = unrolled_scan(x, a_bar, b_bar, c, d, reverse=direction == "backward")
            np.testing.assert_allclose(y.data, expected, atol=1e-10)

    def test_blocked_evaluation_agrees(self):
        # evaluating the recurrence in two blocks with a state handoff must
        # match the single left-to-right pass
        rng = np.random.default_rng(6)
        x, a_bar, b_bar, c, d = random_scan_instance(rng, 6, 2, 3)
        full = selective_scan(
            Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d)
        ).data
        h = np.zeros((2, 3))
        blocked = []
        for lo, hi in ((0, 3), (3, 6)):
            for t in range(lo, hi):
                h = a_bar[t] * h + b_bar[t] * x[t][:, None]
                blocked.append(h @ c[t] + d * x[t])
        np.testing.assert_allclose(full, np.stack(blocked), atol=1e-10)

    def test_reversal_identity(self):
        # backward scan == reverse(forward scan of the reversed instance)
        rng = np.random.default_rng(7)
        x, a_bar, b_bar, c, d = random_scan_instance(rng, 5, 2, 2)
        bwd = selective_scan(
            Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d), "backward"
        ).data
        fwd_rev = selective_scan(
            Tensor(x[::-1].copy()),
            Tensor(a_bar[::-1].copy()),
            Tensor(b_bar[::-1].copy()),
            Tensor(c[::-1].copy()),
            Tensor(d),
            "forward",
        ).data[::-1]
        np.testing.assert_allclose(bwd, fwd_rev, atol=1e-12)

    def test_palindromic_memoryless_directions_agree(self):
        rng = np.random.default_rng(8)
        half = rng.uniform(-1, 1, (3, 2))
        x = np.concatenate([half, half[::-1]], axis=0)  # palindrome, M=6
        b_bar = np.tile(rng.uniform(-1, 1, (1, 2, 3)), (6, 1, 1))
        c = np.tile(rng.uniform(-1, 1, (1, 3)), (6, 1))
        d = rng.uniform(-1, 1, 2)
        a_bar = np.zeros((6, 2, 3))
        fwd = selective_scan(Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d))
        bwd = selective_scan(
            Tensor(x), Tensor(a_bar), Tensor(b_bar), Tensor(c), Tensor(d), "backward"
        )
        np.testing.assert_allclose(fwd.data, bwd.data, atol=1e-12)

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        x, a_bar, b_bar, c, d = random_scan_instance(rng, 4, 2, 2)
        with pytest.raises(DimensionError):
            selective_scan(
                Tensor(x), Tensor(a_bar[:3]), Tensor(b_bar), Tensor(c), Tensor(d)
            )


# --- the coupled block -------------------------------------------------------


class TestCoupledForward:
    def test_identical_inputs_mirrored_params_give_identical_outputs(self):
        rng = np.random.default_rng(10)
        params = init_coupled_ssm(e_dim=5, d=4, n=3, rng=rng)
        params.event = copy.deepcopy(params.rgb)
        tokens = Tensor(rng.uniform(-1, 1, (4, 5)))
        y_r, y_e = coupled_ssm_forward(tokens, tokens, params)
        np.testing.assert_allclose(y_r.data, y_e.data, atol=1e-10)

    def test_zeroed_fusion_reduces_to_independent_branches(self):
        rng = np.random.default_rng(11)
        params = init_coupled_ssm(e_dim=5, d=4, n=3, rng=rng)
        zero_joint_fusion(params)
        f = rng.uniform(-1, 1, (6, 5))
        e = rng.uniform(-1, 1, (6, 5))
        y_r, y_e = coupled_ssm_forward(Tensor(f), Tensor(e), params)
        np.testing.assert_allclose(
            y_r.data, single_branch_bidirectional(f, params.rgb), atol=1e-10
        )
        np.testing.assert_allclose(
            y_e.data, single_branch_bidirectional(e, params.event), atol=1e-10
        )

    def test_zero_inputs_zero_biases_give_zero_outputs(self):
        rng = np.random.default_rng(12)
        params = init_coupled_ssm(e_dim=4, d=3, n=2, rng=rng)
        for branch in (params.rgb, params.event):
            branch.in_x_b.data[:] = 0
            branch.in_z_b.data[:] = 0
            branch.out_b.data[:] = 0
            for dp in (branch.fwd, branch.bwd):
                dp.delta_b.data[:] = 0
                dp.fuse_b_b.data[:] = 0
                dp.fuse_c_b.data[:] = 0
        z = Tensor(np.zeros((3, 4)))
        y_r, y_e = coupled_ssm_forward(z, z, params)
        np.testing.assert_array_equal(y_r.data, np.zeros((3, 4)))
        np.testing.assert_array_equal(y_e.data, np.zeros((3, 4)))

    def test_output_shapes_with_batch_dims(self):
        rng = np.random.default_rng(13)
        params = init_coupled_ssm(e_dim=4, d=4, n=2, rng=rng)
        f = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
        e = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
        y_r, y_e = coupled_ssm_forward(f, e, params)
        assert y_r.shape == (2, 3, 4) and y_e.shape == (2, 3, 4)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(14)
        params = init_coupled_ssm(e_dim=4, d=3, n=2, rng=rng)
        f = rng.uniform(-1, 1, (3, 2, 4))
        e = rng.uniform(-1, 1, (3, 2, 4))
        y_r, y_e = coupled_ssm_forward(Tensor(f), Tensor(e), params)
        for i in range(3):
            yri, yei = coupled_ssm_forward(Tensor(f[i]), Tensor(e[i]), params)
            np.testing.assert_allclose(y_r.data[i], yri.data, atol=1e-12)
            np.testing.assert_allclose(y_e.data[i], yei.data, atol=1e-12)

    def test_modality_length_mismatch_rejected(self):
        rng = np.random.default_rng(15)
        params = init_coupled_ssm(e_dim=4, d=3, n=2, rng=rng)
        with pytest.raises(ContractError):
            coupled_ssm_forward(
                Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), params
            )

    def test_all_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(16)
        params = init_coupled_ssm(e_dim=4, d=3, n=2, rng=rng, conv_width=3)
        f = Tensor(rng.uniform(-0.5, 0.5, (3, 4)))
        e = Tensor(rng.uniform(-0.5, 0.5, (3, 4)))

        def head():
            y_r, y_e = coupled_ssm_forward(f, e, params)
            return ad.tmean(y_r) + ad.tmean(y_e)

        tensors = [t for _, t in params.named_params("ssm")]
        err = ad.grad_check_params(head, tensors, fraction=0.4, rng=rng)
        assert err < 1e-4

    def test_input_gradients_match_finite_differences(self):
        rng = np.random.default_rng(17)
        params = init_coupled_ssm(e_dim=4, d=3, n=2, rng=rng, conv_width=2)
        e = Tensor(rng.uniform(-0.5, 0.5, (3, 4)))

        def head(f):
            y_r, y_e = coupled_ssm_forward(f, e, params)
            return ad.tmean(y_r) + ad.tmean(y_e)

        f = Tensor(rng.uniform(-0.5, 0.5, (3, 4)), requires_grad=True)
        assert ad.grad_check(head, f) < 1e-4
