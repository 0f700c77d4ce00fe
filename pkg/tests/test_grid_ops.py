import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ccflow import grid_ops as G
from ccflow.errors import ConfigError, ContractError, ShapeError

import gradcheck
import oracles

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestConv2d:
    def test_identity_kernel(self):
        x = T(np.arange(9).reshape(1, 1, 3, 3))
        assert torch.equal(G.conv2d(x, torch.ones(1, 1, 1, 1, dtype=torch.float64)), x)

    def test_constant_input_border_counts(self):
        out = G.conv2d(torch.full((1, 1, 5, 5), 2.0, dtype=torch.float64), torch.ones(1, 1, 3, 3, dtype=torch.float64))
        assert out[0, 0, 2, 2] == 18.0
        assert out[0, 0, 0, 0] == 8.0
        assert out[0, 0, 0, 2] == 12.0

    @pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 3), (2, 3)])
    def test_matches_loop_reference(self, stride, groups):
        rng = np.random.default_rng(stride * 10 + groups)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((6, 3 // groups, 3, 3))
        b = rng.standard_normal(6)
        got = G.conv2d(T(x), T(w), T(b), stride=stride, groups=groups).numpy()
        np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride, groups), atol=1e-10)

    def test_output_size_is_ceil(self):
        out = G.conv2d(torch.zeros(1, 1, 7, 5), torch.zeros(2, 1, 3, 3), stride=2)
        assert out.shape == (1, 2, 4, 3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            G.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            G.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2))

    def test_dtype_preserved(self):
        for dt in (torch.float32, torch.float64):
            assert G.conv2d(torch.zeros(1, 1, 4, 4, dtype=dt), torch.zeros(1, 1, 3, 3, dtype=dt)).dtype == dt

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([1, 2]))
    def test_linear_in_input(self, seed, a, b, stride):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 1, 2, 6, 6))
        w = T(rng.standard_normal((3, 2, 3, 3)))
        lhs = G.conv2d(T(a * x + b * y), w, stride=stride)
        rhs = a * G.conv2d(T(x), w, stride=stride) + b * G.conv2d(T(y), w, stride=stride)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestConvTranspose:
    def test_identity_kernel(self):
        x = T(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        w = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
        w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1.0
        assert torch.equal(G.conv_transpose2d(x, w), x)

    def test_block_expansion(self):
        x = T([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = G.conv_transpose2d(x, torch.ones(1, 1, 2, 2, dtype=torch.float64), stride=2)
        expect = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
        np.testing.assert_array_equal(out[0, 0].numpy(), expect)

    @pytest.mark.parametrize("stride,k", [(1, 3), (1, 5), (2, 3), (2, 2), (2, 4)])
    def test_matches_scatter_reference(self, stride, k):
        rng = np.random.default_rng(k + 7 * stride)
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        got = G.conv_transpose2d(T(x), T(w), T(b), stride=stride).numpy()
        assert got.shape == (2, 2, 4 * stride, 5 * stride)
        np.testing.assert_allclose(got, oracles.conv_transpose2d(x, w, b, stride), atol=1e-10)

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            G.conv_transpose2d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3), stride=3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            G.conv_transpose2d(torch.zeros(1, 2, 2, 2), torch.zeros(3, 1, 3, 3))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_input(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 1, 2, 3, 3))
        w = T(rng.standard_normal((2, 3, 3, 3)))
        lhs = G.conv_transpose2d(T(a * x + b * y), w, stride=2)
        rhs = a * G.conv_transpose2d(T(x), w, stride=2) + b * G.conv_transpose2d(T(y), w, stride=2)
        assert torch.allclose(lhs, rhs, atol=1e-6)


class TestGroupNorm:
    def test_zero_input(self):
        z = torch.zeros(2, 4, 3, 3, dtype=torch.float64)
        out = G.group_norm(z, 2, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        assert torch.equal(out, z)

    def test_zero_gamma_gives_beta(self):
        x = T(np.random.default_rng(1).standard_normal((2, 4, 3, 3)))
        beta = T([0.5, -1.0, 2.0, 3.0])
        out = G.group_norm(x, 2, torch.zeros(4, dtype=torch.float64), beta)
        assert torch.equal(out, beta.view(1, 4, 1, 1).expand_as(out))

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(2)
        x, g, b = rng.standard_normal((2, 6, 3, 4)), rng.standard_normal(6), rng.standard_normal(6)
        np.testing.assert_allclose(G.group_norm(T(x), 3, T(g), T(b)).numpy(),
                                   oracles.group_norm(x, 3, g, b), atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([1, 2, 4]), st.floats(1, 50))
    def test_normalized_statistics(self, seed, groups, scale):
        x = np.random.default_rng(seed).standard_normal((2, 4, 5, 5)) * scale + 3.0
        out = G.group_norm(T(x), groups, torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
        per = out.numpy().reshape(2, groups, -1)
        assert np.abs(per.mean(-1)).max() < 1e-6
        assert np.abs(per.var(-1) - 1).max() < 1e-4

    def test_indivisible_groups(self):
        with pytest.raises(ConfigError):
            G.group_norm(torch.zeros(1, 3, 2, 2), 2, torch.ones(3), torch.zeros(3))


class TestActivate:
    def test_zero(self):
        z = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
        assert G.activate(z, "sigmoid").item() == 0.5
        assert G.activate(z, "tanh").item() == 0.0
        assert G.activate(z, "leaky_relu").item() == 0.0

    def test_leaky_values(self):
        out = G.activate(T([[[[-1.0, 2.0]]]]), "leaky_relu")
        assert out.flatten().tolist() == [-0.01, 2.0]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=16))
    def test_ranges_and_odd_tanh(self, vals):
        x = T(vals).view(1, 1, 1, -1)
        assert torch.equal(G.activate(-x, "tanh"), -G.activate(x, "tanh"))
        s = G.activate(x, "sigmoid")
        assert bool(((s > 0) & (s < 1)).all())

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            G.activate(torch.zeros(1, 1, 1, 1), "relu6")


class TestWarp:
    def test_zero_flow_identity_bitwise(self):
        src = T(np.random.default_rng(3).integers(-5, 5, size=(2, 3, 6, 7)))
        assert torch.equal(G.bilinear_warp(src, torch.zeros(2, 2, 6, 7, dtype=torch.float64)), src)

    def test_integer_shift(self):
        src = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
        src[0, 0, 2, 3] = 1.0
        flow = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
        flow[:, 0] = 1.0
        out = G.bilinear_warp(src, flow)
        assert out[0, 0, 2, 2] == 1.0 and out.sum() == 1.0

    def test_half_shift_splits(self):
        src = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
        src[0, 0, 2, 2] = 1.0
        flow = torch.zeros(1, 2, 5, 5, dtype=torch.float64)
        flow[:, 0] = 0.5
        out = G.bilinear_warp(src, flow)[0, 0]
        assert out[2, 1] == 0.5 and out[2, 2] == 0.5 and out.sum() == 1.0

    def test_out_of_bounds_is_zero(self):
        flow = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
        flow[:, 1] = 10.0
        assert G.bilinear_warp(torch.ones(1, 1, 3, 3, dtype=torch.float64), flow).abs().sum() == 0

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(4)
        src, flow = rng.standard_normal((2, 2, 5, 6)), rng.uniform(-3, 3, (2, 2, 5, 6))
        np.testing.assert_allclose(G.bilinear_warp(T(src), T(flow)).numpy(),
                                   oracles.bilinear_warp(src, flow), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2))
    def test_linear_in_source(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 1, 1, 5, 5))
        flow = T(rng.uniform(-2, 2, (1, 2, 5, 5)))
        lhs = G.bilinear_warp(T(a * x + b * y), flow)
        rhs = a * G.bilinear_warp(T(x), flow) + b * G.bilinear_warp(T(y), flow)
        assert torch.allclose(lhs, rhs, atol=1e-9)

    def test_flow_channel_count(self):
        with pytest.raises(ShapeError):
            G.bilinear_warp(torch.zeros(1, 1, 3, 3), torch.zeros(1, 3, 3, 3))


class TestConcat:
    def test_single(self):
        x = torch.randn(2, 3, 4, 4)
        assert torch.equal(G.concat_channels([x]), x)

    def test_slices_recoverable(self):
        a, b = torch.randn(2, 2, 3, 3), torch.randn(2, 3, 3, 3)
        out = G.concat_channels([a, b])
        assert out.shape == (2, 5, 3, 3)
        assert torch.equal(out[:, :2], a) and torch.equal(out[:, 2:], b)

    def test_slice_gradients(self):
        a = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 1, 3, 3, dtype=torch.float64, requires_grad=True)
        G.backward((G.concat_channels([a, b]) * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64).view(1, 3, 1, 1)).sum())
        assert torch.equal(a.grad[:, 1], torch.full((1, 3, 3), 2.0, dtype=torch.float64))
        assert torch.equal(b.grad, torch.full((1, 1, 3, 3), 3.0, dtype=torch.float64))

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            G.concat_channels([torch.zeros(1, 1, 3, 3), torch.zeros(1, 1, 3, 4)])


class TestBackward:
    def test_sum_gives_ones(self):
        x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        G.backward(x.sum())
        assert torch.equal(x.grad, torch.ones_like(x))

    def test_square_gives_2x(self):
        x = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        G.backward((x * x).sum())
        assert torch.allclose(x.grad, 2 * x)

    def test_accumulates(self):
        x = torch.randn(3, dtype=torch.float64, requires_grad=True)
        G.backward(x.sum())
        G.backward(x.sum())
        assert torch.equal(x.grad, torch.full((3,), 2.0, dtype=torch.float64))

    def test_non_scalar_root(self):
        with pytest.raises(ContractError):
            G.backward(torch.randn(3, requires_grad=True) * 2)


@pytest.mark.parametrize("op", sorted(gradcheck.CASES))
def test_finite_difference_quick(op):
    assert gradcheck.run(op, shapes=3, seed=11) <= 1e-4


def test_determinism():
    rng = np.random.default_rng(5)
    x, w, f = T(rng.standard_normal((1, 2, 6, 6))), T(rng.standard_normal((2, 2, 3, 3))), T(rng.uniform(-1, 1, (1, 2, 6, 6)))
    run = lambda: G.bilinear_warp(G.group_norm(G.conv2d(x, w), 1, torch.ones(2, dtype=torch.float64),
                                               torch.zeros(2, dtype=torch.float64)), f)
    assert torch.equal(run(), run())
