import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrseg import autodiff as ad
from corrseg.errors import AutodiffError, NumericsError, ShapeError
from corrseg.rng import SplitMix64

TOL = 1e-6


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return SplitMix64(seed).uniform_array(shape, lo, hi)


class TestElementwise:
    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_binary_fd(self, op):
        b = ad.Tensor(rand((3, 4), seed=1, lo=0.5, hi=2.0))
        x = ad.Tensor(rand((3, 4), seed=2))
        err = ad.check_gradients(lambda t: op(t, b).sum(), x)
        assert err < TOL

    @pytest.mark.parametrize("op", [ad.sin, ad.exp, ad.relu, ad.sigmoid])
    def test_unary_fd(self, op):
        x = ad.Tensor(rand((5, 3), seed=3) + 0.05)  # keep relu off its kink
        err = ad.check_gradients(lambda t: op(t).sum(), x)
        assert err < TOL

    def test_log_fd(self):
        x = ad.Tensor(rand((4, 4), seed=4, lo=0.2, hi=3.0))
        err = ad.check_gradients(lambda t: ad.log(t).sum(), x)
        assert err < TOL

    def test_broadcast_grad_sums_over_expanded_axes(self):
        x = ad.Tensor(rand((1, 4), seed=5))
        other = ad.Tensor(rand((3, 4), seed=6))
        err = ad.check_gradients(lambda t: ad.mul(t, other).sum(), x)
        assert err < TOL

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))

    def test_python_scalar_operands(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = (2.0 * x + 1.0) / 4.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [0.5, 0.5])


class TestReductionsAndSoftmax:
    def test_sum_axis_keepdims_fd(self):
        x = ad.Tensor(rand((2, 3, 4), seed=7))
        err = ad.check_gradients(
            lambda t: ad.mul(ad.tsum(t, axis=1, keepdims=True), 1.5).sum(), x
        )
        assert err < TOL

    def test_mean_matches_numpy(self):
        x = ad.Tensor(rand((3, 5), seed=8))
        np.testing.assert_allclose(x.mean(axis=0).data, x.data.mean(axis=0))

    def test_softmax_rows_sum_to_one(self):
        x = ad.Tensor(rand((6, 9), seed=9, lo=-30, hi=30))
        s = ad.softmax(x, axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_stable_for_large_logits(self):
        x = ad.Tensor(np.array([[1000.0, 1000.0, -1000.0]]))
        s = ad.softmax(x).data
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s[0, :2], 0.5, atol=1e-12)

    def test_softmax_fd(self):
        x = ad.Tensor(rand((4, 5), seed=10))
        w = ad.Tensor(rand((4, 5), seed=11))
        err = ad.check_gradients(lambda t: ad.mul(ad.softmax(t, axis=1), w).sum(), x)
        assert err < TOL

    def test_log_softmax_fd(self):
        x = ad.Tensor(rand((3, 7), seed=12))
        w = ad.Tensor(rand((3, 7), seed=13))
        err = ad.check_gradients(lambda t: ad.mul(ad.log_softmax(t, axis=-1), w).sum(), x)
        assert err < TOL


class TestStructural:
    def test_reshape_transpose_fd(self):
        x = ad.Tensor(rand((2, 3, 4), seed=14))
        w = ad.Tensor(rand((4, 3, 2), seed=15))

        def prog(t):
            return ad.mul(ad.transpose(t, (2, 1, 0)), w).sum()

        assert ad.check_gradients(prog, x) < TOL

    def test_getitem_strided_slice_fd(self):
        x = ad.Tensor(rand((6, 8), seed=16))
        err = ad.check_gradients(lambda t: ad.mul(t[::2, 1::3], 2.0).sum(), x)
        assert err < TOL

    def test_getitem_scatters_zero_elsewhere(self):
        x = ad.Tensor(rand((4, 4), seed=17), requires_grad=True)
        x[1:3, 1:3].sum().backward()
        expected = np.zeros((4, 4))
        expected[1:3, 1:3] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_concat_fd(self):
        x = ad.Tensor(rand((3, 2), seed=18))
        other = ad.Tensor(rand((3, 5), seed=19))
        w = ad.Tensor(rand((3, 7), seed=20))
        err = ad.check_gradients(
            lambda t: ad.mul(ad.concat([t, other], axis=1), w).sum(), x
        )
        assert err < TOL

    def test_matmul_2d_fd(self):
        x = ad.Tensor(rand((3, 4), seed=21))
        b = ad.Tensor(rand((4, 5), seed=22))
        assert ad.check_gradients(lambda t: (t @ b).sum(), x) < TOL
        assert ad.check_gradients(lambda t: (x.detach() @ t).sum(), b) < TOL

    def test_matmul_batched_fd(self):
        x = ad.Tensor(rand((2, 3, 4), seed=23))
        b = ad.Tensor(rand((2, 4, 5), seed=24))
        assert ad.check_gradients(lambda t: (t @ b).sum(), x) < TOL
        assert ad.check_gradients(lambda t: (x.detach() @ t).sum(), b) < TOL

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))
        with pytest.raises(ShapeError):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3, 4))))


class TestConv2d:
    def test_matches_direct_convolution(self):
        x = rand((5, 6, 3), seed=25)
        k = rand((3, 3, 3, 2), seed=26)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        want = np.zeros((5, 6, 2))
        for i in range(5):
            for j in range(6):
                patch = xp[i:i + 3, j:j + 3, :]
                want[i, j] = np.tensordot(patch, k, axes=3)
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_1x1_is_per_pixel_linear_map(self):
        x = rand((4, 4, 3), seed=27)
        k = rand((1, 1, 3, 5), seed=28)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data
        np.testing.assert_allclose(out, x @ k[0, 0], atol=1e-12)

    @pytest.mark.parametrize("ksize", [1, 3])
    def test_fd_both_arguments(self, ksize):
        x = ad.Tensor(rand((4, 5, 2), seed=29))
        k = ad.Tensor(rand((ksize, ksize, 2, 3), seed=30))
        assert ad.check_gradients(lambda t: ad.conv2d(t, k.detach()).sum(), x) < TOL
        assert ad.check_gradients(lambda t: ad.conv2d(x.detach(), t).sum(), k) < TOL

    def test_rejects_bad_kernels(self):
        x = ad.Tensor(np.zeros((4, 4, 3)))
        with pytest.raises(ShapeError, match="1x1 or 3x3"):
            ad.conv2d(x, ad.Tensor(np.zeros((5, 5, 3, 2))))
        with pytest.raises(ShapeError, match="channel mismatch"):
            ad.conv2d(x, ad.Tensor(np.zeros((3, 3, 7, 2))))


class TestBackwardSemantics:
    def test_backward_rejects_nonscalar(self):
        x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(AutodiffError, match="scalar"):
            (x * 2.0).backward()

    def test_second_backward_rejected_then_reset_allows(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        loss = x.sum()
        loss.backward()
        with pytest.raises(AutodiffError, match="already ran"):
            loss.backward()
        loss.reset_backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_grad_accumulates_across_uses(self):
        x = ad.Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_deep_chain_no_recursion_error(self):
        x = ad.Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_no_grad_blocks_graph(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert y._grad_fn is None and not y.requires_grad

    def test_float32_dtype_respected(self):
        x = ad.Tensor(np.ones(3), dtype=np.float32, requires_grad=True)
        y = (x * 2.0).sum()
        assert y.dtype == np.float32
        y.backward()
        assert x.grad.dtype == np.float32


class TestCheckGradients:
    def test_reports_for_known_analytic_function(self):
        x = ad.Tensor(rand((3, 3), seed=31))
        err = ad.check_gradients(lambda t: ad.sin(t).sum(), x)
        assert err < 1e-8

    def test_nonfinite_raises_with_coordinate(self):
        x = ad.Tensor(np.array([1.0, 0.0]))
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(NumericsError, match="coordinate"):
                ad.check_gradients(lambda t: ad.log(t).sum(), x)

    def test_rejects_nonpositive_step(self):
        x = ad.Tensor(np.ones(2))
        with pytest.raises(ValueError):
            ad.check_gradients(lambda t: t.sum(), x, h=0.0)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(1, 6),
    w=st.integers(1, 6),
    c=st.integers(1, 4),
    seed=st.integers(0, 2**31),
)
def test_composite_program_grad_property(h, w, c, seed):
    x = ad.Tensor(SplitMix64(seed).uniform_array((h, w, c), -1.5, 1.5))
    m = ad.Tensor(SplitMix64(seed + 1).uniform_array((c, c), -1.0, 1.0))

    def prog(t):
        z = ad.relu(t) + ad.sin(t)
        z = ad.reshape(z, (h * w, c)) @ m
        return ad.mul(ad.softmax(z, axis=-1), 0.7).sum() + ad.sigmoid(z).sum()

    assert ad.check_gradients(prog, x) < 1e-5


def test_sgd_momentum_and_weight_decay_update_rule():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.SGD({"p": p}, lr=0.1, momentum=0.9, weight_decay=0.01)
    w0 = p.data.copy()
    p.grad = np.array([0.5, 0.5])
    opt.step()
    buf1 = np.array([0.5, 0.5]) + 0.01 * w0
    np.testing.assert_allclose(p.data, w0 - 0.1 * buf1)
    w1 = p.data.copy()
    p.grad = np.array([0.0, 0.0])
    opt.step()
    buf2 = 0.9 * buf1 + 0.01 * w1
    np.testing.assert_allclose(p.data, w1 - 0.1 * buf2)


def test_init_parameter_is_deterministic_and_bounded():
    a = ad.init_parameter((4, 4), fan_in=16, rng=SplitMix64(7))
    b = ad.init_parameter((4, 4), fan_in=16, rng=SplitMix64(7))
    np.testing.assert_array_equal(a.data, b.data)
    assert np.all(np.abs(a.data) <= 0.25) and a.requires_grad
