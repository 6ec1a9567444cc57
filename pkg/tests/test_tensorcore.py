import numpy as np
import pytest

from oracles import conv2d_loops, numerical_grad, rel_err
from wscnn import tensorcore as tc
from wscnn.errors import DataError, NumericalError


class TestConv2d:
    def test_scaling_kernel(self):
        x = tc.Tensor(np.ones((1, 1, 3, 3)))
        k = tc.Tensor(np.full((1, 1, 1, 1), 2.0))
        out = tc.conv2d(x, k, tc.Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_center_kernel(self, rng):
        x = rng.normal(size=(2, 1, 6, 7))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = tc.conv2d(x, k, pad=1)
        np.testing.assert_array_equal(out.data, x)

    def test_matches_loop_reference(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = tc.conv2d(x, k, b, stride=2)
        np.testing.assert_allclose(out.data, conv2d_loops(x, k, b, 2, 0), atol=1e-6)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_loop_reference_shapes(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 9))
        k = rng.normal(size=(4, 3, 3, 2))
        out = tc.conv2d(x, k, None, stride=stride, pad=pad)
        ref = conv2d_loops(x, k, None, stride, pad)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, atol=1e-9)

    def test_channel_mismatch_names_dimension(self, rng):
        with pytest.raises(DataError, match="channel"):
            tc.conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)))

    def test_kernel_too_large(self, rng):
        with pytest.raises(DataError, match="height"):
            tc.conv2d(rng.normal(size=(1, 1, 2, 8)), rng.normal(size=(1, 1, 3, 3)))

    def test_rank_checked(self):
        with pytest.raises(DataError, match="rank"):
            tc.conv2d(np.zeros((3, 3)), np.zeros((1, 1, 1, 1)))


class TestDeconv2d:
    def test_ones_kernel_spreads_value(self):
        out = tc.deconv2d(np.full((1, 1, 1, 1), 3.5), np.ones((1, 1, 2, 2)), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.5))

    def test_zero_input(self, rng):
        out = tc.deconv2d(np.zeros((2, 3, 4, 5)), rng.normal(size=(3, 2, 2, 2)), stride=2)
        assert out.shape == (2, 2, 8, 10)
        assert not out.data.any()

    @pytest.mark.parametrize("kernel,pad", [(2, 0), (4, 1)])
    def test_adjoint_identity(self, rng, kernel, pad):
        # deconv with kernels W is the adjoint of the conv that maps K -> C channels.
        w = rng.normal(size=(3, 2, kernel, kernel))
        x = rng.normal(size=(2, 3, 4, 5))
        y = rng.normal(size=(2, 2, 8, 10))
        lhs = np.sum(tc.deconv2d(x, w, stride=2, pad=pad).data * y)
        rhs = np.sum(x * tc.conv2d(y, w, stride=2, pad=pad).data)
        assert abs(lhs - rhs) <= 1e-5 * max(1.0, abs(lhs))

    def test_conv_adjoint_helper(self, rng):
        k = rng.normal(size=(4, 3, 3, 3))
        x = rng.normal(size=(1, 3, 7, 6))
        y = rng.normal(size=(1, 4, 4, 3))
        ax = tc.conv2d(x, k, stride=2, pad=1).data
        aty = tc.conv2d_adjoint(y, k, 2, 1, (7, 6))
        assert abs(np.sum(ax * y) - np.sum(x * aty)) < 1e-9

    def test_bad_geometry(self, rng):
        with pytest.raises(DataError, match="upsampling"):
            tc.deconv2d(rng.normal(size=(1, 1, 3, 3)), rng.normal(size=(1, 1, 3, 3)), stride=2)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(tc.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self, rng):
        assert not tc.relu(-np.abs(rng.normal(size=10)) - 0.1).data.any()

    def test_gradient_mask(self, rng):
        x0 = rng.normal(size=(4, 5))
        x0[np.abs(x0) < 1e-3] = 0.5
        x = tc.parameter(x0)
        w = rng.normal(size=x0.shape)
        tc.backward(tc.sum_all(_weighted(tc.relu(x), w)))
        num = numerical_grad(lambda: np.sum(np.maximum(x0, 0) * w), x0)
        np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)
        np.testing.assert_array_equal(x.grad != 0, x0 > 0)


def _weighted(t, w):
    """Elementwise product with a constant, so sum(...) probes every output entry."""
    return tc.Tensor(t.data * w, requires_grad=t.requires_grad, _parents=(t,),
                     _backward=lambda g: t._accumulate(g * w))


class TestMSE:
    def test_zero(self, rng):
        a = rng.normal(size=(3, 4))
        assert tc.mse_loss(a, a).data == 0.0

    def test_constant_offset(self, rng):
        a = rng.normal(size=(3, 4))
        np.testing.assert_allclose(tc.mse_loss(a + 0.25, a).data, 0.0625, rtol=1e-12)

    def test_summation_oracle(self, rng):
        a, b = rng.normal(size=(2, 7, 5))
        ref = sum((p - q) ** 2 for p, q in zip(a.ravel(), b.ravel())) / a.size
        assert abs(float(tc.mse_loss(a, b).data) - ref) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            tc.mse_loss(np.zeros(3), np.zeros(4))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = tc.parameter(rng.normal(size=(2, 3)))
        tc.backward(tc.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_non_scalar_rejected(self, rng):
        x = tc.parameter(rng.normal(size=(2, 3)))
        with pytest.raises(DataError, match="scalar"):
            tc.backward(tc.relu(x))

    def test_unused_parameter_gets_zero(self, rng):
        x = tc.parameter(rng.normal(size=(2, 3)))
        unused = tc.parameter(rng.normal(size=(4,)))
        tc.backward(tc.sum_all(x))
        np.testing.assert_array_equal(unused.grad, np.zeros(4))

    def test_conv_kernel_grad_finite_differences(self, rng):
        x0 = rng.normal(size=(2, 2, 5, 6))
        k0 = rng.normal(size=(3, 2, 3, 3))
        t0 = rng.normal(size=(2, 3, 5, 6))
        k = tc.parameter(k0)
        tc.backward(tc.mse_loss(tc.conv2d(x0, k, pad=1), t0))
        num = numerical_grad(lambda: float(tc.mse_loss(tc.conv2d(x0, k0, pad=1), t0).data), k0)
        assert rel_err(k.grad, num) < 1e-4

    def test_shared_subexpression_accumulates(self, rng):
        # loss = sum(relu(x) + relu(x)) through one shared node: grad = 2 * mask.
        x0 = rng.normal(size=(3, 3))
        x = tc.parameter(x0)
        r = tc.relu(x)
        tc.backward(tc.sum_all(tc.add(r, r)))
        np.testing.assert_array_equal(x.grad, 2.0 * (x0 > 0))

    def test_per_path_linearity(self, rng):
        x0 = rng.normal(size=(1, 2, 4, 4))
        k1, k2 = rng.normal(size=(2, 2, 2, 3, 3))
        def grad_of(paths):
            x = tc.parameter(x0)
            outs = [tc.conv2d(x, k, pad=1) for k in paths]
            total = outs[0]
            for o in outs[1:]:
                total = tc.add(total, o)
            tc.backward(tc.sum_all(total))
            return x.grad
        np.testing.assert_allclose(grad_of([k1, k2]), grad_of([k1]) + grad_of([k2]), atol=1e-12)

    def test_gradients_accumulate_across_calls(self, rng):
        x = tc.parameter(rng.normal(size=(3,)))
        tc.backward(tc.sum_all(x))
        tc.backward(tc.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, np.zeros(3))


GRADCHECK_CASES = {
    "conv2d_stride1": lambda x, k, b: tc.conv2d(x, k, b, stride=1, pad=1),
    "conv2d_stride2": lambda x, k, b: tc.conv2d(x, k, b, stride=2, pad=1),
}


class TestGradcheck:
    @pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
    def test_conv_all_inputs(self, rng, name):
        op = GRADCHECK_CASES[name]
        arrays = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        proj = rng.normal(size=op(*arrays).shape)
        params = [tc.parameter(a) for a in arrays]
        tc.backward(tc.sum_all(_weighted(op(*params), proj)))
        for p, a in zip(params, arrays):
            num = numerical_grad(lambda: float(np.sum(op(*arrays).data * proj)), a)
            assert rel_err(p.grad, num) < 1e-4

    def test_deconv_all_inputs(self, rng):
        arrays = [rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)]
        op = lambda x, k, b: tc.deconv2d(x, k, b, stride=2)
        proj = rng.normal(size=(2, 2, 6, 8))
        params = [tc.parameter(a) for a in arrays]
        tc.backward(tc.sum_all(_weighted(op(*params), proj)))
        for p, a in zip(params, arrays):
            num = numerical_grad(lambda: float(np.sum(op(*arrays).data * proj)), a)
            assert rel_err(p.grad, num) < 1e-4

    def test_crop(self, rng):
        a = rng.normal(size=(1, 1, 5, 6))
        proj = rng.normal(size=(1, 1, 3, 2))
        p = tc.parameter(a)
        tc.backward(tc.sum_all(_weighted(tc.crop2d(p, 1, 2, 3, 2), proj)))
        num = numerical_grad(lambda: float(np.sum(a[..., 1:4, 2:4] * proj)), a)
        np.testing.assert_allclose(p.grad, num, atol=1e-9)

    def test_float32_preserved(self, rng):
        x = tc.Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
        k = tc.parameter(rng.normal(size=(2, 2, 3, 3)).astype(np.float32))
        out = tc.relu(tc.conv2d(x, k, pad=1))
        assert out.dtype == np.float32
        tc.backward(tc.mse_loss(out, np.zeros(out.shape, np.float32)))
        assert k.grad.dtype == np.float32


class TestAdam:
    def test_first_step_magnitude(self):
        p = np.zeros(5)
        state = tc.AdamState.for_params([p], lr=1e-4)
        for g in (0.3, -7.0):
            p[:] = 0.0
            state = tc.AdamState.for_params([p], lr=1e-4)
            tc.adam_step([p], [np.full(5, g)], state)
            np.testing.assert_allclose(np.abs(p), 1e-4, rtol=1e-6)
            assert np.all(np.sign(p) == -np.sign(g))
        assert state.t == 1

    def test_zero_gradient_no_change(self, rng):
        p = rng.normal(size=(3, 3))
        before = p.copy()
        state = tc.AdamState.for_params([p])
        tc.adam_step([p], [np.zeros((3, 3))], state)
        np.testing.assert_array_equal(p, before)

    def test_quadratic_decreases(self):
        theta = np.array([1.0])
        state = tc.AdamState.for_params([theta], lr=1e-2)
        history = [abs(theta[0])]
        for _ in range(50):
            tc.adam_step([theta], [2.0 * theta], state)
            history.append(abs(theta[0]))
        assert all(b < a for a, b in zip(history, history[1:]))
        assert state.t == 50

    def test_non_finite_rejected_state_unchanged(self):
        p = np.ones(3)
        state = tc.AdamState.for_params([p])
        tc.adam_step([p], [np.ones(3)], state)
        snapshot = (state.t, state.m[0].copy(), state.v[0].copy(), p.copy())
        with pytest.raises(NumericalError):
            tc.adam_step([p], [np.array([1.0, np.nan, 1.0])], state)
        assert state.t == snapshot[0]
        np.testing.assert_array_equal(state.m[0], snapshot[1])
        np.testing.assert_array_equal(state.v[0], snapshot[2])
        np.testing.assert_array_equal(p, snapshot[3])

    def test_deterministic(self, rng):
        g = rng.normal(size=(10,))
        results = []
        for _ in range(2):
            p = np.ones(10)
            s = tc.AdamState.for_params([p])
            for _ in range(5):
                tc.adam_step([p], [g * p], s)
            results.append(p.copy())
        np.testing.assert_array_equal(results[0], results[1])

    def test_second_moment_nonnegative(self, rng):
        p = np.zeros(4)
        s = tc.AdamState.for_params([p])
        for _ in range(3):
            tc.adam_step([p], [rng.normal(size=4)], s)
        assert np.all(s.v[0] >= 0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a.w": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
                  "a.b": rng.normal(size=(2,)).astype(np.float32)}
        state = tc.AdamState.for_params(list(params.values()))
        tc.adam_step(list(params.values()), [np.ones_like(p) for p in params.values()], state)
        path = tmp_path / "ck.bin"
        tc.save_checkpoint(path, params, state)
        entries = tc.load_checkpoint(path)
        for name, arr in params.items():
            np.testing.assert_array_equal(entries[name], arr)
        restored = tc.adam_from_checkpoint(entries, params, 1e-4, 0.9, 0.999, 1e-8)
        assert restored.t == 1
        np.testing.assert_array_equal(restored.m[1], state.m[1])
        path2 = tmp_path / "ck2.bin"
        tc.save_checkpoint(path2, {k: entries[k] for k in params}, restored)
        assert path.read_bytes() == path2.read_bytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "ck.bin"
        tc.save_checkpoint(path, {"w": np.array([[1.0, 2.0]], dtype=np.float32)})
        blob = path.read_bytes()
        expected = (b"WSCKPT1\n" + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
                    + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.0, 2.0], "<f4").tobytes())
        assert blob == expected

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"nope")
        with pytest.raises(DataError):
            tc.load_checkpoint(path)
