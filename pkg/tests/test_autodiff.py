"""Tensor-core tests: forward oracles and gradient checks.

The matmul and conv oracles below are written as plain nested loops on
purpose.  They share no code with the production paths, so agreement is
evidence rather than tautology.
"""

import weakref

import numpy as np
import pytest

from striprestore import autodiff as ad
from striprestore.verification import finite_diff_check, reference_layer_norm


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def loop_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int):
    """Nested-loop cross-correlation with ceil(H/s) zero padding."""
    h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    ho = -(-h // stride)
    wo = -(-wd // stride)
    pad_h = max((ho - 1) * stride + k - h, 0)
    pad_w = max((wo - 1) * stride + k - wd, 0)
    pt, pl = pad_h // 2, pad_w // 2
    out = np.zeros((ho, wo, cout))
    for oi in range(ho):
        for oj in range(wo):
            for ki in range(k):
                for kj in range(k):
                    ii = oi * stride + ki - pt
                    jj = oj * stride + kj - pl
                    if 0 <= ii < h and 0 <= jj < wd:
                        for ci in range(cin):
                            for co in range(cout):
                                out[oi, oj, co] += x[ii, jj, ci] * w[ki, kj, ci, co]
    if b is not None:
        out += b
    return out


def single_op_check(build, arrays, seed=0, tol=1e-4, h=1e-5):
    """Finite-difference check of one op with a fixed random cotangent."""
    weight_cache = {}

    def loss_and_grads(params):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        out = build(tape, leaves)
        if "w" not in weight_cache:
            weight_cache["w"] = np.random.default_rng(seed + 1).normal(
                size=out.shape
            )
        loss = ad.mean_all(ad.mul(out, tape.leaf(weight_cache["w"])))
        loss.backward()
        return float(loss.value), {k: leaves[k].grad for k in params}

    report = finite_diff_check(
        loss_and_grads, arrays, h=h, rng=np.random.default_rng(seed)
    )
    assert report["max_rel_err"] <= tol, report
    return report


class TestMatmul:
    def test_identity(self):
        tape = ad.Tape()
        b = np.arange(12.0).reshape(3, 4)
        out = ad.matmul(tape.leaf(np.eye(3)), tape.leaf(b))
        np.testing.assert_array_equal(out.value, b)

    def test_hand_case(self):
        tape = ad.Tape()
        a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        b = tape.leaf([[1.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).value, [[3.0], [7.0]])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        tape = ad.Tape()
        got = ad.matmul(tape.leaf(a), tape.leaf(b)).value
        assert np.max(np.abs(got - loop_matmul(a, b))) <= 1e-12

    def test_batched_against_loop_oracle(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 5, 2))
        tape = ad.Tape()
        got = ad.matmul(tape.leaf(a), tape.leaf(b)).value
        for i in range(2):
            for j in range(3):
                want = loop_matmul(a[i, j], b[i, j])
                assert np.max(np.abs(got[i, j] - want)) <= 1e-12

    def test_shape_mismatch_reports_both_shapes(self):
        tape = ad.Tape()
        a = tape.leaf(np.zeros((2, 3)))
        b = tape.leaf(np.zeros((4, 2)))
        with pytest.raises(ValueError, match=r"2, 3.*4, 2"):
            ad.matmul(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
        single_op_check(lambda t, p: ad.matmul(p["a"], p["b"]), arrays, seed=seed)


class TestSoftmax:
    def test_symmetry(self):
        tape = ad.Tape()
        out = ad.softmax_last_axis(tape.leaf([0.0, 0.0]))
        np.testing.assert_allclose(out.value, [0.5, 0.5], atol=1e-15)

    def test_ln2_case(self):
        tape = ad.Tape()
        out = ad.softmax_last_axis(tape.leaf([np.log(2.0), 0.0]))
        np.testing.assert_allclose(out.value, [2 / 3, 1 / 3], atol=1e-15)

    def test_rows_sum_to_one_and_nonnegative(self):
        rng = np.random.default_rng(0)
        tape = ad.Tape()
        out = ad.softmax_last_axis(tape.leaf(rng.normal(size=(4, 6), scale=5)))
        assert np.all(out.value >= 0)
        np.testing.assert_allclose(out.value.sum(axis=-1), 1.0, atol=1e-12)

    def test_rejects_non_finite(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.softmax_last_axis(tape.leaf([np.inf, 0.0]))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {"x": rng.normal(size=(3, 5))}
        single_op_check(lambda t, p: ad.softmax_last_axis(p["x"]), arrays, seed=seed)


class TestLayerNorm:
    def test_constant_channels_go_to_zero(self):
        tape = ad.Tape()
        x = tape.leaf(np.full((2, 3, 4), 7.0))
        g = tape.leaf(np.ones(4))
        b = tape.leaf(np.zeros(4))
        out = ad.layer_norm_channels(x, g, b)
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_already_normalized(self):
        tape = ad.Tape()
        x = tape.leaf(np.array([[1.0, -1.0]]))
        g = tape.leaf(np.ones(2))
        b = tape.leaf(np.zeros(2))
        out = ad.layer_norm_channels(x, g, b, eps=1e-12)
        np.testing.assert_allclose(out.value, [[1.0, -1.0]], atol=1e-6)

    def test_moments(self):
        rng = np.random.default_rng(1)
        tape = ad.Tape()
        x = tape.leaf(rng.normal(size=(5, 4, 8), scale=3))
        out = ad.layer_norm_channels(
            x, tape.leaf(np.ones(8)), tape.leaf(np.zeros(8))
        )
        assert np.max(np.abs(out.value.mean(axis=-1))) <= 1e-10
        np.testing.assert_allclose(out.value.var(axis=-1), 1.0, atol=1e-4)

    def test_matches_reference(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 6))
        gamma = rng.normal(size=6)
        beta = rng.normal(size=6)
        tape = ad.Tape()
        out = ad.layer_norm_channels(
            tape.leaf(x), tape.leaf(gamma), tape.leaf(beta)
        )
        np.testing.assert_allclose(
            out.value, reference_layer_norm(x, gamma, beta), atol=1e-12
        )

    def test_rejects_nonpositive_eps(self):
        tape = ad.Tape()
        args = (tape.leaf(np.ones((2, 2))), tape.leaf(np.ones(2)), tape.leaf(np.zeros(2)))
        with pytest.raises(ValueError):
            ad.layer_norm_channels(*args, eps=0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {
            "x": rng.normal(size=(2, 3, 4)),
            "g": rng.normal(size=4),
            "b": rng.normal(size=4),
        }
        single_op_check(
            lambda t, p: ad.layer_norm_channels(p["x"], p["g"], p["b"]),
            arrays,
            seed=seed,
        )


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 6, 3))
        w = np.eye(3).reshape(1, 1, 3, 3)
        tape = ad.Tape()
        out = ad.conv2d(tape.leaf(x), tape.leaf(w))
        np.testing.assert_array_equal(out.value, x)

    def test_uniform_kernel_on_constant_image(self):
        x = np.full((6, 6, 1), 0.4)
        w = np.full((3, 3, 1, 1), 1.0 / 9.0)
        tape = ad.Tape()
        out = ad.conv2d(tape.leaf(x), tape.leaf(w))
        np.testing.assert_allclose(out.value[1:-1, 1:-1], 0.4, atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("extent", [(6, 6), (5, 7)])
    def test_against_loop_oracle(self, stride, extent):
        rng = np.random.default_rng(4)
        h, wd = extent
        x = rng.normal(size=(h, wd, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        tape = ad.Tape()
        got = ad.conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), stride=stride)
        want = loop_conv2d(x, w, b, stride)
        assert got.value.shape == want.shape
        assert np.max(np.abs(got.value - want)) <= 1e-12

    def test_stride2_shape_is_ceil(self):
        tape = ad.Tape()
        x = tape.leaf(np.zeros((5, 7, 1)))
        w = tape.leaf(np.zeros((3, 3, 1, 2)))
        assert ad.conv2d(x, w, stride=2).value.shape == (3, 4, 2)

    def test_frame_axis_matches_per_frame_application(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 4, 5, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        tape = ad.Tape()
        stacked = ad.conv2d(tape.leaf(x), tape.leaf(w)).value
        for t in range(3):
            tape2 = ad.Tape()
            single = ad.conv2d(tape2.leaf(x[t]), tape2.leaf(w)).value
            np.testing.assert_array_equal(stacked[t], single)

    def test_rejects_even_kernel(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.conv2d(tape.leaf(np.zeros((4, 4, 1))), tape.leaf(np.zeros((2, 2, 1, 1))))

    def test_rejects_channel_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.conv2d(tape.leaf(np.zeros((4, 4, 2))), tape.leaf(np.zeros((3, 3, 3, 1))))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {
            "x": rng.normal(size=(4, 5, 2)),
            "w": rng.normal(size=(3, 3, 2, 3)),
            "b": rng.normal(size=3),
        }
        stride = 1 + seed % 2
        single_op_check(
            lambda t, p: ad.conv2d(p["x"], p["w"], p["b"], stride=stride),
            arrays,
            seed=seed,
        )


class TestFft:
    def test_constant_image_dc_only(self):
        c = 0.7
        spec = ad.fft2(np.full((4, 6), c))
        assert abs(spec[0, 0] - c * 24) <= 1e-9
        spec[0, 0] = 0
        assert np.max(np.abs(spec)) <= 1e-9

    def test_single_tone_row_signal(self):
        w = 8
        u0 = 2
        x = np.cos(2 * np.pi * u0 * np.arange(w) / w)[None, :].repeat(3, axis=0)
        spec = ad.fft2(x)
        mag = np.abs(spec)
        hot = {(0, u0), (0, w - u0)}
        for i in range(3):
            for j in range(w):
                if (i, j) in hot:
                    assert mag[i, j] > 1.0
                else:
                    assert mag[i, j] <= 1e-9

    def test_parseval(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 7))
        spec = ad.fft2(x)
        lhs = np.sum(x**2)
        rhs = np.sum(np.abs(spec) ** 2) / (5 * 7)
        assert abs(lhs - rhs) / abs(lhs) <= 1e-9

    def test_linearity(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=(4, 4))
        assert np.max(np.abs(ad.fft2(a + b) - (ad.fft2(a) + ad.fft2(b)))) <= 1e-9

    def test_stack_matches_plain_transform(self):
        # the op transforms the last two axes, so channels go in front
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 3, 4, 5))
        tape = ad.Tape()
        out = ad.fft2_stack(tape.leaf(x)).value
        for t in range(2):
            for c in range(3):
                spec = ad.fft2(x[t, c])
                np.testing.assert_allclose(out[t, c, :, :, 0], spec.real, atol=1e-9)
                np.testing.assert_allclose(out[t, c, :, :, 1], spec.imag, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_stack_gradients(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {"x": rng.normal(size=(2, 3, 4, 2))}
        single_op_check(lambda t, p: ad.fft2_stack(p["x"]), arrays, seed=seed)


class TestElementwiseOps:
    def offset_away_from_kinks(self, x):
        return x + 0.5 * np.sign(x) + (x == 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_bundle(self, seed):
        rng = np.random.default_rng(seed)

        cases = {
            "add": (lambda t, p: ad.add(p["a"], p["b"]), ["a", "b"]),
            "sub": (lambda t, p: ad.sub(p["a"], p["b"]), ["a", "b"]),
            "mul": (lambda t, p: ad.mul(p["a"], p["b"]), ["a", "b"]),
            "neg": (lambda t, p: ad.neg(p["a"]), ["a"]),
            "scale": (lambda t, p: ad.scale(p["a"], 1.7), ["a"]),
            "shift": (lambda t, p: ad.shift(p["a"], -0.3), ["a"]),
            "gelu": (lambda t, p: ad.gelu(p["a"]), ["a"]),
            "sqrt": (lambda t, p: ad.sqrt(ad.shift(ad.mul(p["a"], p["a"]), 0.5)), ["a"]),
            "transpose": (lambda t, p: ad.transpose(p["a"], (1, 0, 2)), ["a"]),
            "reshape": (lambda t, p: ad.reshape(p["a"], (6, 2)), ["a"]),
            "sum_axes": (lambda t, p: ad.sum_axes(p["a"], (0,)), ["a"]),
            "upsample": (lambda t, p: ad.upsample_nearest2(p["a"]), ["a"]),
        }
        for name, (build, names) in cases.items():
            if name == "upsample":
                arrays = {"a": rng.normal(size=(2, 3, 4, 2))}
            else:
                arrays = {n: rng.normal(size=(2, 3, 2)) for n in names}
            single_op_check(build, arrays, seed=seed)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_kinked_ops(self, seed):
        rng = np.random.default_rng(seed)
        a = self.offset_away_from_kinks(rng.normal(size=(3, 4)))
        single_op_check(lambda t, p: ad.absolute(p["a"]), {"a": a.copy()}, seed=seed)
        single_op_check(
            lambda t, p: ad.leaky_relu(p["a"]), {"a": a.copy()}, seed=seed
        )

    def test_gelu_values(self):
        tape = ad.Tape()
        out = ad.gelu(tape.leaf([0.0, 100.0, -100.0]))
        np.testing.assert_allclose(out.value, [0.0, 100.0, 0.0], atol=1e-12)

    def test_leaky_relu_values(self):
        tape = ad.Tape()
        out = ad.leaky_relu(tape.leaf([2.0, -2.0]), slope=0.1)
        np.testing.assert_allclose(out.value, [2.0, -0.2], atol=1e-15)

    def test_add_shape_mismatch(self):
        tape = ad.Tape()
        with pytest.raises(ValueError):
            ad.add(tape.leaf(np.zeros((2, 3))), tape.leaf(np.zeros((3, 2))))

    def test_add_bias_sums_gradient_over_leading_axes(self):
        tape = ad.Tape()
        x = tape.leaf(np.zeros((4, 3)))
        b = tape.leaf(np.array([1.0, 2.0, 3.0]))
        out = ad.add_bias(x, b)
        np.testing.assert_array_equal(out.value, np.tile([1.0, 2.0, 3.0], (4, 1)))
        ad.sum_axes(out, (0, 1)).backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_upsample_values(self):
        tape = ad.Tape()
        x = np.arange(4.0).reshape(1, 2, 2, 1)
        out = ad.upsample_nearest2(tape.leaf(x))
        want = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        np.testing.assert_array_equal(out.value[0, :, :, 0], want)

    def test_reshape_round_trip_identity(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 5))
        tape = ad.Tape()
        t = ad.reshape(ad.reshape(tape.leaf(x), (12, 5)), (3, 4, 5))
        np.testing.assert_array_equal(t.value, x)

    def test_narrow_concat_round_trip(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 6))
        tape = ad.Tape()
        leaf = tape.leaf(x)
        left = ad.narrow(leaf, 1, 0, 3)
        right = ad.narrow(leaf, 1, 3, 3)
        back = ad.concat([left, right], axis=1)
        np.testing.assert_array_equal(back.value, x)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_narrow_concat(self, seed):
        rng = np.random.default_rng(seed)
        arrays = {"a": rng.normal(size=(3, 6)), "b": rng.normal(size=(3, 2))}

        def build(tape, p):
            left = ad.narrow(p["a"], 1, 0, 2)
            return ad.concat([left, p["b"]], axis=1)

        single_op_check(build, arrays, seed=seed)


class TestBackward:
    def test_sum_of_squares(self):
        tape = ad.Tape()
        x = tape.leaf([1.0, -2.0, 3.0])
        loss = ad.sum_axes(ad.mul(x, x), (0,))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_composite_graph_finite_differences(self):
        rng = np.random.default_rng(13)
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 4))}

        def build(tape, p):
            return ad.softmax_last_axis(ad.matmul(p["a"], p["b"]))

        report = single_op_check(build, arrays, seed=13, tol=1e-6)
        assert report["max_rel_err"] <= 1e-6

    def test_unreached_node_has_zero_grad(self):
        tape = ad.Tape()
        x = tape.leaf([1.0, 2.0])
        orphan = tape.leaf([5.0])
        ad.sum_axes(ad.mul(x, x), (0,)).backward()
        np.testing.assert_array_equal(orphan.grad, [0.0])

    def test_rejects_non_scalar_root(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ValueError):
            ad.mul(x, x).backward()

    def test_rejects_cross_tape_operands(self):
        t1, t2 = ad.Tape(), ad.Tape()
        with pytest.raises(ValueError):
            ad.add(t1.leaf([1.0]), t2.leaf([1.0]))

    def test_grad_accumulates_across_reuse(self):
        tape = ad.Tape()
        x = tape.leaf([3.0])
        y = ad.add(ad.mul(x, x), x)
        ad.sum_axes(y, (0,)).backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_second_backward_on_same_tape_rejected(self):
        tape = ad.Tape()
        x = tape.leaf([3.0])
        loss = ad.sum_axes(ad.mul(x, x), (0,))
        loss.backward()
        np.testing.assert_allclose(x.grad, [6.0])
        with pytest.raises(ValueError):
            loss.backward()

    def test_backward_releases_captured_intermediates(self):
        # pullback closures hold the forward intermediates; the reverse
        # sweep must drop them as it goes, or a training loop's memory sits
        # at many step-graphs waiting for gc instead of one
        tape = ad.Tape()
        x = tape.leaf(np.eye(8))
        y = ad.matmul(x, x)  # y.value is captured by the next pullback
        z = ad.matmul(y, y)
        seen = weakref.ref(y.value)
        ad.mean_all(z).backward()
        del y
        assert seen() is None, "backward kept a forward intermediate alive"
