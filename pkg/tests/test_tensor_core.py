import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufinger import ShapeError, StateError, Tape, Tensor, backward, ops
from ufinger.ops import ConvSpec

from oracles import conv2d_loops, max_rel_error


def rng(seed=0):
    return np.random.default_rng(seed)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def grad_of(build, *leaves):
    """Run ``build()`` under a tape and return the leaves' gradients."""
    with Tape() as tape:
        loss = build()
    backward(loss, tape, leaves)
    return [leaf.grad for leaf in leaves]


def scalar(build):
    return float(build().data)


class TestConv2d:
    def test_ones_dilated_valid(self):
        x = T(np.ones((1, 1, 7, 7)))
        w = T(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, T([0.0]), ConvSpec(1, 1, 3, 3, "valid"))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    def test_dilated_shape(self):
        x = T(rng().normal(size=(1, 1, 13, 13)))
        w = T(rng(1).normal(size=(1, 1, 3, 3)))
        assert ops.conv2d(x, w, None, ConvSpec(1, 1, 3, 3)).shape == (1, 1, 7, 7)

    @pytest.mark.parametrize("k,d,mode", [(3, 1, "valid"), (3, 2, "valid"), (3, 3, "same"), (1, 1, "valid"), (3, 1, "same")])
    def test_matches_loop_oracle(self, k, d, mode):
        r = rng(2)
        x = r.normal(size=(2, 2, 8, 9))
        w = r.normal(size=(3, 2, k, k))
        b = r.normal(size=3)
        spec = ConvSpec(2, 3, k, d, mode)
        got = ops.conv2d(T(x), T(w), T(b), spec).data
        want = conv2d_loops(x, w, b, d, spec.padding)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_spec_example_random_valid(self):
        r = rng(3)
        x = r.normal(size=(1, 2, 5, 5))
        w = r.normal(size=(3, 2, 3, 3))
        got = ops.conv2d(T(x), T(w), T(np.zeros(3)), ConvSpec(2, 3, 3, 1)).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, None), rtol=0, atol=1e-12)

    def test_too_small_input(self):
        with pytest.raises(ShapeError):
            ops.conv2d(T(np.ones((1, 1, 6, 6))), T(np.ones((1, 1, 3, 3))), None, ConvSpec(1, 1, 3, 3))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(T(np.ones((1, 2, 6, 6))), T(np.ones((1, 1, 3, 3))), None, ConvSpec(1, 1, 3, 1))

    # 1 forces one output row per band; 270 gives two-row bands on this case
    @pytest.mark.parametrize("budget", [1, 270])
    def test_chunked_batch_matches_whole(self, monkeypatch, budget):
        r = rng(4)
        x = T(r.normal(size=(5, 3, 9, 9)), grad=True)
        w = T(r.normal(size=(4, 3, 3, 3)), grad=True)
        spec = ConvSpec(3, 4, 3, 2)
        full = ops.conv2d(x, w, None, spec).data
        gx, gw = grad_of(lambda: ops.sum_all(ops.conv2d(x, w, None, spec)), x, w)
        monkeypatch.setattr(ops, "_COLS_BUDGET", budget)
        np.testing.assert_allclose(ops.conv2d(x, w, None, spec).data, full, atol=1e-12)
        gx2, gw2 = grad_of(lambda: ops.sum_all(ops.conv2d(x, w, None, spec)), x, w)
        np.testing.assert_allclose(gx2, gx, atol=1e-12)
        np.testing.assert_allclose(gw2, gw, atol=1e-12)

    def test_concat_zero_block_is_conv_of_first(self):
        r = rng(5)
        a = T(r.normal(size=(1, 2, 6, 6)))
        zeros = T(np.zeros((1, 3, 6, 6)))
        w = r.normal(size=(2, 5, 3, 3))
        w[:, 2:] = 0.0
        cat = ops.conv2d(ops.concat_channels(a, zeros), T(w), None, ConvSpec(5, 2, 3, 1))
        alone = ops.conv2d(a, T(w[:, :2]), None, ConvSpec(2, 2, 3, 1))
        np.testing.assert_array_equal(cat.data, alone.data)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    d=st.sampled_from([1, 2, 3]),
    extra=st.integers(0, 4),
    k=st.sampled_from([1, 3]),
)
def test_padding_equivalence(seed, d, extra, k):
    r = rng(seed)
    size = d * (k - 1) + 1 + extra
    x = T(r.normal(size=(2, 2, size, size + 1)))
    w = T(r.normal(size=(3, 2, k, k)))
    b = T(r.normal(size=3))
    valid = ops.conv2d(x, w, b, ConvSpec(2, 3, k, d, "valid"))
    same = ops.conv2d(x, w, b, ConvSpec(2, 3, k, d, "same"))
    cropped = ops.center_crop(same, *valid.shape[2:])
    np.testing.assert_allclose(valid.data, cropped.data, rtol=0, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_conv_linearity(seed, alpha, beta):
    r = rng(seed)
    x, y = r.normal(size=(2, 1, 2, 8, 8))
    w = T(r.normal(size=(2, 2, 3, 3)))
    spec = ConvSpec(2, 2, 3, 2)
    lhs = ops.conv2d(T(alpha * x + beta * y), w, None, spec).data
    rhs = alpha * ops.conv2d(T(x), w, None, spec).data + beta * ops.conv2d(T(y), w, None, spec).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_dilation_matches_subsampled_lattice():
    # one output window: d=3 on a 7x7 input sees the lattice x[::3, ::3]
    r = rng(6)
    x = r.normal(size=(1, 2, 7, 7))
    w = T(r.normal(size=(1, 2, 3, 3)))
    dil = ops.conv2d(T(x), w, None, ConvSpec(2, 1, 3, 3)).data
    sub = ops.conv2d(T(np.ascontiguousarray(x[:, :, ::3, ::3])), w, None, ConvSpec(2, 1, 3, 1)).data
    assert dil.shape == sub.shape == (1, 1, 1, 1)
    np.testing.assert_allclose(dil, sub, rtol=0, atol=1e-12)


def test_conv_is_deterministic():
    r = rng(7)
    x = T(r.normal(size=(2, 4, 12, 12)).astype(np.float32))
    w = T(r.normal(size=(8, 4, 3, 3)).astype(np.float32))
    a = ops.conv2d(x, w, None, ConvSpec(4, 8, 3, 3, "same")).data
    b = ops.conv2d(x, w, None, ConvSpec(4, 8, 3, 3, "same")).data
    assert a.tobytes() == b.tobytes()


class TestBatchNorm:
    def test_train_normalizes(self):
        # output variance is s2/(s2+eps); a wide input keeps that within 1e-6 of 1
        x = T(rng(8).normal(3.0, 10.0, size=(4, 3, 5, 5)))
        out = ops.batchnorm2d(x, T(np.ones(3)), T(np.zeros(3)), np.zeros(3), np.ones(3), "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-6)

    def test_constant_input_gives_zero(self):
        x = T(np.broadcast_to(np.array([1.0, -2.0])[None, :, None, None], (2, 2, 3, 3)).copy())
        out = ops.batchnorm2d(x, T(np.ones(2)), T(np.zeros(2)), None, None, "train")
        np.testing.assert_array_equal(out.data, 0.0)

    def test_running_stats_update(self):
        x = rng(9).normal(1.0, 3.0, size=(2, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), rm, rv, "train")
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_eval_uses_running_stats(self):
        x = rng(10).normal(size=(1, 2, 3, 3))
        rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
        out = ops.batchnorm2d(T(x), T([2.0, 1.0]), T([0.0, 1.0]), rm, rv, "eval").data
        want = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        want = want * np.array([2.0, 1.0])[None, :, None, None] + np.array([0.0, 1.0])[None, :, None, None]
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_eval_without_stats(self):
        with pytest.raises(StateError):
            ops.batchnorm2d(T(np.ones((1, 1, 2, 2))), T([1.0]), T([0.0]), None, None, "eval")

    def test_train_needs_two_values(self):
        with pytest.raises(ShapeError):
            ops.batchnorm2d(T(np.ones((1, 1, 1, 1))), T([1.0]), T([0.0]), None, None, "train")


def test_relu_values():
    np.testing.assert_array_equal(ops.relu(T([[[[-1.0, 0.0, 2.0]]]])).data, [[[[0, 0, 2]]]])
    x = np.abs(rng(11).normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(ops.relu(T(x)).data, x)


class TestPoolUpsample:
    def test_pool_value(self):
        assert ops.maxpool2x2(T([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 4.0

    def test_pool_floor(self):
        assert ops.maxpool2x2(T(np.ones((1, 1, 5, 5)))).shape == (1, 1, 2, 2)

    def test_pool_too_small(self):
        with pytest.raises(ShapeError):
            ops.maxpool2x2(T(np.ones((1, 1, 1, 4))))

    def test_pool_tie_goes_to_top_left(self):
        x = T(np.full((1, 1, 2, 2), 7.0), grad=True)
        (g,) = grad_of(lambda: ops.sum_all(ops.maxpool2x2(x)), x)
        np.testing.assert_array_equal(g, [[[[1, 0], [0, 0]]]])

    def test_pool_odd_trailing_gets_zero_grad(self):
        x = T(rng(12).normal(size=(1, 1, 5, 5)), grad=True)
        (g,) = grad_of(lambda: ops.sum_all(ops.maxpool2x2(x)), x)
        assert not g[0, 0, 4].any() and not g[0, 0, :, 4].any()
        assert g.sum() == 4

    def test_upsample_value(self):
        out = ops.upsample_nearest2x(T([[[[1.0, 2.0]]]])).data
        np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])

    def test_pool_inverts_upsample(self):
        x = rng(13).normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(ops.maxpool2x2(ops.upsample_nearest2x(T(x))).data, x)

    def test_upsample_grad_is_four(self):
        x = T(rng(14).normal(size=(1, 2, 3, 3)), grad=True)
        (g,) = grad_of(lambda: ops.sum_all(ops.upsample_nearest2x(x)), x)
        np.testing.assert_array_equal(g, 4.0)


class TestCropConcatAdd:
    def test_crop_7_to_3(self):
        x = np.arange(49, dtype=float).reshape(1, 1, 7, 7)
        np.testing.assert_array_equal(ops.center_crop(T(x), 3, 3).data, x[:, :, 2:5, 2:5])

    def test_crop_odd_margin(self):
        x = np.arange(36, dtype=float).reshape(1, 1, 6, 6)
        np.testing.assert_array_equal(ops.center_crop(T(x), 3, 3).data, x[:, :, 1:4, 1:4])

    def test_crop_identity(self):
        x = T(np.ones((1, 1, 4, 4)))
        np.testing.assert_array_equal(ops.center_crop(x, 4, 4).data, x.data)

    def test_crop_too_large(self):
        with pytest.raises(ShapeError):
            ops.center_crop(T(np.ones((1, 1, 4, 4))), 5, 4)

    def test_concat(self):
        a = T(rng(15).normal(size=(1, 2, 4, 4)))
        b = T(rng(16).normal(size=(1, 3, 4, 4)))
        out = ops.concat_channels(a, b)
        assert out.shape == (1, 5, 4, 4)
        assert out.data[:, 0].tobytes() == a.data[:, 0].tobytes()

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat_channels(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 4, 3))))

    def test_add(self):
        x = rng(17).normal(size=(1, 2, 3, 3))
        np.testing.assert_array_equal(ops.add(T(x), T(np.zeros_like(x))).data, x)
        np.testing.assert_array_equal(ops.add(T(x), T(-x)).data, 0.0)
        a, b = T(x, grad=True), T(x.copy(), grad=True)
        ga, gb = grad_of(lambda: ops.sum_all(ops.add(a, b)), a, b)
        np.testing.assert_array_equal(ga, 1.0)
        np.testing.assert_array_equal(gb, 1.0)
        with pytest.raises(ShapeError):
            ops.add(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 2, 3))))


class TestLossAndBackward:
    def test_mse_values(self):
        x = T(rng(18).normal(size=(1, 1, 3, 3)))
        assert ops.mse_loss(x, x).item() == 0.0
        assert ops.mse_loss(T(np.zeros((1, 1, 2, 2))), T(np.full((1, 1, 2, 2), 0.5))).item() == 0.25
        with pytest.raises(ShapeError):
            ops.mse_loss(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 2, 1))))

    def test_mse_grad_fd(self):
        p = rng(19).normal(size=(1, 2, 3, 3))
        t = T(rng(20).normal(size=(1, 2, 3, 3)))
        pt = T(p, grad=True)
        (g,) = grad_of(lambda: ops.mse_loss(pt, t), pt)
        assert max_rel_error(g, lambda: scalar(lambda: ops.mse_loss(T(p), t)), p) < 1e-6

    def test_sum_grad_is_ones(self):
        x = T(rng(21).normal(size=(1, 1, 2, 3)), grad=True)
        (g,) = grad_of(lambda: ops.sum_all(x), x)
        np.testing.assert_array_equal(g, 1.0)

    def test_disconnected_leaf_gets_zero(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        unused = T(np.ones(3), grad=True)
        _, gu = grad_of(lambda: ops.sum_all(x), x, unused)
        np.testing.assert_array_equal(gu, 0.0)

    def test_shared_input_accumulates(self):
        x = T(rng(22).normal(size=(1, 1, 2, 2)), grad=True)
        (g,) = grad_of(lambda: ops.sum_all(ops.add(x, x)), x)
        np.testing.assert_array_equal(g, 2.0)

    def test_twice_raises(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        with Tape() as tape:
            loss = ops.sum_all(x)
        backward(loss, tape)
        with pytest.raises(StateError):
            backward(loss, tape)
        tape.reset()

    def test_no_tape_records_nothing(self):
        x = T(np.ones((1, 1, 2, 2)), grad=True)
        with Tape() as tape:
            pass
        ops.relu(x)
        assert len(tape) == 0

    def test_tape_orders_ops(self):
        x = T(np.ones((1, 1, 4, 4)), grad=True)
        with Tape() as tape:
            y = ops.relu(x)
            z = ops.maxpool2x2(y)
        assert [n.output for n in tape.nodes] == [y, z]
        assert tape.nodes[1].inputs == (y,)


# --------------------------------------------------------------------------
# finite-difference checks for every differentiable op


def _fd_case(make_loss, arrays, tol=1e-4):
    """Check gradients of ``make_loss(*tensors)`` for every array in ``arrays``."""
    tensors = [T(a, grad=True) for a in arrays]
    grads = grad_of(lambda: make_loss(*tensors), *tensors)
    for arr, g in zip(arrays, grads):
        def f():
            return scalar(lambda: make_loss(*[T(a) for a in arrays]))
        err = max_rel_error(g, f, arr)
        assert err < tol, err


def _proj(t):
    """MSE against a fixed random target so gradients are not uniform."""
    target = np.random.default_rng(99).normal(size=t.shape)
    return ops.mse_loss(t, T(target))


@pytest.mark.parametrize("k,d,mode", [(3, 1, "valid"), (3, 2, "valid"), (3, 3, "same"), (1, 1, "valid")])
def test_fd_conv(k, d, mode):
    r = rng(30)
    size = 7
    x = r.normal(size=(2, 2, size, size))
    w = r.normal(size=(3, 2, k, k))
    b = r.normal(size=3)
    spec = ConvSpec(2, 3, k, d, mode)
    _fd_case(lambda xt, wt, bt: _proj(ops.conv2d(xt, wt, bt, spec)), [x, w, b])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_fd_batchnorm(mode):
    r = rng(31)
    x = r.normal(1.0, 2.0, size=(2, 3, 4, 4))
    gamma = r.normal(size=3)
    beta = r.normal(size=3)
    rm, rv = r.normal(size=3), r.uniform(0.5, 2.0, size=3)
    _fd_case(
        lambda xt, gt, bt: _proj(ops.batchnorm2d(xt, gt, bt, rm.copy(), rv.copy(), mode)),
        [x, gamma, beta],
    )


def test_fd_relu_away_from_zero():
    x = rng(32).normal(size=(1, 2, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5
    _fd_case(lambda xt: _proj(ops.relu(xt)), [x])


def test_fd_pool_upsample_crop_concat():
    r = rng(33)
    x = r.normal(size=(2, 2, 7, 6))
    _fd_case(lambda xt: _proj(ops.maxpool2x2(xt)), [x])
    _fd_case(lambda xt: _proj(ops.upsample_nearest2x(xt)), [r.normal(size=(1, 2, 3, 3))])
    _fd_case(lambda xt: _proj(ops.center_crop(xt, 3, 4)), [x])
    a, b = r.normal(size=(2, 1, 4, 4)), r.normal(size=(2, 2, 4, 4))
    _fd_case(lambda at, bt: _proj(ops.concat_channels(at, bt)), [a, b])
    _fd_case(lambda at, bt: _proj(ops.add(at, bt)), [a, a.copy() + 1])


def test_fd_mse_through_conv():
    r = rng(34)
    x = T(r.normal(size=(1, 2, 6, 6)))
    t = T(r.normal(size=(1, 1, 2, 2)))
    w = r.normal(size=(1, 2, 3, 3))
    spec = ConvSpec(2, 1, 3, 2)
    _fd_case(lambda wt: ops.mse_loss(ops.conv2d(x, wt, None, spec), t), [w])
