import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_check
from mpnerf import diffcore as dc


def away_from_zero(rng, shape, lo=0.05, hi=2.0):
    x = rng.uniform(lo, hi, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


UNARY = {
    "relu": (dc.relu, lambda r: away_from_zero(r, (4, 5))),
    "elu": (dc.elu, lambda r: away_from_zero(r, (4, 5))),
    "sigmoid": (dc.sigmoid, lambda r: r.uniform(-3, 3, (4, 5))),
    "softplus": (dc.softplus, lambda r: r.uniform(-3, 3, (4, 5))),
    "abs": (dc.tabs, lambda r: away_from_zero(r, (4, 5))),
    "exp": (dc.exp, lambda r: r.uniform(-2, 2, (4, 5))),
    "log": (dc.log, lambda r: r.uniform(0.3, 3, (4, 5))),
    "sin": (dc.sin, lambda r: r.uniform(-3, 3, (4, 5))),
    "cos": (dc.cos, lambda r: r.uniform(-3, 3, (4, 5))),
    "square": (dc.square, lambda r: r.uniform(-2, 2, (4, 5))),
    "sum": (lambda x: dc.tsum(x, axis=1), lambda r: r.uniform(-1, 1, (4, 5))),
    "mean": (lambda x: dc.mean(x, axis=0, keepdims=True), lambda r: r.uniform(-1, 1, (4, 5))),
    "broadcast": (lambda x: dc.broadcast_to(x, (3, 4, 5)), lambda r: r.uniform(-1, 1, (4, 1))),
    "maxpool2": (dc.maxpool2, lambda r: r.permutation(64).reshape(1, 1, 8, 8) * 0.1),
    "upsample2": (dc.upsample2, lambda r: r.uniform(-1, 1, (1, 2, 3, 3))),
    "transpose": (lambda x: dc.transpose(x, (1, 0)), lambda r: r.uniform(-1, 1, (4, 5))),
    "getitem": (lambda x: x[1:3, ::2], lambda r: r.uniform(-1, 1, (4, 5))),
    "take_rows": (lambda x: dc.take_rows(x, np.array([0, 2, 2, 3])), lambda r: r.uniform(-1, 1, (4, 3))),
}

BINARY = {
    "add": (dc.add, (3, 4), (4,)),
    "sub": (dc.sub, (3, 4), (3, 1)),
    "mul": (dc.mul, (3, 4), (3, 4)),
    "div": (dc.div, (3, 4), (3, 4)),
    "matmul": (dc.matmul, (3, 4), (4, 2)),
    "concat": (lambda a, b: dc.concat_channels([a, b]), (1, 2, 3, 3), (1, 1, 3, 3)),
}


class TestPrimitiveValues:
    def test_sigmoid_at_zero(self):
        x = dc.parameter([0.0])
        y = dc.sigmoid(x)
        assert y.data[0] == pytest.approx(0.5)
        (g,) = dc.grad(dc.tsum(y), [x])
        assert g[0] == pytest.approx(0.25)

    def test_elu_saturates(self):
        y = dc.elu(dc.Tensor([-20.0]))
        assert y.data[0] == pytest.approx(math.expm1(-20.0), abs=1e-7)
        assert y.data[0] == pytest.approx(-1.0, abs=1e-8)

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = dc.matmul(dc.Tensor(a), dc.Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            dc.add(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((4, 5))))
        with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            dc.matmul(dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((2, 3))))

    def test_nonfinite_output_raises_with_op(self):
        with pytest.raises(dc.NonFiniteError) as err:
            dc.log(dc.Tensor([0.0, 1.0]))
        assert err.value.op == "log"
        assert "node" in str(err.value)

    def test_conv2d_same_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 6)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))).astype(np.float64)
        ref = np.zeros((2, 4, 5, 6))
        for n in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(6):
                        ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)

    def test_grid_sample_integer_coords_is_gather(self):
        img = np.arange(12, dtype=np.float32).reshape(1, 1, 3, 4)
        xs = np.array([[[0.0, 3.0, 1.0]]])
        ys = np.array([[[0.0, 2.0, 1.0]]])
        out = dc.grid_sample(dc.Tensor(img), xs, ys).data
        np.testing.assert_array_equal(out[0, 0, 0], [0.0, 11.0, 5.0])

    def test_grid_sample_bilinear_midpoint(self):
        img = np.array([[[[0.0, 2.0], [4.0, 6.0]]]], dtype=np.float32)
        out = dc.grid_sample(dc.Tensor(img), np.array([[[0.5]]]), np.array([[[0.5]]])).data
        assert out.reshape(-1)[0] == pytest.approx(3.0)


class TestBackward:
    def test_square(self):
        x = dc.parameter(3.0)
        (g,) = dc.grad(dc.square(x), [x])
        assert g == pytest.approx(6.0)

    def test_sum_sin(self):
        x = dc.parameter([0.0, math.pi / 2])
        (g,) = dc.grad(dc.tsum(dc.sin(x)), [x])
        np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-7)

    def test_nonscalar_loss_rejected(self):
        x = dc.parameter([1.0, 2.0])
        with pytest.raises(dc.ShapeError):
            dc.backward(dc.mul(x, 2.0))

    def test_unreachable_maps_to_zero(self):
        x = dc.parameter([1.0, 2.0])
        y = dc.parameter([[1.0], [2.0]])
        (gx, gy) = dc.grad(dc.tsum(dc.square(x)), [x, y])
        np.testing.assert_array_equal(gy, np.zeros((2, 1)))
        np.testing.assert_allclose(gx, [2.0, 4.0])

    def test_no_requires_grad_never_accumulates(self):
        c = dc.Tensor([1.0, 2.0])
        x = dc.parameter([3.0, 4.0])
        gm = dc.backward(dc.tsum(dc.mul(c, x)))
        assert c.node_id not in gm
        np.testing.assert_allclose(gm.of(x), [1.0, 2.0])

    def test_shared_node_visited_once(self):
        x = dc.parameter([2.0])
        y = dc.mul(x, x)
        z = dc.add(y, y)
        (g,) = dc.grad(dc.tsum(z), [x])
        assert g[0] == pytest.approx(8.0)

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_adjoint_matches_fd(self, name):
        fn, gen = UNARY[name]
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            assert fd_check(fn, [gen(rng)], rng) <= 1e-3

    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary_adjoint_matches_fd(self, name):
        fn, sa, sb = BINARY[name]
        for trial in range(20):
            rng = np.random.default_rng(2000 + trial)
            a = rng.uniform(-1, 1, sa)
            b = rng.uniform(0.5, 1.5, sb) if name == "div" else rng.uniform(-1, 1, sb)
            assert fd_check(fn, [a, b], rng) <= 1e-3

    @pytest.mark.parametrize("padding,k", [("same", 3), ("same", 1), ("valid", 3)])
    def test_conv2d_adjoint_matches_fd(self, padding, k):
        for trial in range(20):
            rng = np.random.default_rng(3000 + trial)
            x = rng.uniform(-1, 1, (1, 2, 5, 5))
            w = rng.uniform(-1, 1, (3, 2, k, k))
            b = rng.uniform(-1, 1, (3,))
            err = fd_check(lambda x_, w_, b_: dc.conv2d(x_, w_, b_, padding), [x, w, b], rng)
            assert err <= 1e-3

    def test_grid_sample_adjoint_matches_fd(self):
        for trial in range(20):
            rng = np.random.default_rng(4000 + trial)
            img = rng.uniform(0, 1, (2, 3, 4, 5))
            xs = rng.uniform(-0.5, 4.5, (2, 3, 3))
            ys = rng.uniform(-0.5, 3.5, (2, 3, 3))
            assert fd_check(lambda t: dc.grid_sample(t, xs, ys), [img], rng) <= 1e-3

    def test_random_three_layer_composition(self):
        for trial in range(20):
            rng = np.random.default_rng(5000 + trial)
            x = rng.uniform(-1, 1, (5, 4))
            w1 = rng.uniform(-1, 1, (4, 6))
            w2 = rng.uniform(-1, 1, (6, 6))
            w3 = rng.uniform(-1, 1, (6, 2))

            def net(x_, a, b, c):
                h = dc.elu(dc.matmul(x_, a))
                h = dc.sigmoid(dc.matmul(h, b))
                return dc.sin(dc.matmul(h, c))

            assert fd_check(net, [x, w1, w2, w3], rng) <= 1e-3

    def test_backward_is_linear(self):
        rng = np.random.default_rng(7)
        x = dc.parameter(rng.uniform(-1, 1, (6,)))
        l1 = dc.tsum(dc.sin(x))
        l2 = dc.tsum(dc.square(dc.mul(x, 3.0)))
        a, b = 0.7, -1.3
        combo = dc.add(dc.mul(l1, a), dc.mul(l2, b))
        (g,) = dc.grad(combo, [x])
        (g1,) = dc.grad(l1, [x])
        (g2,) = dc.grad(l2, [x])
        np.testing.assert_allclose(g, a * g1 + b * g2, atol=1e-5)

    def test_two_passes_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = dc.parameter(rng.uniform(-1, 1, (1, 2, 6, 6)))
            w = dc.parameter(rng.uniform(-1, 1, (3, 2, 3, 3)))
            y = dc.elu(dc.conv2d(x, w))
            loss = dc.mean(dc.square(dc.upsample2(dc.maxpool2(y))))
            return loss.data.copy(), [g.copy() for g in dc.grad(loss, [x, w])]

        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        for a, b in zip(g1, g2):
            assert a.tobytes() == b.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_sum_grad_is_ones(self, xs):
        x = dc.parameter(xs)
        (g,) = dc.grad(dc.tsum(x), [x])
        np.testing.assert_array_equal(g, np.ones(len(xs), dtype=np.float32))


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": dc.parameter([1.0, -2.0])}
        mom = dc.AdamMoments()
        dc.adam_step(p, {"w": np.zeros(2, np.float32)}, mom, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = {"w": dc.parameter([1.0])}
        dc.adam_step(p, {"w": np.ones(1, np.float32)}, dc.AdamMoments(), lr=0.1)
        assert p["w"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_converges_on_quadratic(self):
        p = {"w": dc.parameter([0.0])}
        mom = dc.AdamMoments()
        for _ in range(100):
            loss = dc.tsum(dc.square(dc.sub(p["w"], 3.0)))
            (g,) = dc.grad(loss, [p["w"]])
            dc.adam_step(p, {"w": g}, mom, lr=0.1)
        assert abs(p["w"].data[0] - 3.0) < 0.05

    def test_shape_mismatch(self):
        p = {"w": dc.parameter([0.0, 1.0])}
        with pytest.raises(dc.ShapeError):
            dc.adam_step(p, {"w": np.zeros(3, np.float32)}, dc.AdamMoments(), lr=0.1)


class TestCosineLr:
    def test_endpoints(self):
        assert dc.cosine_lr(0, 100, 5e-4) == pytest.approx(5e-4)
        assert dc.cosine_lr(50, 100, 5e-4) == pytest.approx(2.5e-4)
        assert dc.cosine_lr(100, 100, 5e-4) == pytest.approx(0.0, abs=1e-20)

    def test_past_end_clamps(self, caplog):
        assert dc.cosine_lr(150, 100, 1.0) == 0.0
        assert "clamping" in caplog.text
