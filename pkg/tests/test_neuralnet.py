import numpy as np
import pytest

from mcforge.neuralnet import (
    Network, layer, forward, backward, ShapeError,
    init_adam, adam_step, save_network, load_network, grad_check,
)


def sq_loss(out, target):
    d = out - target
    return 0.5 * float(np.sum(d * d)), d


def rand(shape, seed, loc=0.0, scale=1.0):
    return np.random.default_rng(seed).normal(loc, scale, size=shape)


class TestForward:
    def test_conv_1x1_identity(self):
        net = Network([layer("conv2d", "c", channels=1, kernel=1)],
                      input_shape=(1, 5, 5), dtype=np.float64)
        net.params["c.w"][:] = 1.0
        x = rand((2, 1, 5, 5), 0)
        out, _ = forward(net, x)
        assert np.allclose(out, x)

    def test_dilated_receptive_field_5x5(self):
        # 3x3 kernel with dilation 2 must see exactly a 5x5 patch
        net = Network([layer("conv2d", "c", channels=1, kernel=3, dilation=2)],
                      input_shape=(1, 7, 7), dtype=np.float64)
        net.params["c.w"][:] = 1.0
        assert net.output_shape == (1, 3, 3)
        x = np.zeros((1, 1, 7, 7))
        base = forward(net, x)[0][0, 0, 1, 1]     # centered output, input center (3,3)
        for dr, dc, inside in [(2, 2, True), (0, 2, True), (3, 0, False),
                               (2, 3, False), (1, 1, False)]:
            x2 = x.copy()
            x2[0, 0, 3 + dr, 3 + dc] = 1.0
            changed = forward(net, x2)[0][0, 0, 1, 1] != base
            # dilation-2 taps sit on even offsets only
            expect = inside and dr % 2 == 0 and dc % 2 == 0
            assert changed == expect, (dr, dc)

    def test_bilinear_upsample_constant(self):
        net = Network([layer("upsample", "u", size=(9, 13))],
                      input_shape=(2, 4, 4), dtype=np.float64)
        out, _ = forward(net, np.full((1, 2, 4, 4), 3.5))
        assert out.shape == (1, 2, 9, 13)
        assert np.allclose(out, 3.5)

    def test_shape_mismatch_reports_layer(self):
        with pytest.raises(ShapeError, match="layer 1"):
            Network([layer("flatten", "f"), layer("conv2d", "c", channels=1, kernel=3)],
                    input_shape=(1, 8, 8))

    def test_batch_shape_checked(self):
        net = Network([layer("flatten", "f")], input_shape=(1, 4, 4))
        with pytest.raises(ShapeError):
            forward(net, np.zeros((2, 1, 5, 5)))

    def test_softmax_rows_sum_to_one(self):
        net = Network([layer("dense", "d", units=6), layer("softmax_head", "s")],
                      input_shape=(3,), dtype=np.float64)
        out, _ = forward(net, rand((4, 3), 1))
        assert np.allclose(out.sum(axis=1), 1.0)


class TestBackwardBasics:
    def test_relu_blocks_negative(self):
        net = Network([layer("relu", "r")], input_shape=(4,), dtype=np.float64)
        x = np.array([[-1.0, 2.0, -3.0, 4.0]])
        out, cache = forward(net, x)
        _, dx = backward(net, cache, np.ones_like(out))
        assert dx.tolist() == [[0.0, 1.0, 0.0, 1.0]]

    def test_dense_weight_grad_outer_product(self):
        net = Network([layer("dense", "d", units=3)], input_shape=(5,),
                      dtype=np.float64)
        x = rand((1, 5), 2)
        out, cache = forward(net, x)
        g = rand(out.shape, 3)
        grads, _ = backward(net, cache, g)
        assert np.allclose(grads["d.w"], np.outer(x[0], g[0]))
        assert np.allclose(grads["d.b"], g[0])


def mini_net(kind_layers, input_shape, seed=0):
    return Network(kind_layers, input_shape, seed=seed, dtype=np.float64)


FD_CASES = {
    "conv2d": (
        [layer("conv2d", "c", channels=3, kernel=3, padding=1),
         layer("flatten", "f"), layer("dense", "d", units=4)],
        (2, 6, 6)),
    "conv2d_strided_dilated": (
        [layer("conv2d", "c", channels=2, kernel=3, stride=2, dilation=2, padding=2),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (1, 8, 8)),
    "dense_relu": (
        [layer("dense", "d1", units=8), layer("relu", "r"),
         layer("dense", "d2", units=3)],
        (6,)),
    "maxpool2d": (
        [layer("conv2d", "c", channels=2, kernel=3, padding=1),
         layer("maxpool2d", "p", kernel=2, stride=2),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (1, 8, 8)),
    "maxpool_overlap": (
        [layer("conv2d", "c", channels=2, kernel=3, padding=1),
         layer("maxpool2d", "p", kernel=3, stride=2),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (1, 9, 9)),
    "avgpool_local": (
        [layer("conv2d", "c", channels=2, kernel=3, padding=1),
         layer("avgpool2d", "p", kernel=2, stride=2),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (1, 8, 8)),
    "avgpool_global": (
        [layer("conv2d", "c", channels=4, kernel=3, padding=1),
         layer("avgpool2d", "p"),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (1, 8, 8)),
    "upsample": (
        [layer("conv2d", "c", channels=2, kernel=3, padding=1),
         layer("upsample", "u", size=(12, 12)),
         layer("flatten", "f"), layer("dense", "d", units=2)],
        (1, 6, 6)),
    "concat_skip": (
        [layer("conv2d", "c1", channels=3, kernel=3, padding=1),
         layer("relu", "r1"),
         layer("conv2d", "c2", channels=3, kernel=3, padding=1),
         layer("concat", "cat", inputs=["r1", "c2"]),
         layer("conv2d", "c3", channels=2, kernel=1),
         layer("flatten", "f"), layer("dense", "d", units=3)],
        (2, 5, 5)),
    "exp_head": (
        [layer("dense", "d", units=4), layer("exp_head", "e", clamp=10.0)],
        (5,)),
    "softmax_head": (
        [layer("dense", "d", units=4), layer("softmax_head", "s")],
        (5,)),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("case", sorted(FD_CASES))
    def test_layer_kind_fd(self, case):
        layers, in_shape = FD_CASES[case]
        net = mini_net(layers, in_shape, seed=11)
        x = rand((3,) + in_shape, 21, scale=1.0)
        target = rand((3,) + net.output_shape, 22)
        err = grad_check(net, sq_loss, x, target, eps=1e-3, sample_frac=1.0, seed=5)
        assert err <= 1e-4, f"{case}: {err}"

    def test_linear_net_squared_loss_exact(self):
        net = mini_net([layer("dense", "d", units=3)], (4,), seed=2)
        x = rand((5, 4), 9)
        target = rand((5, 3), 10)
        err = grad_check(net, sq_loss, x, target, eps=1e-3, sample_frac=1.0)
        assert err <= 1e-8


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        params = {"p": np.array([1.0])}
        state = init_adam(params, lr=1e-3)
        adam_step(params, {"p": np.array([0.5])}, state)
        assert abs((params["p"][0] - 1.0) + 1e-3) <= 1e-6

    def test_zero_gradient_no_change(self):
        params = {"p": np.array([1.0, -2.0])}
        state = init_adam(params)
        adam_step(params, {"p": np.zeros(2)}, state)
        assert params["p"].tolist() == [1.0, -2.0]

    def test_deterministic_100_steps(self):
        def run():
            rng = np.random.default_rng(4)
            params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3,))}
            state = init_adam(params, lr=1e-2)
            for _ in range(100):
                grads = {k: np.sin(v) for k, v in params.items()}
                adam_step(params, grads, state)
            return params
        p1, p2 = run(), run()
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    def test_nonfinite_gradient_aborts(self):
        params = {"p": np.array([1.0])}
        state = init_adam(params)
        with pytest.raises(FloatingPointError, match="p"):
            adam_step(params, {"p": np.array([np.nan])}, state)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        layers = [layer("conv2d", "c", channels=4, kernel=3, stride=2, padding=1),
                  layer("relu", "r"), layer("flatten", "f"),
                  layer("dense", "d", units=5)]
        net = Network(layers, (1, 8, 8), seed=7, class_count=5)
        path = tmp_path / "net.ckpt"
        save_network(net, path, extras={"classes": [0, 1, 2, 3, 4]})
        net2, extras = load_network(path)
        assert extras["classes"] == [0, 1, 2, 3, 4]
        assert net2.class_count == 5
        for k in net.param_order:
            assert np.array_equal(net.params[k], net2.params[k])
        x = rand((2, 1, 8, 8), 12).astype(np.float32)
        assert np.array_equal(forward(net, x)[0], forward(net2, x)[0])

    def test_same_seed_same_init(self):
        spec = [layer("dense", "d", units=4)]
        a = Network(spec, (3,), seed=9)
        b = Network(spec, (3,), seed=9)
        assert np.array_equal(a.params["d.w"], b.params["d.w"])
        c = Network(spec, (3,), seed=10)
        assert not np.array_equal(a.params["d.w"], c.params["d.w"])
