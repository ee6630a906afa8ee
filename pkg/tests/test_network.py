import numpy as np
import pytest
from scipy import signal

from hdrenhance.network import (
    UNet,
    UNetConfig,
    batchnorm_backward,
    batchnorm_forward,
    conv3x3_backward,
    conv3x3_forward,
    conv4x4_stride2,
    conv_transpose4x4_backward,
    conv_transpose4x4_forward,
    he_init,
    load_checkpoint,
    maxpool2x2_backward,
    maxpool2x2_forward,
    save_checkpoint,
)


def tiny_net(dtype=np.float64, seed=0, **kw):
    cfg = UNetConfig(**{"base_width": 2, "depth": 2, "input_size": 8, **kw})
    return UNet(cfg, np.random.default_rng(seed), dtype)


def ref_conv3x3(x, w, b):
    """Direct loops over scipy's 2-D correlation with zero padding."""
    n, c = x.shape[:2]
    out = np.zeros((n, w.shape[0]) + x.shape[2:])
    for i in range(n):
        for k in range(w.shape[0]):
            for j in range(c):
                out[i, k] += signal.correlate2d(x[i, j], w[k, j], mode="same")
            out[i, k] += b[k]
    return out


def ref_conv_transpose(x, w, b):
    """Scatter each input pixel's 4x4 kernel footprint, stride 2, then crop 1."""
    n, ci, h, wd = x.shape
    co = w.shape[1]
    full = np.zeros((n, co, 2 * h + 2, 2 * wd + 2))
    for i in range(n):
        for c in range(ci):
            for r in range(h):
                for s in range(wd):
                    full[i, :, 2 * r:2 * r + 4, 2 * s:2 * s + 4] += x[i, c, r, s] * w[c]
    return full[:, :, 1:-1, 1:-1] + b[None, :, None, None]


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


class TestInit:
    def test_he_variance(self):
        w = he_init((100_000,), np.random.default_rng(0), fan_in=50)
        assert abs(w.var() - 0.04) < 0.002

    def test_biases_zero_and_repeatable(self):
        a, b = tiny_net(seed=3), tiny_net(seed=3)
        for name, p in a.params.items():
            np.testing.assert_array_equal(p, b.params[name])
            if name.endswith(".bias") or name.endswith(".shift"):
                assert not p.any()


class TestConv:
    def test_matches_reference(self, rng):
        x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        np.testing.assert_allclose(conv3x3_forward(x, w, b), ref_conv3x3(x, w, b), atol=1e-12)

    def test_averaging_kernel_interior(self):
        x = np.full((1, 1, 6, 6), 2.5)
        out = conv3x3_forward(x, np.full((1, 1, 3, 3), 1 / 9), np.zeros(1))
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 2.5)
        assert out[0, 0, 0, 0] == pytest.approx(2.5 * 4 / 9)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channels"):
            conv3x3_forward(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 3, 3)), np.zeros(1))

    def test_backward_matches_finite_differences(self, rng):
        x, w, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        g = rng.normal(size=(2, 3, 5, 4))
        dx, dw, db = conv3x3_backward(g, x, w)
        loss = lambda: np.sum(g * conv3x3_forward(x, w, b))  # noqa: E731
        for ours, arr in ((dx, x), (dw, w), (db, b)):
            np.testing.assert_allclose(ours, numeric_grad(loss, arr), rtol=1e-6, atol=1e-8)


class TestTransposedConv:
    def test_matches_scatter_reference(self, rng):
        x, w, b = rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=2)
        np.testing.assert_allclose(conv_transpose4x4_forward(x, w, b), ref_conv_transpose(x, w, b), atol=1e-12)

    def test_doubles_from_one_pixel(self, rng):
        out = conv_transpose4x4_forward(rng.normal(size=(1, 2, 1, 1)), rng.normal(size=(2, 3, 4, 4)), np.zeros(3))
        assert out.shape == (1, 3, 2, 2)

    def test_zero_weights_give_bias(self, rng):
        out = conv_transpose4x4_forward(rng.normal(size=(1, 2, 3, 3)), np.zeros((2, 3, 4, 4)), np.arange(3.0))
        np.testing.assert_array_equal(out, np.arange(3.0)[None, :, None, None] * np.ones((1, 3, 6, 6)))

    def test_adjoint(self, rng):
        for _ in range(20):
            ci, co, h, w = rng.integers(1, 5, 4)
            x = rng.normal(size=(2, ci, h, w))
            y = rng.normal(size=(2, co, 2 * h, 2 * w))
            k = rng.normal(size=(ci, co, 4, 4))
            lhs = np.sum(conv_transpose4x4_forward(x, k, np.zeros(co)) * y)
            rhs = np.sum(x * conv4x4_stride2(y, k))
            assert abs(lhs - rhs) < 1e-10

    def test_backward_matches_finite_differences(self, rng):
        x, w, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3)
        g = rng.normal(size=(2, 3, 6, 6))
        dx, dw, db = conv_transpose4x4_backward(g, x, w)
        loss = lambda: np.sum(g * conv_transpose4x4_forward(x, w, b))  # noqa: E731
        for ours, arr in ((dx, x), (dw, w), (db, b)):
            np.testing.assert_allclose(ours, numeric_grad(loss, arr), rtol=1e-6, atol=1e-8)


class TestMaxPool:
    def test_block(self):
        out, _ = maxpool2x2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.item() == 4.0

    def test_ties_first(self):
        out, idx = maxpool2x2_forward(np.ones((1, 2, 4, 4)))
        np.testing.assert_array_equal(out, 1.0)
        np.testing.assert_array_equal(idx, 0)

    def test_backward_routes_to_argmax(self, rng):
        x = rng.normal(size=(2, 3, 4, 6))
        out, idx = maxpool2x2_forward(x)
        g = rng.normal(size=out.shape)
        dx = maxpool2x2_backward(g, idx)
        assert np.count_nonzero(dx) == g.size
        np.testing.assert_allclose(dx, numeric_grad(lambda: np.sum(g * maxpool2x2_forward(x)[0]), x), atol=1e-8)

    def test_odd_rejected(self):
        with pytest.raises(ValueError):
            maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


class TestBatchNorm:
    def _buffers(self, c):
        return np.zeros(c), np.ones(c)

    def test_normalises(self, rng):
        x = rng.normal(3, 2, size=(4, 3, 5, 5))
        out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), *self._buffers(3), True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_eval_with_matching_stats(self, rng):
        x = rng.normal(3, 2, size=(4, 3, 5, 5))
        scale, shift = rng.normal(size=3), rng.normal(size=3)
        train, _ = batchnorm_forward(x, scale, shift, *self._buffers(3), True)
        rm, rv = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        ev, _ = batchnorm_forward(x, scale, shift, rm, rv, False)
        np.testing.assert_allclose(ev, train, atol=1e-12)

    def test_running_stats_update(self, rng):
        x = rng.normal(3, 2, size=(4, 2, 5, 5))
        rm, rv = self._buffers(2)
        batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, True, momentum=0.99)
        np.testing.assert_allclose(rm, 0.01 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.99 + 0.01 * x.var(axis=(0, 2, 3)))

    def test_zero_input_gives_shift(self):
        out, _ = batchnorm_forward(np.zeros((2, 2, 3, 3)), np.ones(2), np.array([0.5, -1]), *self._buffers(2), True)
        np.testing.assert_allclose(out[:, 0], 0.5)
        np.testing.assert_allclose(out[:, 1], -1)

    def test_single_value_rejected(self):
        with pytest.raises(ValueError):
            batchnorm_forward(np.zeros((1, 1, 1, 1)), np.ones(1), np.zeros(1), *self._buffers(1), True)

    @pytest.mark.parametrize("train", [True, False])
    def test_backward(self, rng, train):
        x = rng.normal(size=(3, 2, 3, 3))
        scale, shift = rng.normal(size=2), rng.normal(size=2)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, 2)
        g = rng.normal(size=x.shape)

        def loss():
            return np.sum(g * batchnorm_forward(x, scale, shift, rm.copy(), rv.copy(), train)[0])

        _, cache = batchnorm_forward(x, scale, shift, rm.copy(), rv.copy(), train)
        dx, dscale, dshift = batchnorm_backward(g, scale, cache)
        for ours, arr in ((dx, x), (dscale, scale), (dshift, shift)):
            np.testing.assert_allclose(ours, numeric_grad(loss, arr), rtol=1e-5, atol=1e-7)


class TestUNet:
    def test_full_scale_trace(self):
        net = UNet(UNetConfig(), np.random.default_rng(0), np.float32)
        assert net.channel_trace() == [32, 64, 128, 256, 512, 1024, 512, 256, 128, 64, 32]
        assert net.params["up4.weight"].shape == (1024, 512, 4, 4)
        assert net.params["dec4.conv0.weight"].shape == (512, 1024, 3, 3)

    def test_desk_forward(self, rng):
        net = UNet(UNetConfig.desk(), np.random.default_rng(0))
        y = net.forward(rng.random((1, 3, 64, 64)).astype(np.float32))
        assert y.shape == (1, 3, 64, 64) and y.min() > 0 and y.max() < 1

    def test_indivisible_size(self):
        with pytest.raises(ValueError, match="multiple of 4"):
            UNet(UNetConfig.desk()).forward(np.zeros((1, 3, 30, 32), np.float32))

    def test_block_with_zero_weights_gives_shift(self):
        net = tiny_net(depth=1, input_size=4)
        for name, p in net.params.items():
            if name.startswith("enc0.conv"):
                p[...] = 0
        net.params["enc0.bn1.shift"][...] = [0.3, -0.2]
        h, _ = net._block_forward("enc0", np.ones((2, 3, 1, 1)))
        np.testing.assert_allclose(h[:, :, 0, 0], [[0.3, -0.2]] * 2)

    def test_hand_trace(self, rng):
        """Depth-2 net on 4x4 with all weights set; compare with a layer-by-layer reference."""
        net = tiny_net(input_size=4)
        for p in net.params.values():
            p[...] = rng.normal(size=p.shape)
        x = rng.random((2, 3, 4, 4))

        def block(name, h):
            for j in range(2):
                z = ref_conv3x3(h, net.params[f"{name}.conv{j}.weight"], net.params[f"{name}.conv{j}.bias"])
                r = np.maximum(z, 0)
                mu, var = r.mean(axis=(0, 2, 3), keepdims=True), r.var(axis=(0, 2, 3), keepdims=True)
                h = ((r - mu) / np.sqrt(var + 1e-5) * net.params[f"{name}.bn{j}.scale"][None, :, None, None]
                     + net.params[f"{name}.bn{j}.shift"][None, :, None, None])
            return h

        e0 = block("enc0", x)
        pooled = e0.reshape(2, 2, 2, 2, 2, 2).max(axis=(3, 5))
        e1 = block("enc1", pooled)
        up = np.maximum(ref_conv_transpose(e1, net.params["up0.weight"], net.params["up0.bias"]), 0)
        d0 = block("dec0", np.concatenate([up, e0], axis=1))
        logits = ref_conv3x3(d0, net.params["out.weight"], net.params["out.bias"])
        np.testing.assert_allclose(net.forward(x), 1 / (1 + np.exp(-logits)), rtol=1e-10)

    def test_gradient_check(self, rng):
        net = tiny_net()
        x = rng.random((2, 3, 8, 8))
        g = rng.normal(size=(2, 3, 8, 8))
        net.forward(x)
        grads, dx = net.backward(g)
        loss = lambda: float(np.sum(g * net.forward(x)))  # noqa: E731
        worst = max(max_rel_err(grads[n], numeric_grad(loss, p)) for n, p in net.params.items())
        assert worst < 1e-4
        assert max_rel_err(dx, numeric_grad(loss, x)) < 1e-4

    def test_zero_upstream(self, rng):
        net = tiny_net()
        net.forward(rng.random((2, 3, 8, 8)))
        grads, dx = net.backward(np.zeros((2, 3, 8, 8)))
        assert all(not g.any() for g in grads.values()) and not dx.any()

    def test_sigmoid_slope_at_zero(self, rng):
        net = tiny_net()
        for name in ("out.weight", "out.bias"):
            net.params[name][...] = 0
        net.forward(rng.random((2, 3, 8, 8)))
        up = rng.normal(size=(2, 3, 8, 8))
        grads, _ = net.backward(up)
        np.testing.assert_allclose(grads["out.bias"], 0.25 * up.sum(axis=(0, 2, 3)))

    def test_backward_before_forward(self):
        with pytest.raises(RuntimeError):
            tiny_net().backward(np.zeros((1, 3, 8, 8)))

    def test_eval_deterministic(self, rng):
        net = tiny_net().eval()
        x = rng.random((1, 3, 8, 8))
        np.testing.assert_array_equal(net.forward(x), net.forward(x))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        net = UNet(UNetConfig.desk(), np.random.default_rng(4))
        net.forward(rng.random((2, 3, 64, 64)).astype(np.float32))
        save_checkpoint(tmp_path / "c.bin", net, {"extra:t": np.arange(3, dtype=np.float32)}, {"epoch": 3})
        back, extra, meta = load_checkpoint(tmp_path / "c.bin")
        assert back.config == net.config and meta["epoch"] == 3
        for name in net.params:
            assert back.params[name].tobytes() == net.params[name].tobytes()
        for name in net.buffers:
            assert back.buffers[name].tobytes() == net.buffers[name].tobytes()
        np.testing.assert_array_equal(extra["extra:t"], np.arange(3))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"garbage!" * 4)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.bin")
