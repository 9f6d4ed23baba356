import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcases import LAYER_CASES, layer_error, network_error, tiny_recurnet, tiny_segnet
from lungrisk.errors import ContractError, FormatError, ShapeError
from lungrisk.neuralcore import (
    AdamState,
    AugmentationConfig,
    Concat,
    Conv,
    Dense,
    Dropout,
    MaxPool,
    ResidualAdd,
    adam_step,
    augment,
    bce,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    weighted_bce,
)
from lungrisk.neuralcore.checkpoint import load_into
from lungrisk.neuralcore.layers import same_padding
from oracles import naive_conv, naive_dense


def random_conv_case(rng):
    nd = int(rng.choice([2, 3]))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
    spatial = tuple(int(v) for v in rng.integers(1, 7 if nd == 2 else 5, size=nd))
    n = int(rng.integers(1, 3))
    layer = Conv(nd, c_in, c_out, k, stride, rng=rng, dtype=np.float64)
    layer.params["bias"] = rng.normal(size=c_out)
    return layer, rng.normal(size=(n, c_in) + spatial)


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class TestKernels:
    def test_conv_matches_direct_sum(self, rng):
        for _ in range(60):
            layer, x = random_conv_case(rng)
            y = layer.forward(x)
            ref = naive_conv(x, layer.params["weight"], layer.params["bias"], layer.stride)
            assert y.shape == ref.shape
            assert rel_err(y, ref) < 1e-5

    def test_conv_float32(self, rng):
        layer, x = random_conv_case(rng)
        w = layer.params["weight"].astype(np.float32)
        l32 = Conv(layer.ndim, layer.in_channels, layer.out_channels, layer.kernel, layer.stride)
        l32.params["weight"], l32.params["bias"] = w, layer.params["bias"].astype(np.float32)
        assert rel_err(l32.forward(x.astype(np.float32)), naive_conv(x.astype(np.float32), w, l32.params["bias"], layer.stride)) < 1e-5

    def test_dense_matches_direct_sum(self, rng):
        for _ in range(20):
            i, o, n = (int(v) for v in rng.integers(1, 9, size=3))
            d = Dense(i, o, rng=rng, dtype=np.float64)
            d.params["bias"] = rng.normal(size=o)
            x = rng.normal(size=(n, i))
            assert rel_err(d.forward(x), naive_dense(x, d.params["weight"], d.params["bias"])) < 1e-5

    @given(st.integers(1, 40), st.sampled_from([1, 3]), st.integers(1, 3))
    def test_same_padding(self, size, kernel, stride):
        before, after, out = same_padding(size, kernel, stride)
        assert out == math.ceil(size / stride)
        assert before <= after <= before + 1
        assert (out - 1) * stride + kernel <= size + before + after

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="conv2d"):
            Conv(2, 3, 4).forward(np.zeros((1, 2, 5, 5), np.float32))
        with pytest.raises(ShapeError):
            Dense(3, 2).forward(np.zeros((2, 4), np.float32))
        with pytest.raises(ShapeError):
            MaxPool(3, 3).forward(np.zeros((1, 1, 2, 9, 9), np.float32))

    def test_maxpool_floors(self):
        x = np.arange(2 * 7 * 7, dtype=np.float64).reshape(1, 2, 7, 7)
        y = MaxPool(2, 3).forward(x)
        assert y.shape == (1, 2, 2, 2)
        assert y[0, 0, 0, 0] == x[0, 0, 2, 2]

    def test_backward_needs_train_forward(self):
        d = Dense(2, 2)
        d.forward(np.zeros((1, 2), np.float32))
        with pytest.raises(ContractError):
            d.backward(np.zeros((1, 2), np.float32))


class TestGradients:
    @pytest.mark.parametrize("name", sorted(LAYER_CASES))
    def test_layer_64bit(self, name):
        assert layer_error(name, 64) < 1e-6

    @pytest.mark.parametrize("name", sorted(LAYER_CASES))
    def test_layer_32bit(self, name):
        assert layer_error(name, 32) < 1e-3

    def test_concat_and_residual(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 1, 4))
        cat = Concat()
        out = cat.forward((a, b), train=True)
        ga, gb = cat.backward(out * 2)
        np.testing.assert_array_equal(ga, 2 * a)
        np.testing.assert_array_equal(gb, 2 * b)
        add = ResidualAdd()
        add.forward((a, a), train=True)
        g1, g2 = add.backward(np.ones_like(a))
        np.testing.assert_array_equal(g1, g2)
        with pytest.raises(ShapeError):
            add.forward((a, b))

    @pytest.mark.parametrize("kind", ["segnet", "recurnet"])
    def test_network(self, kind):
        assert network_error(kind, 64) < 1e-6
        assert network_error(kind, 32) < 1e-3


class TestLosses:
    @given(st.lists(st.tuples(st.floats(0.0, 1.0), st.booleans()), min_size=1, max_size=30))
    def test_unit_weight_is_plain_bce(self, pairs):
        h = np.array([p for p, _ in pairs])
        y = np.array([float(t) for _, t in pairs])
        assert abs(weighted_bce(h, y, 1.0)[0] - bce(h, y)) <= 1e-9

    def test_scalar_case(self):
        assert abs(weighted_bce(np.array([0.5]), np.array([1.0]), 12.0)[0] - 12 * math.log(2)) <= 1e-9

    def test_gradient_matches_difference(self, rng):
        h = rng.uniform(0.05, 0.95, size=10)
        y = (rng.random(10) < 0.5).astype(float)
        _, g = weighted_bce(h, y, 3.0)
        for i in range(10):
            e = np.zeros(10)
            e[i] = 1e-6
            num = (weighted_bce(h + e, y, 3.0)[0] - weighted_bce(h - e, y, 3.0)[0]) / 2e-6
            assert g[i] == pytest.approx(num, rel=1e-6)

    def test_clamped_extremes_are_finite(self):
        loss, g = weighted_bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]), 12.0)
        assert math.isfinite(loss) and np.all(np.isfinite(g))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            weighted_bce(np.zeros(3), np.zeros(4))


class TestAdam:
    def test_against_reference_formula(self, rng):
        p = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(4)]
        state = AdamState(lr=0.01)
        ref, m, v = p.copy(), np.zeros(5), np.zeros(5)
        for t, g in enumerate(grads, 1):
            adam_step([p], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-12)

    def test_first_step_moves_by_lr(self):
        p = np.array([1.0, -1.0])
        adam_step([p], [np.array([5.0, -0.1])], AdamState(lr=0.1))
        np.testing.assert_allclose(p, [0.9, -0.9], rtol=1e-6)

    def test_minimizes_quadratic(self):
        p = np.array([3.0, -2.0])
        state = AdamState(lr=0.05)
        for _ in range(2000):
            adam_step([p], [2 * p], state)
        assert np.all(np.abs(p) < 1e-2)


class TestDropout:
    def test_inference_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(Dropout(0.5).forward(x), x)

    def test_inverted_scaling(self):
        x = np.ones((200, 200))
        y = Dropout(0.25, rng=np.random.default_rng(0)).forward(x, train=True)
        assert set(np.unique(y)) <= {0.0, 1 / 0.75}
        assert y.mean() == pytest.approx(1.0, abs=0.02)

    def test_rate_bounds(self):
        with pytest.raises(ContractError):
            Dropout(1.0)


class TestCheckpoint:
    @pytest.mark.parametrize("build", [tiny_segnet, tiny_recurnet])
    def test_roundtrip(self, tmp_path, build):
        model = build(np.float32)
        model.step = 17
        path = save_checkpoint(model, tmp_path / "m.ckpt", seed=9)
        ckpt = load_checkpoint(path)
        assert ckpt.seed == 9 and ckpt.step == 17
        back = restore_model(ckpt)
        for k, v in model.state().items():
            np.testing.assert_array_equal(back.state()[k], v)
        # same bytes when re-saved
        assert save_checkpoint(back, tmp_path / "b.ckpt", seed=9).read_bytes() == path.read_bytes()

    def test_corruption(self, tmp_path):
        path = save_checkpoint(tiny_segnet(np.float32), tmp_path / "m.ckpt")
        data = path.read_bytes()
        for bad, frag in [(b"XXXX" + data[4:], "magic"), (data[:-4], "truncated"), (data + b"\0", "trailing")]:
            path.write_bytes(bad)
            with pytest.raises(FormatError, match=frag):
                load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path):
        ckpt = load_checkpoint(save_checkpoint(tiny_segnet(np.float32), tmp_path / "m.ckpt"))
        with pytest.raises(ShapeError):
            load_into(tiny_recurnet(np.float32), ckpt)


class TestAugment:
    def test_identity_config(self, rng):
        img = rng.random((16, 16)).astype(np.float32)
        mask = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        out, m = augment(img, mask, AugmentationConfig.identity(), rng)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(m, mask)

    def test_deterministic_and_binary(self):
        img = np.zeros((32, 32), np.float32)
        img[10:20, 8:16] = 0.8
        mask = (img > 0).astype(np.uint8)
        a = augment(img, mask, rng=np.random.default_rng(4))
        b = augment(img, mask, rng=np.random.default_rng(4))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])
        assert set(np.unique(a[1])) <= {0, 1}
        assert a[0].min() >= 0 and a[0].max() <= 1

    def test_mask_follows_image(self):
        img = np.zeros((33, 33), np.float32)
        img[5:12, 20:28] = 1.0
        out, m = augment(img, img.astype(np.uint8), AugmentationConfig(0, 10, 5, 0.1, 1.0), np.random.default_rng(1))
        inside = out[m > 0]
        assert inside.mean() > 0.8
        assert out[m == 0].mean() < 0.1

    def test_volume_slicewise(self, rng):
        vol = rng.random((3, 16, 16)).astype(np.float32)
        cfg = AugmentationConfig(0, 0, 0, 0, 1.0)
        out, _ = augment(vol, None, cfg, rng)
        np.testing.assert_array_equal(out, vol[..., ::-1])

    def test_requires_generator(self):
        with pytest.raises(ContractError):
            augment(np.zeros((4, 4)))
