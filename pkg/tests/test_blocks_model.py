import numpy as np
import pytest

from pavedet import tensor as T
from pavedet.blocks import C3, CBS, Bottleneck, C3Cbam, SPPF
from pavedet.model import Detector, NetworkConfig, decode
from pavedet.tensor import Tensor


def rng64(seed):
    return np.random.default_rng(seed)


class TestCBS:
    def test_zero_conv_eval_identity_bn_gives_zero(self):
        cbs = CBS(2, 3, 3, rng=rng64(0), dtype=np.float64)
        cbs.conv.weight.data[...] = 0.0
        x = Tensor(rng64(1).normal(size=(1, 2, 4, 4)))
        out = cbs(x, training=False)
        np.testing.assert_array_equal(out.data, 0.0)  # silu(0) = 0

    def test_stride2_halves_even_extents(self):
        cbs = CBS(3, 4, 3, stride=2, rng=rng64(2))
        out = cbs(Tensor(np.zeros((1, 3, 8, 12), dtype=np.float32)), training=False)
        assert out.shape == (1, 4, 4, 6)

    def test_gradient_check(self):
        cbs = CBS(2, 2, 3, rng=rng64(3), dtype=np.float64)

        def f(t):
            return T.tsum(cbs(t, training=True))

        assert T.gradient_check(f, Tensor(rng64(4).normal(size=(1, 2, 4, 4)))) <= 1e-4


class TestC3:
    def test_output_shape(self):
        c3 = C3(64, 64, rng=rng64(5))
        out = c3(Tensor(np.zeros((2, 64, 6, 6), dtype=np.float32)), training=False)
        assert out.shape == (2, 64, 6, 6)

    def test_matches_hand_composition(self):
        c3 = C3(4, 4, n=1, rng=rng64(6), dtype=np.float64)
        x = Tensor(rng64(7).normal(size=(1, 4, 5, 5)))
        a = c3.cv1(x)
        a = c3.blocks[0](a)
        b = c3.cv2(x)
        hand = c3.cv3(T.concat([a, b], axis=1)).data
        np.testing.assert_allclose(c3(x).data, hand, atol=1e-12)

    def test_gradient_check(self):
        c3 = C3(2, 2, rng=rng64(8), dtype=np.float64)

        def f(t):
            return T.tsum(c3(t, training=True))

        assert T.gradient_check(f, Tensor(rng64(9).normal(size=(1, 2, 4, 4)))) <= 1e-4


class TestC3Cbam:
    def test_output_shape_matches_plain_c3(self):
        plain = C3(8, 8, rng=rng64(10))
        mod = C3Cbam(8, 8, rng=rng64(11))
        x = Tensor(np.zeros((1, 8, 6, 6), dtype=np.float32))
        assert plain(x).shape == mod(x).shape

    def test_zero_cbam_equals_quarter_scaled_branch(self):
        mod = C3Cbam(4, 4, n=1, rng=rng64(12), dtype=np.float64)
        for p in (mod.cbam.channel.w0, mod.cbam.channel.w1, mod.cbam.spatial.kernel):
            p.data[...] = 0.0
        x = Tensor(rng64(13).normal(size=(1, 4, 5, 5)))
        # hand composition: attention branch collapses to bottleneck(0.25 x)
        a = mod.blocks[0](Tensor(0.25 * x.data))
        hand = mod.cv3(T.concat([a, mod.cv1(x), mod.cv2(x)], axis=1)).data
        np.testing.assert_allclose(mod(x).data, hand, atol=1e-10)

    def test_gradient_check(self):
        mod = C3Cbam(2, 2, rng=rng64(14), dtype=np.float64)

        def f(t):
            return T.tsum(mod(t, training=True))

        assert T.gradient_check(f, Tensor(rng64(15).normal(size=(1, 2, 4, 4)))) <= 1e-4


class TestSPPF:
    def test_constant_map_passthrough(self):
        sppf = SPPF(4, 4, rng=rng64(16), dtype=np.float64)
        x = Tensor(np.full((1, 4, 6, 6), 1.5))
        # on a constant map every pooled copy equals the CBS output, so the
        # result must equal running the two CBS layers on a 4x-stacked copy
        y = sppf.cv1(x)
        hand = sppf.cv2(T.concat([y, y, y, y], axis=1)).data
        np.testing.assert_allclose(sppf(x).data, hand, atol=1e-12)

    def test_concat_width(self):
        sppf = SPPF(8, 8, rng=rng64(17))
        y = sppf.cv1(Tensor(np.zeros((1, 8, 5, 5), dtype=np.float32)))
        assert y.shape[1] * 4 == 16  # 4x intermediate channels into cv2

    def test_chained_pools_monotone(self):
        x = Tensor(rng64(18).normal(size=(1, 3, 6, 6)))
        p1 = T.maxpool2d(x, 5, 1, 2)
        p2 = T.maxpool2d(p1, 5, 1, 2)
        assert np.all(p1.data >= x.data)
        assert np.all(p2.data >= p1.data)


class TestDetectorForward:
    def test_grid_shapes(self):
        cfg = NetworkConfig(input_size=160, num_scales=3)
        model = Detector(cfg, seed=0)
        raw = model.forward(Tensor(np.zeros((1, 3, 160, 160), dtype=np.float32)))
        assert [r.shape[2:] for r in raw] == [(20, 20), (10, 10), (5, 5)]
        assert all(r.shape[1] == 3 * (5 + 4) for r in raw)

    def test_wrong_input_size_rejected(self):
        model = Detector(NetworkConfig(), seed=0)
        with pytest.raises(T.ShapeError):
            model.forward(Tensor(np.zeros((1, 3, 128, 128), dtype=np.float32)))

    def test_deterministic_forward(self):
        model = Detector(NetworkConfig(channels=(4, 8, 16, 32, 64)), seed=1)
        x = Tensor(np.random.default_rng(19).uniform(0, 1, (1, 3, 160, 160))
                   .astype(np.float32))
        with T.no_grad():
            a = model.forward(x)
            b = model.forward(x)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.data, rb.data)

    def test_finite_outputs(self):
        model = Detector(NetworkConfig(channels=(4, 8, 16, 32, 64)), seed=2)
        x = Tensor(np.random.default_rng(20).uniform(0, 1, (2, 3, 160, 160))
                   .astype(np.float32))
        with T.no_grad():
            raw = model.forward(x)
        assert all(np.all(np.isfinite(r.data)) for r in raw)

    def test_zero_param_cbam_equals_frozen_quarter_gate(self):
        cfg = NetworkConfig(channels=(4, 8, 16, 32, 64))
        model = Detector(cfg, seed=3)
        for site in cfg.cbam_sites:
            blk = getattr(model, site)
            for p in (blk.cbam.channel.w0, blk.cbam.channel.w1, blk.cbam.spatial.kernel):
                p.data[...] = 0.0
        x = Tensor(np.random.default_rng(21).uniform(0, 1, (1, 3, 160, 160))
                   .astype(np.float32))
        with T.no_grad():
            zeroed = [r.data.copy() for r in model.forward(x)]
            for site in cfg.cbam_sites:
                getattr(model, site).fixed_gate = 0.25
            frozen = [r.data.copy() for r in model.forward(x)]
        for a, b in zip(zeroed, frozen):
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_gradient_check_two_block_toy(self):
        # stem CBS + attention-modified C3 + 1x1 head on a small map
        cbs = CBS(2, 3, 3, rng=rng64(22), dtype=np.float64)
        mod = C3Cbam(3, 3, rng=rng64(23), dtype=np.float64)
        head = np.random.default_rng(24).normal(size=(1, 3, 1, 1))

        def f(t):
            return T.tsum(T.conv2d(mod(cbs(t, True), True), Tensor(head)))

        assert T.gradient_check(f, Tensor(rng64(25).normal(size=(1, 2, 4, 4)))) <= 1e-4


class TestDecode:
    def make_raw(self, cfg, fill=-20.0):
        raws = []
        A, C, S = cfg.anchors_per_scale, cfg.num_classes, cfg.input_size
        for stride in cfg.strides:
            g = S // stride
            raws.append(np.full((1, A * (5 + C), g, g), fill, dtype=np.float32))
        return raws

    def test_threshold_one_empty(self):
        cfg = NetworkConfig()
        raw = self.make_raw(cfg, fill=10.0)
        assert decode(raw, cfg, conf_threshold=1.0) == [[]]

    def test_zero_logits_at_origin_cell(self):
        cfg = NetworkConfig()
        raw = self.make_raw(cfg)
        raw[0][0, 0:9, 0, 0] = 0.0  # anchor 0 at cell (0,0), scale stride 8
        dets = decode(raw, cfg, conf_threshold=0.2)[0]
        assert len(dets) == 1
        d = dets[0]
        anchor_w, anchor_h = cfg.anchors[0][0]
        # center 0.5*stride = 4 with anchor-sized extent, clipped at the edge
        assert d.box.x1 == 0.0 and d.box.x2 == pytest.approx(4 + anchor_w / 2, abs=1e-4)
        assert d.box.y1 == 0.0 and d.box.y2 == pytest.approx(4 + anchor_h / 2, abs=1e-4)
        assert d.confidence == pytest.approx(0.25, abs=1e-6)

    def test_boxes_always_inside_image(self):
        cfg = NetworkConfig()
        rng = np.random.default_rng(26)
        for _ in range(10):
            raw = [rng.normal(scale=3.0, size=r.shape).astype(np.float32)
                   for r in self.make_raw(cfg)]
            for dets in decode(raw, cfg, conf_threshold=0.3):
                for d in dets:
                    assert 0 <= d.box.x1 < d.box.x2 <= cfg.input_size
                    assert 0 <= d.box.y1 < d.box.y2 <= cfg.input_size

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(channels=(0, 8, 16, 32, 64))
        with pytest.raises(ValueError):
            NetworkConfig(anchors=[[(0.0, 5.0)]] * 3)
        with pytest.raises(ValueError):
            NetworkConfig(cbam_sites=("nope",))
