import threading

import numpy as np
import pytest

from pavedet import tensor as T
from pavedet.gradcam import (CAPTURABLE_LAYERS, DEFAULT_LAYER, Heatmap,
                             colormap_table, compute_gradcam, overlay)
from pavedet.model import Detector, NetworkConfig
from pavedet.tensor import Tensor


def tiny_model(seed=0):
    cfg = NetworkConfig(input_size=32, channels=(4, 4, 8, 8, 8), cbam_reduction=4)
    return Detector(cfg, seed=seed)


def make_image(seed=0, size=32):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (1, 3, size, size))
                  .astype(np.float32))


class TestComputeGradcam:
    def test_shape_bounds_and_normalization(self):
        model = tiny_model()
        hm, kept = compute_gradcam(model, make_image(), conf_threshold=1e-4)
        assert kept  # untrained model emits low-confidence detections
        assert hm.values.shape == (32, 32)
        assert hm.values.min() >= 0.0 and hm.values.max() <= 1.0
        # min-max normalized: any non-trivial map peaks at exactly 1
        if hm.values.max() > 0:
            assert hm.values.max() == pytest.approx(1.0)

    def test_no_detections_gives_zero_map(self):
        model = tiny_model()
        hm, kept = compute_gradcam(model, make_image(), conf_threshold=0.999)
        assert kept == []
        np.testing.assert_array_equal(hm.values, 0.0)

    def test_index_out_of_range_gives_zero_map(self):
        model = tiny_model()
        hm, kept = compute_gradcam(model, make_image(), detection_index=10_000,
                                   conf_threshold=1e-4)
        np.testing.assert_array_equal(hm.values, 0.0)
        assert len(kept) < 10_000

    def test_deterministic(self):
        model = tiny_model(seed=1)
        a, _ = compute_gradcam(model, make_image(1), conf_threshold=1e-4)
        b, _ = compute_gradcam(model, make_image(1), conf_threshold=1e-4)
        np.testing.assert_array_equal(a.values, b.values)

    def test_unknown_layer_rejected(self):
        with pytest.raises(ValueError):
            compute_gradcam(tiny_model(), make_image(), layer="stem")

    def test_all_capturable_layers_work(self):
        model = tiny_model(seed=2)
        img = make_image(2)
        for layer in CAPTURABLE_LAYERS:
            hm, _ = compute_gradcam(model, img, layer=layer, conf_threshold=1e-4)
            assert hm.source_layer == layer
            assert hm.values.shape == (32, 32)

    def test_leaves_model_grads_clean(self):
        model = tiny_model(seed=3)
        compute_gradcam(model, make_image(3), conf_threshold=1e-4)
        assert all(p.grad is None for p in model.parameters())

    def test_three_dim_image_accepted(self):
        model = tiny_model(seed=4)
        img = Tensor(np.random.default_rng(4).uniform(0, 1, (3, 32, 32))
                     .astype(np.float32))
        hm, _ = compute_gradcam(model, img, conf_threshold=1e-4)
        assert hm.values.shape == (32, 32)

    def test_concurrent_calls_match_sequential(self):
        model = tiny_model(seed=5)
        images = [make_image(10 + i) for i in range(4)]
        sequential = [compute_gradcam(model, img, conf_threshold=1e-4)[0].values
                      for img in images]
        results = [None] * 4

        def work(i):
            results[i] = compute_gradcam(model, images[i], conf_threshold=1e-4)[0].values

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for got, want in zip(results, sequential):
            np.testing.assert_array_equal(got, want)

    def test_does_not_leak_tape_state(self):
        model = tiny_model(seed=6)
        compute_gradcam(model, make_image(6), conf_threshold=0.999)  # empty path
        compute_gradcam(model, make_image(6), conf_threshold=1e-4)
        # a fresh, unrelated backward still works afterwards
        x = Tensor(np.array([2.0]), requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [4.0])


class TestColormap:
    def test_table_shape_and_dtype(self):
        table = colormap_table()
        assert table.shape == (256, 3) and table.dtype == np.uint8

    def test_cold_end_is_blue_hot_end_is_red(self):
        table = colormap_table()
        r0, g0, b0 = table[0]
        r1, g1, b1 = table[255]
        assert b0 > r0 and b0 > g0
        assert r1 > g1 and r1 > b1

    def test_midpoint_formula(self):
        # at t = 0.5: r = 0.5, g = 1.0, b = 0.5 before quantization
        table = colormap_table()
        t = 127.5 / 255.0
        assert abs(int(table[127][1]) - 255) <= 3  # green saturates mid-scale


class TestOverlay:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.img = rng.integers(0, 255, (8, 8, 3), dtype=np.uint8)
        self.hm = Heatmap(rng.uniform(0, 1, (8, 8)), "c3_4", 0)

    def test_alpha_zero_is_exact_input_copy(self):
        out = overlay(self.hm, self.img, alpha=0.0)
        np.testing.assert_array_equal(out, self.img)
        assert out is not self.img

    def test_alpha_one_is_exact_colormap(self):
        out = overlay(self.hm, self.img, alpha=1.0)
        idx = np.clip(np.round(self.hm.values * 255), 0, 255).astype(np.uint8)
        np.testing.assert_array_equal(out, colormap_table()[idx])

    def test_blend_between_endpoints(self):
        out = overlay(self.hm, self.img, alpha=0.5).astype(int)
        colored = overlay(self.hm, self.img, 1.0).astype(int)
        img = self.img.astype(int)
        assert np.all(out >= np.minimum(img, colored) - 1)
        assert np.all(out <= np.maximum(img, colored) + 1)

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            overlay(self.hm, self.img, alpha=1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            overlay(self.hm, np.zeros((4, 4, 3), dtype=np.uint8))
