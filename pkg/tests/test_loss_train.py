import math
from types import SimpleNamespace

import numpy as np
import pytest

from pavedet import tensor as T
from pavedet.data import (DatasetManifest, LabelRecord, SyntheticConfig,
                          generate_synthetic, split)
from pavedet.loss import (ANCHOR_RATIO_LIMIT, ScaleTargets, TargetError,
                          _ciou, assign_targets, compute_loss)
from pavedet.model import Detector, NetworkConfig
from pavedet.tensor import Tensor
from pavedet.train import (SGD, TrainConfig, _hflip, cosine_lr, evaluate_model,
                           fit, kmeans_anchors, load_model_state, model_state)


def small_config():
    return NetworkConfig(input_size=32)


def logit(s):
    return math.log(s / (1.0 - s))


class TestAssignment:
    def test_center_cell_always_assigned(self):
        cfg = small_config()
        rec = LabelRecord(0, 0.5, 0.5, 0.5, 0.5)
        targets = assign_targets([[rec]], cfg)
        s0 = targets[0]
        assert len(s0.flat_idx) > 0
        # every assigned anchor satisfies the ratio rule
        for k in range(len(s0.flat_idx)):
            w, h = s0.t_wh[k]
            aw, ah = s0.anchor_wh[k]
            assert max(w / aw, aw / w, h / ah, ah / h) < ANCHOR_RATIO_LIMIT

    def test_oversized_ratio_excluded(self):
        cfg = small_config()
        # a 3x3 px box: every stride-8 anchor has ratio >= 4 against it
        rec = LabelRecord(0, 0.5, 0.5, 3 / 32, 3 / 32)
        targets = assign_targets([[rec]], cfg)
        assert all(len(t.flat_idx) == 0 for t in targets)

    def test_against_brute_force_recount(self):
        cfg = small_config()
        rng = np.random.default_rng(0)
        for _ in range(100):
            recs = []
            for _ in range(int(rng.integers(0, 4))):
                w, h = rng.uniform(0.1, 0.8, 2)
                cx = rng.uniform(w / 2, 1 - w / 2)
                cy = rng.uniform(h / 2, 1 - h / 2)
                recs.append(LabelRecord(int(rng.integers(0, 4)), cx, cy, w, h))
            targets = assign_targets([recs], cfg)
            for si, stride in enumerate(cfg.strides):
                g = cfg.input_size // stride
                expected = 0
                for rec in recs:
                    wpx, hpx = rec.w * cfg.input_size, rec.h * cfg.input_size
                    n_anchors = sum(
                        1 for aw, ah in cfg.anchors[si]
                        if max(wpx / aw, aw / wpx, hpx / ah, ah / hpx) < 4.0)
                    gx, gy = rec.cx * g, rec.cy * g
                    cx, cy = min(int(gx), g - 1), min(int(gy), g - 1)
                    n_cells = 1
                    if (gx - cx < 0.5 and cx > 0) or (gx - cx >= 0.5 and cx < g - 1):
                        n_cells += 1
                    if (gy - cy < 0.5 and cy > 0) or (gy - cy >= 0.5 and cy < g - 1):
                        n_cells += 1
                    expected += n_anchors * n_cells
                assert len(targets[si].flat_idx) == expected

    def test_flat_indices_in_range(self):
        cfg = small_config()
        recs = [LabelRecord(1, 0.3, 0.7, 0.4, 0.4), LabelRecord(2, 0.8, 0.2, 0.3, 0.3)]
        for t in assign_targets([recs, recs], cfg):
            assert t.num_cells == 2 * cfg.anchors_per_scale * t.grid * t.grid
            if len(t.flat_idx):
                assert t.flat_idx.min() >= 0 and t.flat_idx.max() < t.num_cells

    def test_degenerate_box_rejected(self):
        bad = SimpleNamespace(class_id=0, cx=0.5, cy=0.5, w=0.0, h=0.1)
        with pytest.raises(TargetError):
            assign_targets([[bad]], small_config())


def identity_targets():
    return ScaleTargets(grid=4, stride=8,
                        flat_idx=np.array([0]),
                        cell_xy=np.array([[1.0, 1.0]]),
                        t_xy=np.array([[1.5, 1.5]]),
                        t_wh=np.array([[16.0, 16.0]]),
                        anchor_wh=np.array([[16.0, 16.0]]),
                        t_cls=np.array([0]), num_cells=48)


class TestCiou:
    def test_identical_boxes_give_one(self):
        tgt = identity_targets()
        one = _ciou(Tensor(np.array([1.5])), Tensor(np.array([1.5])),
                    Tensor(np.array([2.0])), Tensor(np.array([2.0])), tgt)
        assert one.data[0] == pytest.approx(1.0, abs=1e-6)

    def test_disjoint_boxes_negative(self):
        tgt = identity_targets()
        v = _ciou(Tensor(np.array([10.0])), Tensor(np.array([10.0])),
                  Tensor(np.array([2.0])), Tensor(np.array([2.0])), tgt)
        assert v.data[0] < 0.0

    def test_bounded_below_by_minus_three(self):
        # iou in [0,1], distance ratio in [0,1], aspect penalty in [0,1]
        rng = np.random.default_rng(1)
        tgt = identity_targets()
        for _ in range(50):
            v = _ciou(Tensor(rng.uniform(-5, 5, 1)), Tensor(rng.uniform(-5, 5, 1)),
                      Tensor(rng.uniform(0.1, 8, 1)), Tensor(rng.uniform(0.1, 8, 1)),
                      tgt)
            assert -3.0 <= v.data[0] <= 1.0


def zero_raw(cfg, dtype=np.float32):
    A, C = cfg.anchors_per_scale, cfg.num_classes
    return [Tensor(np.zeros((1, A * (5 + C), cfg.input_size // s, cfg.input_size // s),
                            dtype=dtype)) for s in cfg.strides]


class TestComputeLoss:
    def test_no_objects_obj_is_log_two(self):
        # zero logits, all-background targets: BCE(0, 0) = log 2 everywhere
        cfg = small_config()
        targets = assign_targets([[]], cfg)
        b = compute_loss(zero_raw(cfg), targets, cfg)
        assert b.box == 0.0 and b.cls == 0.0 and b.num_positives == 0
        assert b.obj == pytest.approx(math.log(2.0), abs=1e-6)
        assert b.total == pytest.approx(math.log(2.0), abs=1e-6)

    def test_total_is_exact_weighted_sum(self):
        cfg = small_config()
        rec = LabelRecord(1, 0.5, 0.5, 0.5, 0.5)
        targets = assign_targets([[rec]], cfg)
        raw = [Tensor(np.random.default_rng(2).normal(size=r.shape).astype(np.float32))
               for r in zero_raw(cfg)]
        b = compute_loss(raw, targets, cfg, 0.05, 1.0, 0.5)
        assert b.total == 0.05 * b.box + 1.0 * b.obj + 0.5 * b.cls

    def test_saturated_perfect_prediction_near_zero(self):
        # logits tuned so every positive decodes exactly onto its target and
        # obj/cls probabilities saturate: all three components collapse
        cfg = small_config()
        A, C = cfg.anchors_per_scale, cfg.num_classes
        rec = LabelRecord(2, 0.5, 0.5, 0.5, 0.5)
        targets = assign_targets([[rec]], cfg)
        raw = zero_raw(cfg, dtype=np.float64)
        for r in raw:
            r.data.reshape(1, A, 5 + C, *r.shape[2:])[:, :, 4] = -30.0
        for si, tgt in enumerate(targets):
            g = tgt.grid
            view = raw[si].data.reshape(1, A, 5 + C, g, g)
            for k, flat in enumerate(tgt.flat_idx):
                ai = (flat // (g * g)) % A
                cx, cy = int(tgt.cell_xy[k, 0]), int(tgt.cell_xy[k, 1])
                gx, gy = tgt.t_xy[k]
                view[0, ai, 0, cy, cx] = logit((gx - cx + 0.5) / 2)
                view[0, ai, 1, cy, cx] = logit((gy - cy + 0.5) / 2)
                view[0, ai, 2, cy, cx] = logit(
                    0.5 * math.sqrt(tgt.t_wh[k, 0] / tgt.anchor_wh[k, 0]))
                view[0, ai, 3, cy, cx] = logit(
                    0.5 * math.sqrt(tgt.t_wh[k, 1] / tgt.anchor_wh[k, 1]))
                view[0, ai, 4, cy, cx] = 30.0
                view[0, ai, 5:, cy, cx] = -30.0
                view[0, ai, 5 + tgt.t_cls[k], cy, cx] = 30.0
        b = compute_loss(raw, targets, cfg, soft_obj_targets=False)
        assert b.box < 1e-3 and b.obj < 1e-3 and b.cls < 1e-3
        assert b.total < 1e-3

    def test_soft_targets_use_detached_ciou(self):
        cfg = small_config()
        rec = LabelRecord(0, 0.5, 0.5, 0.5, 0.5)
        targets = assign_targets([[rec]], cfg)
        arrs = [np.random.default_rng(20).normal(size=r.shape).astype(np.float32)
                for r in zero_raw(cfg)]
        soft = compute_loss([Tensor(a.copy()) for a in arrs], targets, cfg,
                            soft_obj_targets=True)
        hard = compute_loss([Tensor(a.copy()) for a in arrs], targets, cfg,
                            soft_obj_targets=False)
        # identical except the objectness component
        assert soft.box == pytest.approx(hard.box, abs=1e-7)
        assert soft.cls == pytest.approx(hard.cls, abs=1e-7)
        assert soft.obj != pytest.approx(hard.obj, abs=1e-6)

    def test_wrong_channel_count_rejected(self):
        cfg = small_config()
        raw = [Tensor(np.zeros((1, 7, cfg.input_size // s, cfg.input_size // s),
                               dtype=np.float32)) for s in cfg.strides]
        with pytest.raises(T.ShapeError):
            compute_loss(raw, assign_targets([[]], cfg), cfg)

    def test_gradient_check_through_loss(self):
        cfg = small_config()
        rec = LabelRecord(1, 0.45, 0.55, 0.5, 0.4)
        targets = assign_targets([[rec]], cfg)
        A, C = cfg.anchors_per_scale, cfg.num_classes
        rng = np.random.default_rng(3)
        fixed = [rng.normal(scale=0.5, size=(1, A * (5 + C), 2, 2)),
                 rng.normal(scale=0.5, size=(1, A * (5 + C), 1, 1))]

        # hard objectness targets keep the loss a fixed function of the
        # predictions, which is what finite differences can verify
        def f(t):
            raw = [t, Tensor(fixed[0].copy()), Tensor(fixed[1].copy())]
            return compute_loss(raw, targets, cfg,
                                soft_obj_targets=False).total_tensor

        x = Tensor(rng.normal(scale=0.5, size=(1, A * (5 + C), 4, 4)))
        assert T.gradient_check(f, x) <= 1e-4


class TestSGD:
    def test_single_step_hand_oracle(self):
        p = Tensor(np.array([1.0, 2.0]))
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([0.5, -1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 - 0.05, 2.0 + 0.1], atol=1e-12)

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]))
        opt = SGD([p], lr=1.0, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()                    # v = 1, p = -1
        p.grad = np.array([1.0])
        opt.step()                    # v = 1.5, p = -2.5
        assert p.data[0] == pytest.approx(-2.5, abs=1e-12)

    def test_weight_decay(self):
        p = Tensor(np.array([2.0]))
        opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step()                    # g = 0 + 0.1*2 = 0.2
        assert p.data[0] == pytest.approx(2.0 - 0.02, abs=1e-12)

    def test_zero_lr_bit_identity(self):
        rng = np.random.default_rng(4)
        p = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
        before = p.data.copy()
        opt = SGD([p], lr=0.0, momentum=0.9)
        p.grad = rng.normal(size=(3, 3)).astype(np.float32)
        opt.step()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_none_grad_skipped(self):
        p = Tensor(np.array([5.0]))
        opt = SGD([p], lr=0.1)
        opt.step()
        assert p.data[0] == 5.0


class TestSchedule:
    def test_warmup_ramp(self):
        assert cosine_lr(1.0, 0, 10, 2) == pytest.approx(0.5)
        assert cosine_lr(1.0, 1, 10, 2) == pytest.approx(1.0)

    def test_peak_then_floor(self):
        assert cosine_lr(1.0, 2, 10, 2) == pytest.approx(1.0)
        vals = [cosine_lr(1.0, e, 10, 2) for e in range(2, 11)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[-1] == pytest.approx(0.05)

    def test_floor_is_five_percent(self):
        for e in range(30):
            assert cosine_lr(0.01, e, 30, 3) >= 0.05 * 0.01 - 1e-12


class TestKmeansAnchors:
    def test_recovers_separated_clusters(self):
        rng = np.random.default_rng(5)
        truth = np.array([[8, 8], [10, 20], [20, 12], [30, 60], [60, 40],
                          [60, 120], [120, 90], [160, 200], [100, 330]], float)
        pts = np.vstack([t + rng.normal(0, 0.5, (40, 2)) for t in truth])
        anchors = kmeans_anchors(pts, 3, 3, seed=0)
        flat = sorted((w * h, w, h) for scale in anchors for w, h in scale)
        want = sorted((w * h, w, h) for w, h in truth)
        for (a_area, aw, ah), (t_area, tw, th) in zip(flat, want):
            assert abs(aw - tw) < 2 and abs(ah - th) < 2

    def test_areas_ascend_across_scales(self):
        rng = np.random.default_rng(6)
        anchors = kmeans_anchors(rng.uniform(4, 150, (200, 2)), 3, 3, seed=1)
        areas = [w * h for scale in anchors for w, h in scale]
        assert areas == sorted(areas)

    def test_fewer_boxes_than_clusters(self):
        anchors = kmeans_anchors(np.array([[10.0, 20.0]]), 3, 3, seed=2)
        assert len(anchors) == 3 and all(len(s) == 3 for s in anchors)
        assert all(w > 0 and h > 0 for s in anchors for w, h in s)


class TestAugment:
    def test_hflip_involution(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 255, (20, 30, 3), dtype=np.uint8)
        recs = [LabelRecord(0, 0.3, 0.4, 0.2, 0.2)]
        img2, recs2 = _hflip(*_hflip(img, recs))
        np.testing.assert_array_equal(img2, img)
        assert recs2[0].cx == pytest.approx(0.3)

    def test_hflip_mirrors_center(self):
        _, recs = _hflip(np.zeros((4, 4, 3), np.uint8),
                         [LabelRecord(1, 0.2, 0.6, 0.1, 0.1)])
        assert recs[0].cx == pytest.approx(0.8)
        assert recs[0].cy == 0.6


def tiny_model(seed=0):
    cfg = NetworkConfig(input_size=32, channels=(4, 4, 8, 8, 8), cbam_reduction=4)
    return Detector(cfg, seed=seed)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = SyntheticConfig(num_images=8, image_size=32, seed=0)
    m = generate_synthetic(cfg, root)
    split(m, ratio=0.75, seed=0)
    m.save()
    return m


class TestStateAndFit:
    def test_state_roundtrip_restores_predictions(self):
        model = tiny_model()
        x = Tensor(np.random.default_rng(8).uniform(0, 1, (1, 3, 32, 32))
                   .astype(np.float32))
        with T.no_grad():
            before = [r.data.copy() for r in model.forward(x)]
        state = model_state(model)
        for p in model.parameters():
            p.data += 0.1
        load_model_state(model, state)
        with T.no_grad():
            after = [r.data.copy() for r in model.forward(x)]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_fit_seeded_reproducibility(self, tiny_dataset):
        tc = TrainConfig(epochs=2, batch_size=4, lr=0.01, warmup_epochs=1, seed=3)
        r1 = fit(tiny_model(seed=1), tiny_dataset, tc, log=lambda *_: None)
        r2 = fit(tiny_model(seed=1), tiny_dataset, tc, log=lambda *_: None)
        assert [(e.epoch, e.split, e.total) for e in r1.history] == \
            [(e.epoch, e.split, e.total) for e in r2.history]
        assert r1.best_epoch == r2.best_epoch

    def test_fit_records_both_splits(self, tiny_dataset):
        tc = TrainConfig(epochs=1, batch_size=4, seed=0)
        r = fit(tiny_model(seed=2), tiny_dataset, tc, log=lambda *_: None)
        assert {e.split for e in r.history} == {"train", "val"}
        assert all(math.isfinite(e.total) for e in r.history)
        assert r.best_state  # a best checkpoint was captured

    def test_history_file_format(self, tiny_dataset, tmp_path):
        tc = TrainConfig(epochs=1, batch_size=4, seed=0)
        r = fit(tiny_model(seed=2), tiny_dataset, tc, log=lambda *_: None)
        out = tmp_path / "history.txt"
        r.write_history(out)
        lines = out.read_text().splitlines()
        assert lines[0] == "epoch split box obj cls total"
        assert len(lines) == 1 + len(r.history)

    def test_evaluate_model_shapes(self, tiny_dataset):
        model = tiny_model(seed=4)
        from pavedet.train import _load_split
        images, labels = _load_split(tiny_dataset, "val")
        report, dets, gts = evaluate_model(model, images, labels)
        assert len(dets) == len(gts) == len(images)
        assert 0.0 <= report.map50 <= 1.0

    def test_empty_train_split_rejected(self, tmp_path):
        cfg = SyntheticConfig(num_images=2, image_size=32, seed=1)
        m = generate_synthetic(cfg, tmp_path)
        m.split = {e.stem: "val" for e in m.entries}
        with pytest.raises(ValueError):
            fit(tiny_model(), m, TrainConfig(epochs=1))
