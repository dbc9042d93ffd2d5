from __future__ import annotations

import numpy as np
import pytest

from terrafed.errors import UndefinedMetricError
from terrafed.metrics import (
    Confusion,
    evaluate,
    forgetting,
    gradient_conflict,
    heterogeneity_estimate,
    iou_metrics,
    layer_sensitivity,
)
from terrafed.segnet import SegNet
from terrafed.terrain import IGNORE_VALUE, gen_terrain


def make_net(classes=4, seed=0):
    return SegNet.init_random(classes, np.random.default_rng(seed))


class TestIoU:
    def test_worked_example(self):
        preds = [np.array([[0, 1], [1, 1]])]
        labels = [np.array([[0, 1], [0, 1]])]
        per_class, miou = iou_metrics(preds, labels, 2)
        assert per_class[0] == pytest.approx(1 / 2)
        assert per_class[1] == pytest.approx(2 / 3)
        assert miou == pytest.approx(7 / 12)

    def test_perfect_predictions(self):
        labels = [np.random.default_rng(0).integers(0, 3, size=(5, 5))]
        per_class, miou = iou_metrics(labels, labels, 3)
        assert miou == 1.0
        assert all(v == 1.0 for v in per_class if v is not None)

    def test_absent_class_excluded_not_zero(self):
        preds = [np.zeros((3, 3), dtype=np.int64)]
        labels = [np.zeros((3, 3), dtype=np.int64)]
        per_class, miou = iou_metrics(preds, labels, 5)
        assert per_class[0] == 1.0
        assert per_class[1] is None
        assert miou == 1.0

    def test_ignored_pixels_contribute_nothing(self):
        preds = [np.array([[0, 1]])]
        labels = [np.array([[0, IGNORE_VALUE]])]
        per_class, miou = iou_metrics(preds, labels, 2)
        assert per_class[0] == 1.0
        assert per_class[1] is None

    def test_all_excluded_raises(self):
        with pytest.raises(UndefinedMetricError):
            iou_metrics([np.zeros((2, 2), dtype=np.int64)],
                        [np.full((2, 2), IGNORE_VALUE)], 3)

    def test_matches_direct_count_oracle(self):
        rng = np.random.default_rng(3)
        preds = [rng.integers(0, 4, size=(6, 6)) for _ in range(3)]
        labels = [rng.integers(0, 4, size=(6, 6)) for _ in range(3)]
        per_class, _ = iou_metrics(preds, labels, 4)
        for c in range(4):
            tp = fp = fn = 0
            for p, lab in zip(preds, labels):
                tp += int(np.sum((p == c) & (lab == c)))
                fp += int(np.sum((p == c) & (lab != c)))
                fn += int(np.sum((p != c) & (lab == c)))
            assert per_class[c] == pytest.approx(tp / (tp + fp + fn))

    def test_iou_bounds(self):
        rng = np.random.default_rng(9)
        preds = [rng.integers(0, 3, size=(8, 8))]
        labels = [rng.integers(0, 3, size=(8, 8))]
        per_class, miou = iou_metrics(preds, labels, 3)
        assert 0.0 <= miou <= 1.0
        for v in per_class:
            assert v is None or 0.0 <= v <= 1.0


class TestForgetting:
    def test_arithmetic(self):
        log = {0: {0: (0.4, 0.8)}, 1: {0: (0.9, 0.6), 1: (0.3, 0.7)}}
        table = forgetting(log)
        assert table.loss_delta[1][0] == pytest.approx(0.5)
        assert table.miou_delta[1][0] == pytest.approx(0.2)
        assert table.cumulative_loss[1] == pytest.approx(0.5)

    def test_identical_models_give_zero(self):
        log = {0: {0: (0.4, 0.8)}, 1: {0: (0.4, 0.8), 1: (0.2, 0.9)}}
        table = forgetting(log)
        assert table.loss_delta[1][0] == 0.0
        assert table.miou_delta[1][0] == 0.0

    def test_three_task_log_matches_hand_table(self):
        log = {
            0: {0: (0.30, 0.90)},
            1: {0: (0.50, 0.80), 1: (0.25, 0.85)},
            2: {0: (0.80, 0.60), 1: (0.40, 0.70), 2: (0.20, 0.88)},
        }
        table = forgetting(log)
        assert table.loss_delta[2][0] == pytest.approx(0.50)
        assert table.loss_delta[2][1] == pytest.approx(0.15)
        assert table.miou_delta[2][0] == pytest.approx(0.30)
        assert table.miou_delta[2][1] == pytest.approx(0.15)
        assert table.cumulative_loss[2] == pytest.approx((0.50 + 0.15) / 2)
        assert table.cumulative_miou[2] == pytest.approx((0.30 + 0.15) / 2)

    def test_missing_cell_raises(self):
        with pytest.raises(UndefinedMetricError):
            forgetting({0: {0: (0.1, 0.9)}, 1: {1: (0.1, 0.9)}})


class TestLayerSensitivity:
    def test_identical_models_degenerate(self):
        net = make_net(seed=5)
        test = [gen_terrain(100 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(4)]
        out = layer_sensitivity(net, net, test)
        assert out.degenerate
        assert all(v == 0.0 for v in out.shares.values())

    def test_unsigned_shares_sum_to_one(self):
        a, b = make_net(seed=1), make_net(seed=2)
        test = [gen_terrain(200 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(6)]
        out = layer_sensitivity(a, b, test)
        if not out.degenerate:
            assert sum(abs(v) for v in out.shares.values()) == pytest.approx(1.0)


class TestGradientDiagnostics:
    def test_same_batches_zero_conflict(self):
        net = make_net(seed=3)
        batch = [gen_terrain(300 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(3)]
        conflict = gradient_conflict(net, batch, batch)
        assert all(v == 0.0 for v in conflict.values())

    def test_conflict_batch_order_invariant(self):
        net = make_net(seed=4)
        a = [gen_terrain(400 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(4)]
        b = [gen_terrain(500 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(4)]
        c1 = gradient_conflict(net, a, b)
        c2 = gradient_conflict(net, list(reversed(a)), list(reversed(b)))
        for k in c1:
            assert c1[k] == pytest.approx(c2[k], rel=1e-9)

    def test_identical_shards_zero_heterogeneity(self):
        net = make_net(seed=6)
        shard = [gen_terrain(600 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(3)]
        assert heterogeneity_estimate([shard, shard, shard], net) == 0.0

    def test_heterogeneity_client_relabel_invariant(self):
        net = make_net(seed=7)
        shards = [
            [gen_terrain(700 + 10 * k + i, (0, 1, 2, 3), 8, 8, 4) for i in range(3)]
            for k in range(3)
        ]
        a = heterogeneity_estimate(shards, net)
        b = heterogeneity_estimate(list(reversed(shards)), net)
        assert a == pytest.approx(b, rel=1e-12)
        assert a >= 0.0

    def test_low_beta_increases_heterogeneity(self):
        """Dirichlet beta=0.1 shards disagree more than beta=10 shards."""
        from terrafed.terrain import dirichlet_partition

        net = make_net(classes=4, seed=8)
        samples = [gen_terrain(800 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(60)]
        wins = 0
        for seed in range(10):
            def estimate(beta):
                shards = dirichlet_partition(samples, 4, beta, seed)
                groups = [s.samples for s in shards if s.samples]
                return heterogeneity_estimate(groups, net)

            if estimate(0.1) > estimate(10.0):
                wins += 1
        assert wins >= 9, wins


def test_evaluate_reports_loss_and_miou():
    net = make_net(seed=9)
    samples = [gen_terrain(900 + i, (0, 1, 2, 3), 8, 8, 4) for i in range(4)]
    out = evaluate(net, samples, 4)
    assert out.loss > 0.0
    assert 0.0 <= out.miou <= 1.0
    assert len(out.per_class_iou) == 4


def test_confusion_accumulates_over_updates():
    conf = Confusion(2)
    conf.update(np.array([[0, 1]]), np.array([[0, 0]]))
    conf.update(np.array([[1, 1]]), np.array([[1, 1]]))
    per_class, _ = conf.iou()
    assert per_class[0] == pytest.approx(1 / 2)
    assert per_class[1] == pytest.approx(2 / 3)
