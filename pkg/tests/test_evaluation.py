"""Metric tests: confusion accumulation, mIoU/mAcc, PSNR, depth error."""

import math

import numpy as np
import pytest

from featurefield.evaluation import (ConfusionMatrix, EvaluationError,
                                     depth_mae, format_metrics_table,
                                     mask_background, miou_macc, psnr,
                                     write_metrics_json)


class TestAccumulate:
    def test_perfect_prediction_diagonal(self):
        cm = ConfusionMatrix(3)
        pred = np.repeat([0, 1, 2], [40, 30, 30])
        cm.accumulate(pred, pred)
        assert np.trace(cm.counts) == 100
        assert cm.counts.sum() == 100

    def test_ignore_index_skipped(self):
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 1]), np.array([0, -1]))
        assert cm.total == 1
        assert cm.counts[0, 0] == 1

    def test_hand_counted_matrix(self):
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 0, 0, 0]), np.array([0, 0, 1, 1]))
        np.testing.assert_array_equal(cm.counts, [[2, 0], [2, 0]])

    def test_out_of_range_prediction_rejected(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(EvaluationError, match="outside"):
            cm.accumulate(np.array([2]), np.array([0]))

    def test_length_mismatch(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(EvaluationError):
            cm.accumulate(np.array([0, 1]), np.array([0]))

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 3, 200)
        ref = rng.integers(0, 3, 200)
        a = ConfusionMatrix(3).accumulate(pred, ref)
        b = ConfusionMatrix(3)
        order = rng.permutation(200)
        b.accumulate(pred[order], ref[order])
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_merge_is_addition(self):
        a = ConfusionMatrix(2).accumulate(np.array([0]), np.array([0]))
        b = ConfusionMatrix(2).accumulate(np.array([1]), np.array([0]))
        a.merge(b)
        np.testing.assert_array_equal(a.counts, [[1, 1], [0, 0]])


class TestMiouMacc:
    def test_perfect_prediction(self):
        cm = ConfusionMatrix(3)
        pred = np.repeat([0, 1, 2], 10)
        cm.accumulate(pred, pred)
        m = miou_macc(cm)
        assert m.miou == 1.0 and m.macc == 1.0

    def test_hand_computed_values(self):
        # cm [[2,0],[2,0]]: IoU_A = 2/4, IoU_B = 0, mIoU = 0.25; mAcc = 0.5
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 0, 0, 0]), np.array([0, 0, 1, 1]))
        m = miou_macc(cm)
        assert m.miou == pytest.approx(0.25)
        assert m.macc == pytest.approx(0.5)
        assert m.per_class_iou[0] == pytest.approx(0.5)
        assert m.per_class_iou[1] == 0.0

    def test_absent_class_excluded_from_mean(self):
        cm = ConfusionMatrix(3)
        cm.accumulate(np.array([0, 1]), np.array([0, 1]))  # class 2 never appears
        m = miou_macc(cm)
        assert not m.present[2]
        assert math.isnan(m.per_class_iou[2])
        assert m.miou == 1.0  # mean over the two present classes only

    def test_empty_matrix_rejected(self):
        with pytest.raises(EvaluationError, match="empty"):
            miou_macc(ConfusionMatrix(2))

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(3)
        cm = ConfusionMatrix(4)
        cm.accumulate(rng.integers(0, 4, 500), rng.integers(0, 4, 500))
        m = miou_macc(cm)
        assert 0.0 <= m.miou <= 1.0
        assert 0.0 <= m.macc <= 1.0

    def test_relabeling_consistency(self):
        rng = np.random.default_rng(4)
        pred = rng.integers(0, 3, 300)
        ref = rng.integers(0, 3, 300)
        base = miou_macc(ConfusionMatrix(3).accumulate(pred, ref))
        perm = np.array([2, 0, 1])
        permuted = miou_macc(ConfusionMatrix(3).accumulate(perm[pred], perm[ref]))
        assert base.miou == pytest.approx(permuted.miou)
        assert base.macc == pytest.approx(permuted.macc)


class TestMaskBackground:
    def test_background_predictions_become_ignore(self):
        ref = np.array([0, 1, 2])
        pred = np.array([0, 3, 2])
        masked = mask_background(ref, pred, background_index=3)
        np.testing.assert_array_equal(masked, [0, -1, 2])
        np.testing.assert_array_equal(ref, [0, 1, 2])  # input untouched


class TestPsnr:
    def test_identical_images_infinite(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(img, img) == math.inf

    def test_uniform_error_analytic(self):
        ref = np.zeros((16, 16))
        img = np.full((16, 16), 0.1)
        assert psnr(img, ref) == pytest.approx(20.0)

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)))


class TestDepthMae:
    def test_masked_average(self):
        depth = np.array([1.0, 5.0])
        ref = np.array([1.5, 0.0])
        assert depth_mae(depth, ref, np.array([True, False])) == pytest.approx(0.5)

    def test_all_invalid_rejected(self):
        with pytest.raises(EvaluationError, match="no valid"):
            depth_mae(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))

    def test_no_mask_means_all_valid(self):
        assert depth_mae(np.array([2.0]), np.array([3.0])) == pytest.approx(1.0)


class TestReports:
    def test_table_contains_classes_and_means(self):
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 1, 1]), np.array([0, 1, 0]))
        text = format_metrics_table(["wall", "box"], miou_macc(cm))
        assert "wall" in text and "box" in text
        assert "mIoU" in text and "mAcc" in text

    def test_json_report(self, tmp_path):
        import json
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 1]), np.array([0, 1]))
        write_metrics_json(tmp_path / "m.json", ["a", "b"], miou_macc(cm))
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["miou"] == 1.0
        assert data["classes"][0]["label"] == "a"
