"""
Unit tests for evaluation metrics.
"""

import numpy as np
import pytest

from powquant.services.metrics import (
    evaluate_task,
    metric_dice,
    metric_frame_error_rate,
    metric_object_f1,
    metric_top1_error,
    seg_avg,
    segmentation_scores,
)
from powquant.utils import MetricError


def blobs(*boxes, size=12):
    """Binary mask with one rectangle per (y0, y1, x0, x1) box."""
    mask = np.zeros((size, size), dtype=bool)
    for y0, y1, x0, x1 in boxes:
        mask[y0:y1, x0:x1] = True
    return mask


class TestDice:
    """Test the Dice overlap."""

    def test_identical(self):
        """Test identical masks score 1."""
        mask = blobs((1, 4, 1, 4))
        assert metric_dice(mask, mask) == 1.0

    def test_disjoint(self):
        """Test disjoint masks score 0."""
        assert metric_dice(blobs((0, 2, 0, 2)), blobs((5, 7, 5, 7))) == 0.0

    def test_half_overlap(self):
        """Test |A|=|B|=2 with one shared pixel scores 0.5."""
        a = np.array([1, 1, 0], dtype=bool)
        b = np.array([0, 1, 1], dtype=bool)
        assert metric_dice(a, b) == 0.5

    def test_both_empty(self):
        """Test two empty masks are defined as 1.0 with a warning."""
        empty = np.zeros((4, 4), dtype=bool)
        assert metric_dice(empty, empty) == 1.0

    def test_shape_mismatch(self):
        """Test masks of different shapes raise error."""
        with pytest.raises(MetricError):
            metric_dice(np.zeros((3, 3)), np.zeros((3, 4)))


class TestObjectF1:
    """Test object-level detection F1."""

    def test_identical(self):
        """Test identical object sets score 1."""
        mask = blobs((1, 4, 1, 4), (6, 9, 6, 9))
        assert metric_object_f1(mask, mask) == 1.0

    def test_one_of_two_found(self):
        """Test one matched object of two gives 2/3."""
        truth = blobs((1, 4, 1, 4), (6, 9, 6, 9))
        pred = blobs((1, 4, 1, 4))
        assert metric_object_f1(pred, truth) == pytest.approx(2 / 3)

    def test_low_iou_is_not_a_match(self):
        """Test an object overlapping by IoU <= 0.5 is not a true positive."""
        truth = blobs((0, 4, 0, 4))
        pred = blobs((0, 4, 2, 6))
        assert metric_object_f1(pred, truth) == 0.0

    def test_merged_prediction_matches_one(self):
        """Test one prediction cannot match two ground-truth objects."""
        truth = blobs((0, 4, 0, 4), (0, 4, 5, 6))
        pred = blobs((0, 4, 0, 5))
        # IoU with the big object is 16/20; the thin one is left unmatched
        assert metric_object_f1(pred, truth) == pytest.approx(2 / 3)

    def test_no_objects(self):
        """Test no objects on either side is defined as 1.0."""
        empty = np.zeros((5, 5), dtype=bool)
        assert metric_object_f1(empty, empty) == 1.0

    def test_missed_everything(self):
        """Test an empty prediction against objects scores 0."""
        assert metric_object_f1(np.zeros((12, 12), dtype=bool), blobs((1, 3, 1, 3))) == 0.0

    def test_seg_avg(self):
        """Test the segmentation average of Dice and F1."""
        assert seg_avg(0.8, 0.6) == pytest.approx(0.7)


class TestErrorRates:
    """Test classification and frame error rates."""

    def test_top1_error(self):
        """Test 0%, 100% and 1-of-4 wrong."""
        labels = np.array([0, 1, 2, 3])
        assert metric_top1_error(labels, labels) == 0.0
        assert metric_top1_error((labels + 1) % 4, labels) == 100.0
        assert metric_top1_error(np.array([0, 1, 2, 0]), labels) == 25.0

    def test_frame_error_rate(self):
        """Test frame errors are counted across sequences."""
        labels = np.array([[0, 0, 1, 1], [2, 2, 2, 2]])
        preds = np.array([[0, 1, 1, 1], [2, 2, 0, 2]])
        assert metric_frame_error_rate(preds, labels) == 25.0

    def test_empty_input(self):
        """Test empty inputs raise error."""
        with pytest.raises(MetricError):
            metric_top1_error(np.array([]), np.array([]))
        with pytest.raises(MetricError):
            metric_frame_error_rate(np.zeros((0, 5)), np.zeros((0, 5)))

    def test_misaligned(self):
        """Test misaligned predictions raise error."""
        with pytest.raises(MetricError):
            metric_top1_error(np.array([1, 2]), np.array([1, 2, 3]))


class TestEvaluateTask:
    """Test task metric dictionaries."""

    def test_cls_reports_accuracy_and_error(self):
        """Test classification reports both accuracy and top-1 error."""
        probs = np.eye(3)[[0, 1, 2, 2]]
        metrics = evaluate_task("cls", probs, np.array([0, 1, 2, 0]))
        assert metrics == {"top1_error": 25.0, "accuracy": 75.0}

    def test_seg_percentages(self):
        """Test perfect segmentation scores 100 on every metric."""
        masks = np.stack([blobs((1, 4, 1, 4)), blobs((2, 6, 5, 9))]).astype(np.int64)
        probs = np.eye(2)[masks]
        assert evaluate_task("seg", probs, masks) == {"dice": 100.0, "object_f1": 100.0, "seg_avg": 100.0}

    def test_seg_batch_average(self):
        """Test per-image scores are averaged over the batch."""
        truth = np.stack([blobs((1, 4, 1, 4)), blobs((1, 4, 1, 4))])
        pred = np.stack([blobs((1, 4, 1, 4)), np.zeros((12, 12), dtype=bool)])
        scores = segmentation_scores(pred, truth)
        assert scores["dice"] == 50.0
        assert scores["object_f1"] == 50.0

    def test_seg_avg_of_reported_scores(self):
        """Test the reported average is the mean of the reported, rounded components."""
        truth = np.stack([blobs((1, 4, 1, 4)), blobs((1, 4, 1, 4)), blobs((1, 4, 1, 4), (6, 9, 6, 9))])
        pred = np.stack([blobs((1, 4, 1, 4)), blobs((1, 4, 1, 3)), blobs((1, 4, 1, 4))])
        scores = segmentation_scores(pred, truth)
        assert scores["dice"] == round(scores["dice"], 4)
        assert scores["dice"] != round(scores["dice"], 2)
        assert scores["seg_avg"] == (scores["dice"] + scores["object_f1"]) / 2

    def test_asr(self):
        """Test speech frames report the frame error rate."""
        probs = np.eye(2)[np.array([[0, 1, 1, 1]])]
        assert evaluate_task("asr", probs, np.array([[0, 1, 1, 0]])) == {"frame_error_rate": 25.0}

    def test_unknown_task(self):
        """Test unknown tasks raise error."""
        with pytest.raises(MetricError):
            evaluate_task("tts", np.zeros((1, 2)), np.zeros(1, dtype=np.int64))
