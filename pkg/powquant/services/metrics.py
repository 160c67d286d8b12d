"""
METRICS SERVICE - Evaluation metrics for the three tasks

1. Segmentation - Dice overlap, object-level F1 (connected components, IoU > 0.5), their average
2. Classification - top-1 error and accuracy in percent
3. Speech frames - frame error rate in percent
4. evaluate_task - the task's metric dictionary from model probabilities

Dice and object F1 are fractions in [0, 1]; everything evaluate_task returns is a percentage.
"""

from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from powquant.utils import MetricError, get_logger, round_score

logger = get_logger(__name__)

IOU_MATCH_THRESHOLD = 0.5


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def metric_dice(pred_mask: np.ndarray, true_mask: np.ndarray, warn: bool = True) -> float:
    """
    2|A∩B| / (|A|+|B|) for binary masks.

    Both masks empty is defined as 1.0 and logged as a warning.
    """
    pred, true = _check_pair(pred_mask, true_mask)
    pred, true = pred.astype(bool), true.astype(bool)
    total = int(pred.sum()) + int(true.sum())
    if total == 0:
        if warn:
            logger.warning("dice of two empty masks defined as 1.0")
        return 1.0
    return 2.0 * int(np.logical_and(pred, true).sum()) / total


def _iou_matrix(pred_labels: np.ndarray, n_pred: int, true_labels: np.ndarray, n_true: int) -> np.ndarray:
    # joint histogram of (pred object, true object) labels; row/col 0 is background
    joint = np.bincount(pred_labels.ravel() * (n_true + 1) + true_labels.ravel(),
                        minlength=(n_pred + 1) * (n_true + 1)).reshape(n_pred + 1, n_true + 1)
    inter = joint[1:, 1:].astype(np.float64)
    area_pred = joint[1:, :].sum(axis=1).astype(np.float64)
    area_true = joint[:, 1:].sum(axis=0).astype(np.float64)
    union = area_pred[:, None] + area_true[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def metric_object_f1(pred_mask: np.ndarray, true_mask: np.ndarray, warn: bool = True) -> float:
    """
    Detection F1 over connected components.

    A predicted object is a true positive when its IoU with a still unmatched
    ground-truth object exceeds 0.5; pairs are matched greedily by descending IoU.
    """
    pred, true = _check_pair(pred_mask, true_mask)
    pred_labels, n_pred = ndimage.label(pred.astype(bool))
    true_labels, n_true = ndimage.label(true.astype(bool))
    if n_pred + n_true == 0:
        if warn:
            logger.warning("object F1 with no objects on either side defined as 1.0")
        return 1.0
    if n_pred == 0 or n_true == 0:
        return 0.0

    iou = _iou_matrix(pred_labels, n_pred, true_labels, n_true)
    rows, cols = np.nonzero(iou > IOU_MATCH_THRESHOLD)
    order = np.lexsort((cols, rows, -iou[rows, cols]))
    used_pred, used_true = set(), set()
    for k in order:
        i, j = int(rows[k]), int(cols[k])
        if i not in used_pred and j not in used_true:
            used_pred.add(i)
            used_true.add(j)
    tp = len(used_pred)
    return 2.0 * tp / (n_pred + n_true)


def seg_avg(dice: float, f1: float) -> float:
    return (dice + f1) / 2.0


def _error_percent(preds: np.ndarray, labels: np.ndarray, what: str) -> float:
    preds, labels = _check_pair(preds, labels)
    if labels.size == 0:
        raise MetricError(f"{what} of an empty input is undefined")
    return 100.0 * float(np.count_nonzero(preds != labels)) / labels.size


def metric_top1_error(preds: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of misclassified samples."""
    return _error_percent(preds, labels, "top-1 error")


def metric_frame_error_rate(frame_preds: np.ndarray, frame_labels: np.ndarray) -> float:
    """Percentage of misclassified frames across all sequences."""
    return _error_percent(frame_preds, frame_labels, "frame error rate")


def segmentation_scores(pred_masks: np.ndarray, true_masks: np.ndarray) -> Dict[str, float]:
    """Per-image Dice and object F1 averaged over a batch, as percentages."""
    pred_masks, true_masks = _check_pair(pred_masks, true_masks)
    if len(true_masks) == 0:
        raise MetricError("segmentation scores of an empty batch are undefined")
    dices, f1s, empty = [], [], 0
    for pred, true in zip(pred_masks, true_masks):
        if not pred.any() and not true.any():
            empty += 1
        dices.append(metric_dice(pred, true, warn=False))
        f1s.append(metric_object_f1(pred, true, warn=False))
    if empty:
        logger.warning(f"{empty} images with empty prediction and ground truth scored as 1.0")
    dice = round_score(100.0 * float(np.mean(dices)), 4)
    f1 = round_score(100.0 * float(np.mean(f1s)), 4)
    return {"dice": dice, "object_f1": f1, "seg_avg": seg_avg(dice, f1)}


def evaluate_task(task: str, probs: np.ndarray, targets: np.ndarray) -> Dict[str, float]:
    """Metric dictionary (percentages) for a task from class probabilities."""
    preds = np.argmax(probs, axis=-1)
    if task == "seg":
        return segmentation_scores(preds == 1, np.asarray(targets) == 1)
    if task == "cls":
        error = metric_top1_error(preds, targets)
        return {"top1_error": round_score(error, 4), "accuracy": round_score(100.0 - error, 4)}
    if task == "asr":
        return {"frame_error_rate": round_score(metric_frame_error_rate(preds, targets), 4)}
    raise MetricError(f"Unknown task '{task}'")


PRIMARY_METRIC = {"seg": "seg_avg", "cls": "accuracy", "asr": "frame_error_rate"}
HIGHER_IS_BETTER = {"dice": True, "object_f1": True, "seg_avg": True, "accuracy": True,
                    "top1_error": False, "frame_error_rate": False, "memory_ratio": True}
