"""Confusion accumulation and the four segmentation metrics.

mIoU and mAcc average only classes present in the ground truth; pAcc is
trace over total; fwIoU weights each present class's IoU by its ground
truth pixel frequency. All reported in percent.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class MetricReport:
    per_class_iou: list  # percent, None for classes absent from gt
    per_class_acc: list
    miou: float
    pacc: float
    macc: float
    fwiou: float
    config: dict = field(default_factory=dict)
    image_count: int = 0
    wall_seconds: float = 0.0

    def core_dict(self):
        return {
            "mIoU": self.miou,
            "pAcc": self.pacc,
            "mAcc": self.macc,
            "fwIoU": self.fwiou,
        }


def accumulate_confusion(pred_map, gt_map, n_classes, ignore_index=255):
    """counts[g][p] += 1 per pixel; ignore pixels skipped."""
    pred = np.asarray(pred_map)
    gt = np.asarray(gt_map)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    keep = gt != ignore_index
    gt = gt[keep].astype(np.int64)
    pred = pred[keep].astype(np.int64)
    if gt.size and (gt.min() < 0 or gt.max() >= n_classes):
        raise DataError(
            f"ground-truth label outside [0, {n_classes}) and not ignore ({ignore_index})"
        )
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes):
        raise DataError(f"prediction label outside [0, {n_classes})")
    counts = np.bincount(n_classes * gt + pred, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def metrics(confusion):
    """Confusion counts -> MetricReport core fields (percent)."""
    conf = np.asarray(confusion, dtype=np.float64)
    total = conf.sum()
    if total == 0:
        raise DataError("all-zero confusion matrix")
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    present = gt_count > 0
    union = gt_count + pred_count - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, 0.0)
        acc = np.where(gt_count > 0, tp / gt_count, 0.0)
    freq = gt_count / total
    miou = 100.0 * float(iou[present].mean())
    macc = 100.0 * float(acc[present].mean())
    pacc = 100.0 * float(tp.sum() / total)
    fwiou = 100.0 * float((freq[present] * iou[present]).sum())
    return MetricReport(
        per_class_iou=[100.0 * float(v) if p else None for v, p in zip(iou, present)],
        per_class_acc=[100.0 * float(v) if p else None for v, p in zip(acc, present)],
        miou=miou,
        pacc=pacc,
        macc=macc,
        fwiou=fwiou,
    )
