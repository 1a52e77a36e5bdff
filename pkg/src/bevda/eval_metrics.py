"""IoU, greedy detection matching and all-points interpolated average precision."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bev_raster import PixelBox


class UndefinedAPError(ValueError):
    pass


def iou(a: PixelBox, b: PixelBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def rank_key(det) -> tuple:
    """Sort key: confidence descending, then smaller box first."""
    return (-det.confidence, det.box.area)


def match_detections(dets, gts, iou_min: float = 0.5) -> list[tuple]:
    """Greedy matching of confidence-ranked detections to ground truth.

    Each detection takes the still-unmatched GT with the highest IoU (>= iou_min)
    and is a TP; otherwise it is a FP.  Returns ``[(det, is_tp), ...]`` in input order.
    """
    taken = [False] * len(gts)
    return [(det, _claim(det.box, gts, taken, iou_min)) for det in dets]


def _claim(box: PixelBox, gts, taken: list, iou_min: float) -> bool:
    best, best_iou = -1, iou_min
    for g, gt in enumerate(gts):
        if taken[g]:
            continue
        v = iou(box, gt)
        if v > best_iou or (v == best_iou and best < 0):
            best, best_iou = g, v
    if best >= 0:
        taken[best] = True
    return best >= 0


@dataclass
class PrPoint:
    recall: float
    precision: float
    threshold: float


@dataclass
class ApResult:
    ap: float
    tp: int
    fp: int
    n_gt: int
    curve: list


def evaluate(dets_by_image: dict, gts_by_image: dict, iou_min: float = 0.5) -> ApResult:
    """Rank every detection in the dataset, match per image, integrate the PR envelope.

    ``dets_by_image`` maps image id -> detections, ``gts_by_image`` image id -> PixelBoxes.
    """
    n_gt = sum(len(v) for v in gts_by_image.values())
    if n_gt == 0:
        raise UndefinedAPError("average precision is undefined without ground truth")
    ranked = sorted(((d, img) for img in sorted(dets_by_image) for d in dets_by_image[img]),
                    key=lambda p: rank_key(p[0]))
    taken = {img: [False] * len(g) for img, g in gts_by_image.items()}
    flags = [_claim(det.box, gts_by_image.get(img, []), taken.setdefault(img, []), iou_min)
             for det, img in ranked]
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum(np.logical_not(flags), dtype=np.float64)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1.0)
    curve = [PrPoint(float(r), float(p), float(d.confidence))
             for r, p, (d, _) in zip(recall, precision, ranked)]
    return ApResult(_envelope_area(recall, precision), int(tp[-1]) if len(tp) else 0,
                    int(fp[-1]) if len(fp) else 0, n_gt, curve)


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(dets_by_image: dict, gts_by_image: dict, iou_min: float = 0.5) -> float:
    return evaluate(dets_by_image, gts_by_image, iou_min).ap
