"""Single-scale YOLO-style vehicle detector for BEV images."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bev_raster import PixelBox
from .engine import (
    Adam,
    Tape,
    Tensor,
    apply_activation,
    backward,
    loss_bce_logits,
    reshape,
    square,
    sub,
    take,
    tsum,
)
from .nn import Net

IGNORE_IOU = 0.5


class DetectorDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite detector loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class Anchor:
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("anchor extents must be positive")


@dataclass
class Detection:
    box: PixelBox
    objectness: float
    class_scores: tuple

    @property
    def confidence(self) -> float:
        return self.objectness * max(self.class_scores)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def wh_iou(wh: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of co-centred boxes; (n, 2) x (k, 2) -> (n, k)."""
    inter = np.minimum(wh[:, None, 0], anchors[None, :, 0]) * np.minimum(wh[:, None, 1], anchors[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None, :] - inter
    return inter / union


# ---------------------------------------------------------------------------
# anchors

def kmeans_anchors(boxes: Sequence[PixelBox], k: int, seed: int = 0, max_iter: int = 100) -> list[Anchor]:
    """k-means over box (w, h) with distance 1 - IoU, k-means++ seeding, sorted by area."""
    if k < 1:
        raise ValueError("k must be >= 1")
    wh = np.array([(b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 2)
    if len(np.unique(wh, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct box shapes, got {len(np.unique(wh, axis=0))}")
    rng = np.random.default_rng([seed, 0xA2C])
    centers = [wh[rng.integers(len(wh))]]
    while len(centers) < k:
        d = 1.0 - wh_iou(wh, np.array(centers)).max(axis=1)
        p = d * d
        centers.append(wh[rng.choice(len(wh), p=p / p.sum())])
    centers = np.array(centers)
    assign = None
    for _ in range(max_iter):
        new = np.argmax(wh_iou(wh, centers), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = wh[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    return [Anchor(float(w), float(h)) for w, h in centers[order]]


def mean_best_iou(boxes: Sequence[PixelBox], anchors: Sequence[Anchor]) -> float:
    wh = np.array([(b.w, b.h) for b in boxes], dtype=np.float64)
    an = np.array([(a.w, a.h) for a in anchors], dtype=np.float64)
    return float(wh_iou(wh, an).max(axis=1).mean())


# ---------------------------------------------------------------------------
# head encoding

def _split_head(raw: np.ndarray, n_anchors: int) -> np.ndarray:
    """(N, B*(5+C), G, G) -> (N, B, 5+C, G, G)."""
    n, ch, gh, gw = raw.shape
    if ch % n_anchors:
        raise ValueError(f"head has {ch} channels, not divisible by {n_anchors} anchors")
    return raw.reshape(n, n_anchors, ch // n_anchors, gh, gw)


def decode_predictions(raw_head, anchors: Sequence[Anchor], conf_threshold: float = 0.0,
                       stride: float = 8.0) -> list:
    """Boxes from raw head logits.

    ``raw_head`` is (N, B*(5+C), G, G) (returns a list per image) or a single
    (B*(5+C), G, G) map (returns one list).
    """
    raw = raw_head.data if isinstance(raw_head, Tensor) else np.asarray(raw_head, dtype=np.float64)
    single = raw.ndim == 3
    if single:
        raw = raw[None]
    p = _split_head(raw, len(anchors))
    an = np.array([(a.w, a.h) for a in anchors])
    n, nb, nc, gh, gw = p.shape
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = (jj[None, None] + _sigmoid(p[:, :, 0])) * stride
    cy = (ii[None, None] + _sigmoid(p[:, :, 1])) * stride
    w = an[None, :, 0, None, None] * np.exp(np.minimum(p[:, :, 2], 20.0))
    h = an[None, :, 1, None, None] * np.exp(np.minimum(p[:, :, 3], 20.0))
    obj = _sigmoid(p[:, :, 4])
    cls = _sigmoid(p[:, :, 5:])
    conf = obj * cls.max(axis=2)
    out = []
    for img in range(n):
        dets = []
        for b, i, j in zip(*np.nonzero(conf[img] >= conf_threshold)):
            if conf[img, b, i, j] <= 0.0:
                continue
            scores = tuple(float(v) for v in cls[img, b, :, i, j])
            box = PixelBox(float(cx[img, b, i, j]), float(cy[img, b, i, j]),
                           float(w[img, b, i, j]), float(h[img, b, i, j]),
                           int(np.argmax(cls[img, b, :, i, j])))
            dets.append(Detection(box, float(obj[img, b, i, j]), scores))
        out.append(dets)
    return out[0] if single else out


@dataclass
class Assignment:
    image: int
    anchor: int
    row: int
    col: int
    box: PixelBox


def assign_targets(gts_per_image, anchors: Sequence[Anchor], grid: tuple, stride: float) -> list[Assignment]:
    """Cell containing the GT centre x anchor with the highest co-centred IoU.

    Later ground truths overwrite earlier ones on the same (cell, anchor) slot.
    """
    an = np.array([(a.w, a.h) for a in anchors])
    slots: dict = {}
    for n, gts in enumerate(gts_per_image):
        for gt in gts:
            if not (gt.w > 0 and gt.h > 0):
                raise ValueError("ground-truth boxes need positive width and height")
            col = min(int(math.floor(gt.cx / stride)), grid[1] - 1)
            row = min(int(math.floor(gt.cy / stride)), grid[0] - 1)
            if col < 0 or row < 0:
                raise ValueError(f"ground-truth centre ({gt.cx}, {gt.cy}) lies outside the image")
            b = int(np.argmax(wh_iou(np.array([[gt.w, gt.h]]), an)[0]))
            slots[(n, b, row, col)] = Assignment(n, b, row, col, gt)
    return list(slots.values())


def encode_box(box: PixelBox, anchors: Sequence[Anchor], n_classes: int = 1, stride: float = 8.0,
               grid: tuple = (10, 10), positive_logit: float = 30.0) -> tuple:
    """Raw-head values that decode exactly to ``box``: returns (anchor, row, col, vector)."""
    (a,) = assign_targets([[box]], anchors, grid, stride)
    anchor = anchors[a.anchor]
    vec = np.full(5 + n_classes, -positive_logit)
    vec[0] = _logit(box.cx / stride - a.col)
    vec[1] = _logit(box.cy / stride - a.row)
    vec[2] = math.log(box.w / anchor.w)
    vec[3] = math.log(box.h / anchor.h)
    vec[4] = positive_logit
    vec[5 + box.class_id] = positive_logit
    return a.anchor, a.row, a.col, vec


def _ignore_mask(p: np.ndarray, anchors: Sequence[Anchor], gts_per_image, stride: float) -> np.ndarray:
    """True where a decoded prediction overlaps some GT by more than IGNORE_IOU."""
    n, nb, _, gh, gw = p.shape
    an = np.array([(a.w, a.h) for a in anchors])
    jj, ii = np.meshgrid(np.arange(gw), np.arange(gh))
    cx = (jj[None, None] + _sigmoid(p[:, :, 0])) * stride
    cy = (ii[None, None] + _sigmoid(p[:, :, 1])) * stride
    w = an[None, :, 0, None, None] * np.exp(np.minimum(p[:, :, 2], 20.0))
    h = an[None, :, 1, None, None] * np.exp(np.minimum(p[:, :, 3], 20.0))
    mask = np.zeros((n, nb, gh, gw), dtype=bool)
    for img, gts in enumerate(gts_per_image):
        for gt in gts:
            iw = np.minimum(cx[img] + w[img] / 2, gt.cx + gt.w / 2) - np.maximum(cx[img] - w[img] / 2, gt.cx - gt.w / 2)
            ih = np.minimum(cy[img] + h[img] / 2, gt.cy + gt.h / 2) - np.maximum(cy[img] - h[img] / 2, gt.cy - gt.h / 2)
            inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
            union = w[img] * h[img] + gt.w * gt.h - inter
            mask[img] |= inter / union > IGNORE_IOU
    return mask


def detector_loss(raw_head: Tensor, ground_truth, anchors: Sequence[Anchor], stride: float = 8.0) -> Tensor:
    """YOLO loss summed over terms (weights 1) and divided by the batch size.

    ``ground_truth`` is a list (one per image) of PixelBox lists; a single list of
    boxes is accepted for a batch of one.
    """
    n, ch, gh, gw = raw_head.shape
    if ground_truth and isinstance(ground_truth[0], PixelBox):
        ground_truth = [ground_truth]
    if len(ground_truth) != n:
        raise ValueError(f"{len(ground_truth)} ground-truth lists for a batch of {n}")
    nb = len(anchors)
    nc = ch // nb - 5
    head = reshape(raw_head, (n, nb, 5 + nc, gh, gw))
    p = head.data
    assigned = assign_targets(ground_truth, anchors, (gh, gw), stride)

    obj_target = np.zeros((n, nb, gh, gw))
    obj_weight = np.where(_ignore_mask(p, anchors, ground_truth, stride), 0.0, 1.0)
    for a in assigned:
        obj_target[a.image, a.anchor, a.row, a.col] = 1.0
        obj_weight[a.image, a.anchor, a.row, a.col] = 1.0
    total = loss_bce_logits(take(head, (slice(None), slice(None), 4)), obj_target, obj_weight, "sum")

    if assigned:
        img = np.array([a.image for a in assigned])
        anc = np.array([a.anchor for a in assigned])
        row = np.array([a.row for a in assigned])
        col = np.array([a.col for a in assigned])
        an = np.array([(anchors[a.anchor].w, anchors[a.anchor].h) for a in assigned])
        xy_t = np.stack([[a.box.cx / stride - a.col, a.box.cy / stride - a.row] for a in assigned])
        wh_t = np.log(np.stack([[a.box.w, a.box.h] for a in assigned]) / an)
        cls_t = np.zeros((len(assigned), nc))
        cls_t[np.arange(len(assigned)), [a.box.class_id for a in assigned]] = 1.0

        xy = take(head, (img[:, None], anc[:, None], np.array([[0, 1]]), row[:, None], col[:, None]))
        wh = take(head, (img[:, None], anc[:, None], np.array([[2, 3]]), row[:, None], col[:, None]))
        cls_idx = np.arange(5, 5 + nc)[None, :]
        cl = take(head, (img[:, None], anc[:, None], cls_idx, row[:, None], col[:, None]))
        total = (total + loss_bce_logits(xy, xy_t, reduction="sum")
                 + tsum(square(sub(wh, wh_t)))
                 + loss_bce_logits(cl, cls_t, reduction="sum"))
    return total * (1.0 / n)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    """Greedy non-maximum suppression; ties in confidence go to the smaller box."""
    from .eval_metrics import iou

    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(detections, key=lambda d: (-d.confidence, d.box.area))
    kept: list[Detection] = []
    for det in order:
        if all(iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# network and training

class DetectorNet(Net):
    """Four 3x3 conv blocks (strides 2, 2, 2, 1) and a 1x1 head with B*(5+C) channels."""

    STRIDES = (2, 2, 2, 1)

    def __init__(self, channels: int = 3, widths=(16, 32, 64, 64), n_anchors: int = 3,
                 n_classes: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__(rng if rng is not None else np.random.default_rng(0))
        self.channels, self.widths = channels, tuple(widths)
        self.n_anchors, self.n_classes = n_anchors, n_classes
        cin = channels
        for i, cout in enumerate(self.widths):
            self._conv(f"b{i}", cin, cout, 3, std=math.sqrt(2.0 / (9 * cin)))
            self._norm(f"b{i}n", cout)
            cin = cout
        self._conv("head", cin, n_anchors * (5 + n_classes), 1, std=0.01)
        # start with confidently empty objectness
        bias = self.params["head.bias"].data.reshape(n_anchors, 5 + n_classes)
        bias[:, 4] = -4.0

    @property
    def stride(self) -> int:
        return int(np.prod(self.STRIDES))

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for i, s in enumerate(self.STRIDES):
            h = apply_activation(self.norm(f"b{i}n", self.conv(f"b{i}", h, s, 1)), "leaky_relu", 0.1)
        return self.conv("head", h)


@dataclass
class DetectorConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.001
    widths: tuple = (16, 32, 64, 64)
    n_anchors: int = 3
    n_classes: int = 1
    conf_threshold: float = 0.05
    nms_iou: float = 0.45
    hflip: bool = True
    seed: int = 0


@dataclass
class Detector:
    """Trained network plus the anchors and settings needed for inference."""

    net: DetectorNet
    anchors: list
    config: DetectorConfig = field(default_factory=DetectorConfig)
    losses: list = field(default_factory=list)

    def raw(self, images: np.ndarray) -> np.ndarray:
        return self.net(Tensor(np.asarray(images, dtype=np.float64))).data

    def predict(self, images: np.ndarray, batch: int = 16) -> list[list[Detection]]:
        out = []
        for start in range(0, len(images), batch):
            raw = self.raw(images[start : start + batch])
            for dets in decode_predictions(raw, self.anchors, self.config.conf_threshold, self.net.stride):
                out.append(nms(dets, self.config.nms_iou))
        return out

    def state_arrays(self, prefix: str = "det.") -> dict:
        arrays = self.net.state_arrays(prefix)
        arrays[prefix + "anchors"] = np.array([(a.w, a.h) for a in self.anchors])
        return arrays


def _flip_boxes(boxes: list[PixelBox], width: int) -> list[PixelBox]:
    return [PixelBox(width - b.cx, b.cy, b.w, b.h, b.class_id) for b in boxes]


def train_detector(dataset, config: DetectorConfig = DetectorConfig(),
                   anchors: Optional[Sequence[Anchor]] = None, log=None) -> Detector:
    """Adam over ``detector_loss``; ``dataset`` is a sequence of (C x H x W image, [PixelBox])."""
    if not dataset:
        raise ValueError("detector training needs a nonempty dataset")
    images = np.stack([np.asarray(img.channels if hasattr(img, "channels") else img) for img, _ in dataset])
    boxes = [list(b) for _, b in dataset]
    if anchors is None:
        anchors = kmeans_anchors([b for bs in boxes for b in bs], config.n_anchors, config.seed)
    rng = np.random.default_rng([config.seed, 0xDE7])
    net = DetectorNet(images.shape[1], config.widths, len(anchors), config.n_classes, rng)
    opt = Adam(net.params, lr=config.lr, beta1=0.9)
    det = Detector(net, list(anchors), config)
    width = images.shape[3]
    for step in range(1, config.steps + 1):
        step_rng = np.random.default_rng([config.seed, step, 0xBA7C])
        idx = step_rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
        batch = images[idx]
        gts = [boxes[i] for i in idx]
        if config.hflip:
            flip = step_rng.random(len(idx)) < 0.5
            batch = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
            gts = [_flip_boxes(g, width) if f else g for g, f in zip(gts, flip)]
        tape = Tape()
        with tape:
            loss = detector_loss(net(Tensor(batch)), gts, anchors, net.stride)
        value = loss.item()
        if not np.isfinite(value):
            raise DetectorDiverged(step)
        backward(loss, tape)
        tape.clear()
        opt.step()
        det.losses.append(value)
        if log is not None:
            log(step, value)
    return det
