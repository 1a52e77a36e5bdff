import math

import numpy as np
import pytest

from bevda.bev_raster import PixelBox
from bevda.detector import (
    Anchor,
    DetectorConfig,
    DetectorNet,
    decode_predictions,
    detector_loss,
    encode_box,
    kmeans_anchors,
    mean_best_iou,
    nms,
    train_detector,
)
from bevda.engine import Tensor

from gradcheck import check
from oracles import make_det, random_dets, ref_nms

ANCHORS = [Anchor(4.0, 4.0), Anchor(4.0, 9.0), Anchor(9.0, 4.0)]
STRIDE = 8.0


def boxes_wh(pairs):
    return [PixelBox(20.0, 20.0, w, h) for w, h in pairs]


# ---------------------------------------------------------------------------
# anchors

def test_kmeans_identical_boxes_k1():
    (a,) = kmeans_anchors(boxes_wh([(7.0, 3.0)] * 20), 1)
    assert (a.w, a.h) == (7.0, 3.0)


def test_kmeans_separated_clusters():
    anchors = kmeans_anchors(boxes_wh([(10.0, 10.0)] * 50 + [(40.0, 40.0)] * 50), 2)
    assert [(a.w, a.h) for a in anchors] == [(10.0, 10.0), (40.0, 40.0)]


def test_kmeans_beats_random_triples():
    rng = np.random.default_rng(0)
    boxes = boxes_wh(rng.uniform(2, 20, (200, 2)))
    score = mean_best_iou(boxes, kmeans_anchors(boxes, 3, seed=1))
    for _ in range(100):
        triple = [Anchor(*rng.uniform(2, 20, 2)) for _ in range(3)]
        assert score >= mean_best_iou(boxes, triple)


def test_kmeans_sorted_by_area():
    rng = np.random.default_rng(1)
    anchors = kmeans_anchors(boxes_wh(rng.uniform(2, 20, (100, 2))), 4)
    areas = [a.w * a.h for a in anchors]
    assert areas == sorted(areas)


def test_kmeans_too_few_distinct():
    with pytest.raises(ValueError):
        kmeans_anchors(boxes_wh([(5.0, 5.0)] * 10), 2)


def test_anchor_invariant():
    with pytest.raises(ValueError):
        Anchor(0.0, 3.0)


# ---------------------------------------------------------------------------
# decode / encode

def head(fill=0.0, g=4, nb=3, nc=1):
    return np.full((nb * (5 + nc), g, g), fill)


def test_decode_zero_offsets_cell_centre_and_anchor_size():
    raw = head(0.0)
    dets = decode_predictions(raw, ANCHORS, 0.0, STRIDE)
    assert len(dets) == 3 * 16
    for d in dets:
        assert (d.box.cx / STRIDE) % 1 == 0.5 and (d.box.cy / STRIDE) % 1 == 0.5
        assert (d.box.w, d.box.h) in {(a.w, a.h) for a in ANCHORS}
        assert d.confidence == 0.25


def test_decode_suppressed_objectness_is_empty():
    raw = head(0.0).reshape(3, 6, 4, 4)
    raw[:, 4] = -100.0
    assert decode_predictions(raw.reshape(18, 4, 4), ANCHORS, 1e-12, STRIDE) == []


def test_decode_batch_returns_list_per_image():
    out = decode_predictions(np.zeros((2, 18, 4, 4)), ANCHORS, 0.0, STRIDE)
    assert len(out) == 2 and len(out[0]) == 48


def test_decode_encode_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(200):
        box = PixelBox(*rng.uniform(1, 79, 2), *rng.uniform(2, 15, 2))
        b, row, col, vec = encode_box(box, ANCHORS, 1, STRIDE, (10, 10))
        raw = np.full((3, 6, 10, 10), -30.0)
        raw[b, :, row, col] = vec
        (det,) = decode_predictions(raw.reshape(18, 10, 10), ANCHORS, 0.5, STRIDE)
        got = det.box
        assert abs(got.cx - box.cx) < 1e-9 and abs(got.cy - box.cy) < 1e-9
        assert abs(got.w - box.w) < 1e-9 and abs(got.h - box.h) < 1e-9


# ---------------------------------------------------------------------------
# loss

def test_loss_no_gt_all_negative_is_zero():
    raw = np.full((1, 18, 4, 4), -100.0)
    assert detector_loss(Tensor(raw), [[]], ANCHORS, STRIDE).item() < 1e-30


def test_loss_encoded_gt_coordinate_terms_vanish():
    box = PixelBox(13.0, 21.0, 5.0, 8.0)
    b, row, col, vec = encode_box(box, ANCHORS, 1, STRIDE, (4, 4), positive_logit=40.0)
    raw = np.full((1, 3, 6, 4, 4), -40.0)
    raw[0, b, :, row, col] = vec
    loss = detector_loss(Tensor(raw.reshape(1, 18, 4, 4)), [[box]], ANCHORS, STRIDE).item()
    # the xy BCE against a fractional target keeps its entropy floor
    tx, ty = box.cx / STRIDE - col, box.cy / STRIDE - row
    entropy = sum(-(t * math.log(t) + (1 - t) * math.log(1 - t)) for t in (tx, ty))
    assert loss == pytest.approx(entropy, abs=1e-9)


def test_loss_non_negative():
    rng = np.random.default_rng(3)
    for _ in range(50):
        raw = rng.normal(0, 3, (2, 18, 4, 4))
        gts = [[PixelBox(*rng.uniform(1, 31, 2), *rng.uniform(2, 10, 2))] for _ in range(2)]
        assert detector_loss(Tensor(raw), gts, ANCHORS, STRIDE).item() >= 0


def test_loss_rejects_degenerate_and_outside_gt():
    raw = Tensor(np.zeros((1, 18, 4, 4)))
    with pytest.raises(ValueError):
        detector_loss(raw, [[PixelBox(-3.0, 5.0, 2.0, 2.0)]], ANCHORS, STRIDE)
    with pytest.raises(ValueError):
        PixelBox(5.0, 5.0, 0.0, 2.0)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradcheck_1x18x4x4(seed):
    rng = np.random.default_rng(100 + seed)
    raw = Tensor(rng.normal(0, 1, (1, 18, 4, 4)), requires_grad=True)
    gts = [[PixelBox(*rng.uniform(1, 31, 2), *rng.uniform(3, 10, 2)) for _ in range(int(rng.integers(1, 4)))]]
    assert check(lambda r: detector_loss(r, gts, ANCHORS, STRIDE), [raw]) < 1e-3


# ---------------------------------------------------------------------------
# nms

def test_nms_single_unchanged():
    d = make_det(10, 10, 4, 4, 0.7)
    assert nms([d], 0.5) == [d]


def test_nms_identical_boxes_keep_higher():
    a, b = make_det(10, 10, 4, 4, 0.8), make_det(10, 10, 4, 4, 0.9)
    assert nms([a, b], 0.5) == [b]


def test_nms_threshold_domain():
    with pytest.raises(ValueError):
        nms([], 1.0)


def test_nms_matches_reference_1000_instances():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        dets = random_dets(rng)
        thr = float(rng.uniform(0.1, 0.9))
        assert nms(dets, thr) == ref_nms(dets, thr)


def test_nms_tie_goes_to_smaller_box():
    big, small = make_det(10, 10, 6, 6, 0.5), make_det(10, 10, 5, 5, 0.5)
    assert nms([big, small], 0.3) == [small]


# ---------------------------------------------------------------------------
# network and training

def tiny_dataset(n=4, seed=0):
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        img = np.zeros((3, 32, 32))
        boxes = []
        for _ in range(2):
            cx, cy = rng.uniform(6, 26, 2)
            w, h = rng.choice([4.0, 8.0]), rng.choice([4.0, 8.0])
            img[:, int(cy - h / 2):int(cy + h / 2), int(cx - w / 2):int(cx + w / 2)] = 1.0
            boxes.append(PixelBox(cx, cy, w, h))
        data.append((img, boxes))
    return data


def test_net_head_shape():
    net = DetectorNet(3, (4, 4, 4, 4), 3, 1)
    out = net(Tensor(np.zeros((2, 3, 32, 32))))
    assert out.shape == (2, 18, 4, 4) and net.stride == 8


def test_training_deterministic_and_loss_decreases():
    cfg = DetectorConfig(steps=40, batch_size=2, widths=(4, 4, 8, 8), seed=3)
    a = train_detector(tiny_dataset(), cfg)
    b = train_detector(tiny_dataset(), cfg)
    assert a.losses == b.losses
    assert a.net.checksum() == b.net.checksum()
    assert a.losses[-1] < a.losses[0]


def test_training_needs_data():
    with pytest.raises(ValueError):
        train_detector([], DetectorConfig(steps=1))
