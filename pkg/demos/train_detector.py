"""Overfit the detector on a handful of simulated BEV images and report AP.

    python demos/train_detector.py [n_images] [steps]
"""
import sys

import numpy as np

from bevda.bev_raster import boxes_to_pixels, rasterize
from bevda.detector import DetectorConfig, train_detector
from bevda.eval_metrics import evaluate
from bevda.scene_sim import LidarModel, generate_scene, raycast_scan


def main(n: int = 10, steps: int = 600) -> None:
    lidar = LidarModel()
    data = []
    for seed in range(n):
        scene = generate_scene(seed, 4)
        data.append((rasterize(raycast_scan(scene, lidar, seed)).channels, boxes_to_pixels(scene.vehicles)))
    det = train_detector(data, DetectorConfig(steps=steps, hflip=False))
    preds = det.predict(np.stack([img for img, _ in data]))
    res = evaluate(dict(enumerate(preds)), {i: boxes for i, (_, boxes) in enumerate(data)})
    print(f"loss {det.losses[0]:.3f} -> {det.losses[-1]:.3f}")
    print(f"training-set AP@0.5 {res.ap:.3f}  (TP {res.tp}, FP {res.fp}, GT {res.n_gt})")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
