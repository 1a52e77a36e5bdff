"""On-disk datasets: ``<id>.bev`` images, ``<id>.txt`` lab labels and a manifest.

Manifest layout: ``#``-prefixed provenance lines (domain and the echoed
config), then a tab-separated header ``id seed source`` and one row per
sample.  ``seed`` is the scene seed for simulated samples and ``-`` otherwise;
``source`` names the originating sample or file.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..artifact_sim import apply_artifacts
from ..bev_raster import BevGridConfig, BevImage, boxes_to_pixels, load_bev, rasterize, save_bev
from ..pointcloud_io import GroundTruthBox, read_labels, read_scan_bin, write_labels
from ..scene_sim import generate_scene, raycast_scan
from .config import ExperimentConfig, sample_seed, to_ini

MANIFEST = "manifest.txt"
HEADER = "id\tseed\tsource"


class DatasetError(RuntimeError):
    pass


@dataclass
class Entry:
    id: str
    seed: str = "-"
    source: str = "-"


@dataclass
class Sample:
    id: str
    image: BevImage
    boxes: list

    def pixel_boxes(self) -> list:
        return boxes_to_pixels(self.boxes, self.image.grid)


def render_sample(cfg: ExperimentConfig, seed: int, real: bool) -> tuple[BevImage, list]:
    """Simulate one scene; ``real`` adds the sensor artefacts."""
    lidar = cfg.lidar.model()
    rng = np.random.default_rng([seed, 0x4E])
    n = int(rng.integers(cfg.scene.min_vehicles, cfg.scene.max_vehicles + 1))
    scene = generate_scene(seed, n, cfg.scene.extent, cfg.scene.ground_z)
    cloud = raycast_scan(scene, lidar, seed)
    if real:
        cloud = apply_artifacts(cloud, cfg.artifact, lidar.scan_period, seed)
    return rasterize(cloud, cfg.grid), scene.vehicles


def write_manifest(directory: Path, domain: str, entries: list[Entry], cfg: ExperimentConfig | None) -> None:
    lines = [f"# domain = {domain}"]
    if cfg is not None:
        lines += [f"# {line}" if line else "#" for line in to_ini(cfg).splitlines()]
    lines.append(HEADER)
    lines += [f"{e.id}\t{e.seed}\t{e.source}" for e in entries]
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(directory) -> list[Entry]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise DatasetError(f"no manifest in {directory}")
    entries, seen_header = [], False
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        if not seen_header:
            if line != HEADER:
                raise DatasetError(f"{path}: bad header {line!r}")
            seen_header = True
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"{path}: malformed row {line!r}")
        entries.append(Entry(*parts))
    return entries


def manifest_checksum(directory) -> str:
    return hashlib.sha256((Path(directory) / MANIFEST).read_bytes()).hexdigest()


def write_sample(directory: Path, sample_id: str, image: BevImage, label_text: str) -> None:
    save_bev(directory / f"{sample_id}.bev", image)
    (directory / f"{sample_id}.txt").write_text(label_text, encoding="utf-8")


def load_dataset(directory, grid: BevGridConfig = BevGridConfig()) -> list[Sample]:
    directory = Path(directory)
    out = []
    for e in read_manifest(directory):
        try:
            image = load_bev(directory / f"{e.id}.bev", grid)
            boxes = read_labels((directory / f"{e.id}.txt").read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"{directory}/{e.id}: {exc}") from exc
        out.append(Sample(e.id, image, boxes))
    return out


def as_training_pairs(samples: list[Sample]) -> list[tuple]:
    return [(s.image.channels, s.pixel_boxes()) for s in samples]


def generate_split(cfg: ExperimentConfig, directory: Path, domain: str, n: int, real: bool) -> list[Entry]:
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        seed = sample_seed(cfg.seed, domain, i)
        image, boxes = render_sample(cfg, seed, real)
        sid = f"{domain}_{i:05d}"
        write_sample(directory, sid, image, write_labels(boxes))
        entries.append(Entry(sid, str(seed), "sim"))
    write_manifest(directory, domain, entries, cfg)
    return entries


def kitti_pairs(root) -> list[tuple[str, Path, Path]]:
    """(frame id, scan path, label path) for a KITTI-style ``velodyne/`` + ``label_2/`` tree."""
    root = Path(root)
    scans = root / "velodyne"
    labels = root / "label_2"
    if not scans.is_dir() or not labels.is_dir():
        raise DatasetError(f"{root} needs velodyne/ and label_2/ subdirectories")
    out = []
    for scan in sorted(scans.glob("*.bin")):
        label = labels / f"{scan.stem}.txt"
        if label.is_file():
            out.append((scan.stem, scan, label))
    if not out:
        raise DatasetError(f"no scan/label pairs under {root}")
    return out


def import_kitti(cfg: ExperimentConfig, root, train_dir: Path, test_dir: Path) -> tuple[list, list]:
    """Rasterise real KITTI frames into the R train and test splits.

    Frames are shuffled with the run seed; the first ``n_test_r`` go to test and
    up to ``n_train_r`` of the rest to train.
    """
    pairs = kitti_pairs(root)
    order = np.random.default_rng([cfg.seed, 0x4B17]).permutation(len(pairs))
    test_idx = order[: cfg.n_test_r]
    train_idx = order[cfg.n_test_r : cfg.n_test_r + cfg.n_train_r]
    if len(test_idx) == 0:
        raise DatasetError("not enough KITTI frames for a test split")
    results = []
    for directory, domain, idx in ((train_dir, "R", train_idx), (test_dir, "test_R", test_idx)):
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, k in enumerate(sorted(int(j) for j in idx)):
            frame, scan, label = pairs[k]
            cloud = read_scan_bin(scan.read_bytes())
            boxes = read_labels(label.read_text(encoding="utf-8"), format="kitti")
            sid = f"{domain}_{i:05d}"
            write_sample(directory, sid, rasterize(cloud, cfg.grid), write_labels(boxes))
            entries.append(Entry(sid, "-", f"kitti:{frame}"))
        write_manifest(directory, domain, entries, cfg)
        results.append(entries)
    return results[0], results[1]


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image.channels for s in samples])


def gt_boxes(samples: list[Sample]) -> list[list[GroundTruthBox]]:
    return [s.boxes for s in samples]
