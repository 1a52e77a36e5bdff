"""LiDAR scans and box labels: KITTI ``.bin``/label files and the lab formats.

The lab scan format keeps per-point ring/azimuth provenance::

    b"LPC1" | u32 count | u8 has_provenance | count x 4 f64 (x, y, z, intensity)
    [ | count x u32 ring | count x f64 azimuth ]

Lab labels are one ``class cx cy length width yaw`` line per box.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

TWO_PI = 2.0 * math.pi
VEHICLE = 0
LAB_MAGIC = b"LPC1"


class ScanFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - ((math.pi - a) % TWO_PI)


@dataclass
class PointCloud:
    """``points`` is (N, 4): x, y, z in metres (sensor frame) and intensity in [0, 1]."""

    points: np.ndarray
    ring: Optional[np.ndarray] = None
    azimuth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        n = len(self.points)
        if n and (self.points[:, 3].min() < 0 or self.points[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        if (self.ring is None) != (self.azimuth is None):
            raise ValueError("ring and azimuth provenance come together")
        if self.ring is not None:
            self.ring = np.asarray(self.ring, dtype=np.int64)
            self.azimuth = np.asarray(self.azimuth, dtype=np.float64)
            if self.ring.shape != (n,) or self.azimuth.shape != (n,):
                raise ValueError("provenance must cover every point")
            if n and (self.ring.min() < 0):
                raise ValueError("ring indices must be >= 0")
            if n and (self.azimuth.min() < 0 or self.azimuth.max() >= TWO_PI):
                raise ValueError("azimuth must lie in [0, 2*pi)")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_provenance(self) -> bool:
        return self.ring is not None

    def subset(self, mask) -> "PointCloud":
        if self.ring is None:
            return PointCloud(self.points[mask].copy())
        return PointCloud(self.points[mask].copy(), self.ring[mask].copy(), self.azimuth[mask].copy())

    @classmethod
    def empty(cls, provenance: bool = False) -> "PointCloud":
        if provenance:
            return cls(np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros(0))
        return cls(np.zeros((0, 4)))


@dataclass
class GroundTruthBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float = 0.0
    class_id: int = VEHICLE
    height: float = 1.5

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box length and width must be positive")
        self.yaw = normalize_angle(self.yaw)

    def corners(self) -> np.ndarray:
        """Footprint corners, (4, 2) in the BEV plane, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


# ---------------------------------------------------------------------------
# scans

def read_scan_bin(data: bytes) -> PointCloud:
    """KITTI velodyne scan: 16-byte records of little-endian float32 x, y, z, reflectance."""
    if len(data) % 16:
        raise ScanFormatError("trailing partial record", offset=len(data) - len(data) % 16)
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    rec[:, 3] = np.clip(rec[:, 3], 0.0, 1.0)
    return PointCloud(rec)


def write_scan_bin(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()


def write_scan_lab(cloud: PointCloud) -> bytes:
    n = len(cloud)
    parts = [LAB_MAGIC, struct.pack("<IB", n, int(cloud.has_provenance)),
             np.ascontiguousarray(cloud.points, dtype="<f8").tobytes()]
    if cloud.has_provenance:
        parts.append(cloud.ring.astype("<u4").tobytes())
        parts.append(cloud.azimuth.astype("<f8").tobytes())
    return b"".join(parts)


def read_scan_lab(data: bytes) -> PointCloud:
    if data[:4] != LAB_MAGIC:
        raise ScanFormatError("bad magic, expected LPC1", offset=0)
    if len(data) < 9:
        raise ScanFormatError("truncated header", offset=len(data))
    n, prov = struct.unpack_from("<IB", data, 4)
    pos = 9
    need = pos + 32 * n + (12 * n if prov else 0)
    if len(data) != need:
        raise ScanFormatError(f"expected {need} bytes for {n} points", offset=min(len(data), need))
    pts = np.frombuffer(data, "<f8", 4 * n, pos).reshape(n, 4).astype(np.float64)
    pos += 32 * n
    if not prov:
        return PointCloud(pts)
    ring = np.frombuffer(data, "<u4", n, pos).astype(np.int64)
    az = np.frombuffer(data, "<f8", n, pos + 4 * n).astype(np.float64)
    return PointCloud(pts, ring, az)


# ---------------------------------------------------------------------------
# labels

def _kitti_box(fields: list[str], lineno: int) -> Optional[GroundTruthBox]:
    if len(fields) not in (15, 16):
        raise LabelFormatError(f"expected 15 fields, got {len(fields)}", lineno)
    if fields[0] != "Car":
        return None
    try:
        h, w, l, x, y, z, ry = (float(v) for v in fields[8:15])
    except ValueError as exc:
        raise LabelFormatError(str(exc), lineno) from None
    # nominal camera -> velodyne convention: forward = z_cam, left = -x_cam
    return GroundTruthBox(cx=z, cy=-x, length=l, width=w, yaw=-ry - math.pi / 2,
                          class_id=VEHICLE, height=h)


def _lab_box(fields: list[str], lineno: int) -> GroundTruthBox:
    if len(fields) != 6:
        raise LabelFormatError(f"expected 6 fields, got {len(fields)}", lineno)
    try:
        cls = int(fields[0])
        cx, cy, length, width, yaw = (float(v) for v in fields[1:])
    except ValueError as exc:
        raise LabelFormatError(str(exc), lineno) from None
    if cls != VEHICLE:
        raise LabelFormatError(f"unknown class {cls}", lineno)
    try:
        return GroundTruthBox(cx, cy, length, width, yaw, cls)
    except ValueError as exc:
        raise LabelFormatError(str(exc), lineno) from None


def read_labels(lines: Iterable[str] | str, format: str = "lab") -> list[GroundTruthBox]:
    """Parse label text; KITTI keeps only ``Car`` rows, mapped into the BEV sensor frame."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    if format not in ("kitti", "lab"):
        raise ValueError(f"unknown label format {format!r}")
    parse = _kitti_box if format == "kitti" else _lab_box
    boxes = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.replace("−", "-").split()
        if not fields:
            continue
        box = parse(fields, lineno)
        if box is not None:
            boxes.append(box)
    return boxes


def write_labels(boxes: Iterable[GroundTruthBox]) -> str:
    """Lab-format text; floats use repr so reading back is exact."""
    return "".join(f"{int(b.class_id)} {float(b.cx)!r} {float(b.cy)!r} {float(b.length)!r} "
                   f"{float(b.width)!r} {float(b.yaw)!r}\n" for b in boxes)
