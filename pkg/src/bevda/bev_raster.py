"""Bird's-eye-view rasterisation and world -> pixel box mapping.

Image rows run from the far edge (row 0 at ``x_max``) towards the sensor;
columns run left to right from ``y_min``.  Channels: normalised max height,
mean intensity, log density saturating at 64 points per cell.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .pointcloud_io import GroundTruthBox, PointCloud

DENSITY_SATURATION = 64
BEV_MAGIC = b"BEV1"


class BevFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BevGridConfig:
    x_range: tuple = (0.0, 40.0)
    y_range: tuple = (-20.0, 20.0)
    z_range: tuple = (-2.5, 1.5)
    cell_size: float = 0.5

    def __post_init__(self):
        (x0, x1), (y0, y1), (z0, z1) = self.x_range, self.y_range, self.z_range
        if not (x1 > x0 and y1 > y0 and z1 > z0 and self.cell_size > 0):
            raise ValueError("grid ranges must be increasing and cell_size positive")
        for span in (x1 - x0, y1 - y0):
            n = span / self.cell_size
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"extent {span} is not a whole number of {self.cell_size} m cells")

    @property
    def height(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    @property
    def width(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    def to_pixel(self, x, y):
        """Unfloored (row, col) coordinates of world points."""
        return ((self.x_range[1] - np.asarray(x)) / self.cell_size,
                (np.asarray(y) - self.y_range[0]) / self.cell_size)


@dataclass
class BevImage:
    channels: np.ndarray
    grid: BevGridConfig = field(default_factory=BevGridConfig)
    # per-cell point counts (kept in memory only)
    counts: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return self.channels.shape


@dataclass
class PixelBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("pixel box extents must be positive")

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def rasterize(cloud: PointCloud, grid: BevGridConfig = BevGridConfig()) -> BevImage:
    H, W = grid.height, grid.width
    z0, z1 = grid.z_range
    pts = cloud.points
    out = np.zeros((3, H, W))
    counts = np.zeros((H, W), dtype=np.int64)
    if len(pts):
        rowf, colf = grid.to_pixel(pts[:, 0], pts[:, 1])
        row = np.floor(rowf).astype(np.int64)
        col = np.floor(colf).astype(np.int64)
        keep = (row >= 0) & (row < H) & (col >= 0) & (col < W) & (pts[:, 2] >= z0) & (pts[:, 2] <= z1)
        cell = row[keep] * W + col[keep]
        z = pts[keep, 2]
        inten = pts[keep, 3]
        if cell.size:
            # sort by (cell, intensity) so the per-cell sums do not depend on input order
            order = np.lexsort((inten, cell))
            cell, z, inten = cell[order], z[order], inten[order]
            starts = np.flatnonzero(np.r_[True, cell[1:] != cell[:-1]])
            ucell = cell[starts]
            n = np.diff(np.r_[starts, cell.size])
            zmax = np.maximum.reduceat(z, starts)
            isum = np.add.reduceat(inten, starts)
            flat = out.reshape(3, -1)
            flat[0, ucell] = (zmax - z0) / (z1 - z0)
            flat[1, ucell] = isum / n
            flat[2, ucell] = np.minimum(1.0, np.log1p(n) / math.log1p(DENSITY_SATURATION))
            counts.reshape(-1)[ucell] = n
    return BevImage(out, grid, counts)


def _round_half_up(v: float) -> float:
    return math.floor(v + 0.5)


def box_world_to_pixel(box: GroundTruthBox, grid: BevGridConfig = BevGridConfig()) -> Optional[PixelBox]:
    """Axis-aligned pixel bounding box of the yawed footprint, clipped to the image.

    Extents come from unfloored corner coordinates rounded half-up; returns None
    when the clipped rectangle covers less than 4 square pixels.
    """
    corners = box.corners()
    rows, cols = grid.to_pixel(corners[:, 0], corners[:, 1])
    r0, r1 = max(rows.min(), 0.0), min(rows.max(), float(grid.height))
    c0, c1 = max(cols.min(), 0.0), min(cols.max(), float(grid.width))
    if r1 <= r0 or c1 <= c0 or (r1 - r0) * (c1 - c0) < 4.0:
        return None
    w = max(_round_half_up(c1 - c0), 1.0)
    h = max(_round_half_up(r1 - r0), 1.0)
    return PixelBox((c0 + c1) / 2, (r0 + r1) / 2, w, h, box.class_id)


def boxes_to_pixels(boxes, grid: BevGridConfig = BevGridConfig()) -> list[PixelBox]:
    return [pb for pb in (box_world_to_pixel(b, grid) for b in boxes) if pb is not None]


# ---------------------------------------------------------------------------
# on-disk formats

def dumps_bev(img: BevImage) -> bytes:
    c, h, w = img.channels.shape
    return BEV_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(img.channels, "<f8").tobytes()


def loads_bev(blob: bytes, grid: BevGridConfig = BevGridConfig()) -> BevImage:
    if blob[:4] != BEV_MAGIC:
        raise BevFormatError("bad magic; not a BEV1 image")
    h, w, c = struct.unpack_from("<III", blob, 4)
    if len(blob) != 16 + 8 * c * h * w:
        raise BevFormatError(f"payload length {len(blob) - 16} does not match {c}x{h}x{w}")
    arr = np.frombuffer(blob, "<f8", c * h * w, 16).reshape(c, h, w).astype(np.float64)
    return BevImage(arr, grid)


def save_bev(path, img: BevImage) -> None:
    Path(path).write_bytes(dumps_bev(img))


def load_bev(path, grid: BevGridConfig = BevGridConfig()) -> BevImage:
    return loads_bev(Path(path).read_bytes(), grid)


def to_pgm(plane: np.ndarray) -> bytes:
    """8-bit binary PGM of a [0, 1] plane."""
    h, w = plane.shape
    px = np.clip(np.round(np.asarray(plane) * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    """Pixels of an 8-bit binary PGM as uint8 (h, w)."""
    # header tokens are whitespace separated; exactly one whitespace byte
    # follows maxval, so the payload may itself start with whitespace values
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None or int(m.group(3)) != 255:
        raise BevFormatError("not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    data = blob[m.end():]
    if len(data) != w * h:
        raise BevFormatError("PGM payload size mismatch")
    return np.frombuffer(data, np.uint8).reshape(h, w)
