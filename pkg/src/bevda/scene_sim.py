"""Procedural traffic scenes and an ideal spinning-LiDAR raycaster (the synthetic domain)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .pointcloud_io import TWO_PI, GroundTruthBox, PointCloud

VEHICLE_INTENSITY = 0.9
GROUND_INTENSITY = 0.3
MAX_REJECTIONS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class Scene:
    vehicles: list = field(default_factory=list)
    ground_z: float = 0.0
    extent: tuple = (3.0, 38.0, -18.0, 18.0)


def hdl64_like_elevations(rings: int = 64, lo_deg: float = -24.8, hi_deg: float = 2.0) -> np.ndarray:
    return np.radians(np.linspace(lo_deg, hi_deg, rings))


@dataclass
class LidarModel:
    elevations: np.ndarray = field(default_factory=lambda: hdl64_like_elevations(64))
    azimuth_steps: int = 1024
    max_range: float = 80.0
    sensor_height: float = 1.73
    scan_period: float = 0.1

    def __post_init__(self):
        self.elevations = np.asarray(self.elevations, dtype=np.float64)
        if self.elevations.size < 1 or np.any(np.diff(self.elevations) <= 0):
            raise ValueError("elevations must be non-empty and strictly increasing")
        if self.azimuth_steps < 8:
            raise ValueError("azimuth_steps must be >= 8")
        if not (self.max_range > 0 and self.scan_period > 0):
            raise ValueError("max_range and scan_period must be positive")

    @property
    def rings(self) -> int:
        return self.elevations.size


def footprints_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex polygons given as (k, 2) corner arrays."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for nx, ny in np.stack([-edges[:, 1], edges[:, 0]], axis=1):
            pa = a @ (nx, ny)
            pb = b @ (nx, ny)
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True


def generate_scene(seed: int, n_vehicles: int, extent=(3.0, 38.0, -18.0, 18.0),
                   ground_z: float = 0.0) -> Scene:
    """Sample non-overlapping vehicles uniformly inside ``extent`` (deterministic in seed)."""
    if n_vehicles < 0:
        raise ValueError("n_vehicles must be >= 0")
    x0, x1, y0, y1 = extent
    rng = np.random.default_rng([seed, 0x5CE7E])
    vehicles: list[GroundTruthBox] = []
    feet: list[np.ndarray] = []
    rejections = 0
    while len(vehicles) < n_vehicles:
        box = GroundTruthBox(
            cx=rng.uniform(x0, x1), cy=rng.uniform(y0, y1),
            length=rng.uniform(3.5, 5.5), width=rng.uniform(1.6, 2.0),
            yaw=rng.uniform(-math.pi, math.pi), height=rng.uniform(1.4, 1.8))
        corners = box.corners()
        inside = (corners[:, 0].min() >= x0 and corners[:, 0].max() <= x1
                  and corners[:, 1].min() >= y0 and corners[:, 1].max() <= y1)
        if inside and not any(footprints_overlap(corners, f) for f in feet):
            vehicles.append(box)
            feet.append(corners)
            continue
        rejections += 1
        if rejections > MAX_REJECTIONS:
            raise PlacementError(f"could not place {n_vehicles} vehicles after {MAX_REJECTIONS} "
                                 "rejections; try a smaller n_vehicles or a larger extent")
    return Scene(vehicles, ground_z, tuple(extent))


def ray_directions(lidar: LidarModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit directions (R*A, 3) plus ring index and azimuth per ray, ring-major."""
    az = TWO_PI * np.arange(lidar.azimuth_steps) / lidar.azimuth_steps
    el = lidar.elevations
    ring = np.repeat(np.arange(el.size), az.size)
    azr = np.tile(az, el.size)
    elr = np.repeat(el, az.size)
    d = np.stack([np.cos(elr) * np.cos(azr), np.cos(elr) * np.sin(azr), np.sin(elr)], axis=1)
    return d, ring, azr


def ray_box_hits(d: np.ndarray, origin: np.ndarray, box: GroundTruthBox, z_lo: float,
                 z_hi: float) -> np.ndarray:
    """Entry distance of each ray into an upright yawed cuboid (inf on miss)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox, oy = origin[0] - box.cx, origin[1] - box.cy
    # rotate into the box frame
    lo = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2]])
    ld = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
    lower = np.array([-box.length / 2, -box.width / 2, z_lo])
    upper = np.array([box.length / 2, box.width / 2, z_hi])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lower - lo) / ld
        t2 = (upper - lo) / ld
    near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    far = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # parallel rays outside the slab never hit
    parallel = ld == 0
    outside = parallel & ((lo < lower) | (lo > upper))
    tn = near.max(axis=1)
    tf = far.min(axis=1)
    hit = (tn <= tf) & (tn > 0) & ~outside.any(axis=1)
    return np.where(hit, tn, np.inf)


def raycast_scan(scene: Scene, lidar: LidarModel, seed: int = 0) -> PointCloud:
    """Noiseless scan in the sensor frame (sensor at the origin, ground at -sensor_height).

    ``seed`` is accepted for interface symmetry; the ideal model draws nothing.
    """
    d, ring, az = ray_directions(lidar)
    origin = np.array([0.0, 0.0, 0.0])
    ground = -lidar.sensor_height
    with np.errstate(divide="ignore"):
        t_ground = np.where(d[:, 2] < 0, ground / d[:, 2], np.inf)
    best = t_ground
    kind = np.zeros(len(d), dtype=np.int8)
    for box in scene.vehicles:
        t = ray_box_hits(d, origin, box, ground, ground + box.height)
        closer = t < best
        best = np.where(closer, t, best)
        kind[closer] = 1
    keep = best <= lidar.max_range
    pts = d[keep] * best[keep, None]
    # ground hits sit on the plane exactly
    pts[kind[keep] == 0, 2] = ground
    inten = np.where(kind[keep] == 1, VEHICLE_INTENSITY, GROUND_INTENSITY)
    return PointCloud(np.column_stack([pts, inten]), ring[keep], az[keep])
