import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from bevda.pointcloud_io import GroundTruthBox
from bevda.scene_sim import (
    LidarModel,
    PlacementError,
    Scene,
    generate_scene,
    ray_directions,
    raycast_scan,
)


def test_empty_scene():
    assert generate_scene(0, 0).vehicles == []


def test_same_seed_same_scene():
    assert generate_scene(7, 5) == generate_scene(7, 5)
    assert generate_scene(7, 5) != generate_scene(8, 5)


def test_size_ranges_and_extent():
    for seed in range(50):
        scene = generate_scene(seed, 6)
        x0, x1, y0, y1 = scene.extent
        for v in scene.vehicles:
            assert 3.5 <= v.length <= 5.5 and 1.6 <= v.width <= 2.0 and 1.4 <= v.height <= 1.8
            c = v.corners()
            assert c[:, 0].min() >= x0 and c[:, 0].max() <= x1
            assert c[:, 1].min() >= y0 and c[:, 1].max() <= y1


def test_no_footprint_overlap_1000_scenes():
    overlaps = 0
    for seed in range(1000):
        polys = [Polygon(v.corners()) for v in generate_scene(seed, 5).vehicles]
        overlaps += sum(polys[i].intersection(polys[j]).area > 1e-12
                        for i in range(len(polys)) for j in range(i + 1, len(polys)))
    assert overlaps == 0


def test_placement_failure():
    with pytest.raises(PlacementError, match="smaller n_vehicles"):
        generate_scene(0, 50, extent=(0.0, 10.0, 0.0, 10.0))


def test_flat_ground_ring_radius():
    el = math.radians(-10.0)
    lidar = LidarModel(np.array([el]), azimuth_steps=360, sensor_height=1.73)
    cloud = raycast_scan(Scene(), lidar)
    assert len(cloud) == 360
    r = np.hypot(cloud.points[:, 0], cloud.points[:, 1])
    np.testing.assert_allclose(r, 1.73 / math.tan(-el), rtol=1e-12)
    np.testing.assert_array_equal(cloud.points[:, 2], -1.73)
    np.testing.assert_array_equal(cloud.points[:, 3], 0.3)


def test_upward_ring_returns_nothing():
    lidar = LidarModel(np.radians([-10.0, 5.0]), azimuth_steps=64)
    cloud = raycast_scan(Scene(), lidar)
    assert len(cloud) == 64
    assert set(cloud.ring.tolist()) == {0}


def test_range_limit():
    lidar = LidarModel(np.radians([-1.0]), azimuth_steps=32, max_range=50.0)
    # ground hit at 1.73 / tan(1 deg) ~ 99 m is beyond range
    assert len(raycast_scan(Scene(), lidar)) == 0


def test_vehicle_occludes_ground():
    box = GroundTruthBox(10.0, 0.0, 4.0, 2.0, 0.0, height=1.6)
    lidar = LidarModel(azimuth_steps=2048)
    cloud = raycast_scan(Scene([box]), lidar)
    # azimuths whose rays cross the whole footprint between x = 8 and x = 12
    az = np.where(cloud.azimuth > math.pi, cloud.azimuth - 2 * math.pi, cloud.azimuth)
    along = np.abs(az) < math.atan2(0.9, 12.0)
    rng_xy = np.hypot(cloud.points[along, 0], cloud.points[along, 1])
    assert along.sum() > 0
    assert rng_xy.max() <= math.hypot(12.0, 0.9)
    # nothing beyond the near face except vehicle returns
    assert np.all(cloud.points[along][rng_xy > 8.0 + 1e-9, 3] == 0.9)


def brute_force_hit(d, box, ground):
    """Nearest hit by marching each face plane separately."""
    best = ground / d[2] if d[2] < 0 else math.inf
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx, ly, lz = c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]
    hl, hw = box.length / 2, box.width / 2
    ox, oy = c * -box.cx + s * -box.cy, -s * -box.cx + c * -box.cy
    for axis, half in ((0, hl), (1, hw)):
        o, v = (ox, lx) if axis == 0 else (oy, ly)
        if v == 0:
            continue
        for face in (-half, half):
            t = (face - o) / v
            if t <= 0:
                continue
            px, py, pz = ox + t * lx, oy + t * ly, t * lz
            if abs(px) <= hl + 1e-12 and abs(py) <= hw + 1e-12 and ground <= pz <= ground + box.height:
                best = min(best, t)
    if lz != 0:
        t = (ground + box.height) / lz
        px, py = ox + t * lx, oy + t * ly
        if t > 0 and abs(px) <= hl and abs(py) <= hw:
            best = min(best, t)
    return best


def test_raycast_matches_brute_force_per_ray():
    box = GroundTruthBox(8.0, 3.0, 4.5, 1.8, 0.6, height=1.5)
    lidar = LidarModel(np.radians(np.linspace(-20, -1, 6)), azimuth_steps=256)
    cloud = raycast_scan(Scene([box]), lidar)
    d, ring, az = ray_directions(lidar)
    expected = np.array([brute_force_hit(di, box, -lidar.sensor_height) for di in d])
    expected[expected > lidar.max_range] = np.inf
    hit = np.isfinite(expected)
    assert len(cloud) == hit.sum()
    np.testing.assert_allclose(np.linalg.norm(cloud.points[:, :3], axis=1), expected[hit], rtol=1e-9)


def surface_residual(p, boxes, ground):
    res = abs(p[2] - ground)
    for b in boxes:
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        x, y = p[0] - b.cx, p[1] - b.cy
        lx, ly = c * x + s * y, -s * x + c * y
        hl, hw = b.length / 2, b.width / 2
        inside = abs(lx) <= hl + 1e-9 and abs(ly) <= hw + 1e-9 and ground - 1e-9 <= p[2] <= ground + b.height + 1e-9
        if inside:
            res = min(res, abs(abs(lx) - hl), abs(abs(ly) - hw), abs(p[2] - ground - b.height))
    return res


def test_points_lie_on_surfaces():
    scene = generate_scene(3, 6)
    lidar = LidarModel(azimuth_steps=256)
    cloud = raycast_scan(scene, lidar)
    ground = -lidar.sensor_height
    worst = max(surface_residual(p, scene.vehicles, ground) for p in cloud.points)
    assert worst < 1e-9
    assert len(cloud) <= lidar.rings * lidar.azimuth_steps


def test_raycast_deterministic_with_provenance():
    scene = generate_scene(4, 4)
    a, b = raycast_scan(scene, LidarModel(), 1), raycast_scan(scene, LidarModel(), 1)
    np.testing.assert_array_equal(a.points, b.points)
    assert a.has_provenance and np.all((a.azimuth >= 0) & (a.azimuth < 2 * math.pi))


def test_lidar_model_invariants():
    with pytest.raises(ValueError):
        LidarModel(np.radians([0.0, -1.0]))
    with pytest.raises(ValueError):
        LidarModel(azimuth_steps=4)
    with pytest.raises(ValueError):
        LidarModel(scan_period=0.0)
