"""Real-sensor artefacts injected into ideal scans: ego-motion smear, beam gain
variability, intensity noise, dropout and radial range noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud_io import TWO_PI, PointCloud


class ProvenanceError(ValueError):
    pass


@dataclass
class ArtifactConfig:
    ego_velocity: tuple = (8.0, 0.0)
    gain_sigma: float = 0.15
    noise_sigma: float = 0.05
    dropout_prob: float = 0.1
    range_noise_sigma: float = 0.03

    def __post_init__(self):
        self.ego_velocity = tuple(float(v) for v in self.ego_velocity)
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob must lie in [0, 1), got {self.dropout_prob}")
        if min(self.gain_sigma, self.noise_sigma, self.range_noise_sigma) < 0:
            raise ValueError("noise sigmas must be >= 0")

    @classmethod
    def zero(cls) -> "ArtifactConfig":
        return cls((0.0, 0.0), 0.0, 0.0, 0.0, 0.0)


def _require_provenance(cloud: PointCloud, what: str) -> None:
    if not cloud.has_provenance:
        raise ProvenanceError(f"{what} needs per-point ring/azimuth provenance")


def apply_motion_distortion(cloud: PointCloud, ego_velocity, scan_period: float) -> PointCloud:
    """Shift each point by -v * t with t = azimuth / (2 pi) * scan_period."""
    _require_provenance(cloud, "motion distortion")
    vx, vy = ego_velocity
    if vx == 0 and vy == 0:
        return PointCloud(cloud.points.copy(), cloud.ring.copy(), cloud.azimuth.copy())
    t = cloud.azimuth / TWO_PI * scan_period
    pts = cloud.points.copy()
    pts[:, 0] -= vx * t
    pts[:, 1] -= vy * t
    return PointCloud(pts, cloud.ring.copy(), cloud.azimuth.copy())


def ring_gains(n_rings: int, gain_sigma: float, seed: int) -> np.ndarray:
    """Per-ring multiplicative gains, drawn in ring order."""
    rng = np.random.default_rng([seed, 0x6A1])
    return rng.normal(1.0, gain_sigma, n_rings) if gain_sigma > 0 else np.ones(n_rings)


def apply_intensity_variation(cloud: PointCloud, gain_sigma: float, noise_sigma: float,
                              seed: int) -> PointCloud:
    _require_provenance(cloud, "intensity variation")
    if gain_sigma == 0 and noise_sigma == 0:
        return PointCloud(cloud.points.copy(), cloud.ring.copy(), cloud.azimuth.copy())
    n_rings = int(cloud.ring.max()) + 1 if len(cloud) else 0
    gains = ring_gains(n_rings, gain_sigma, seed)
    pts = cloud.points.copy()
    inten = gains[cloud.ring] * pts[:, 3]
    if noise_sigma > 0:
        inten = inten + np.random.default_rng([seed, 0x7015E]).normal(0.0, noise_sigma, len(pts))
    pts[:, 3] = np.clip(inten, 0.0, 1.0)
    return PointCloud(pts, cloud.ring.copy(), cloud.azimuth.copy())


def apply_dropout_and_range_noise(cloud: PointCloud, dropout_prob: float, range_noise_sigma: float,
                                  seed: int) -> PointCloud:
    """Drop points independently, then jitter survivors along their sensor ray."""
    if not 0.0 <= dropout_prob < 1.0:
        raise ValueError(f"dropout_prob must lie in [0, 1), got {dropout_prob}")
    rng = np.random.default_rng([seed, 0xD209])
    keep = rng.random(len(cloud)) >= dropout_prob if dropout_prob > 0 else slice(None)
    cloud = cloud.subset(keep)
    if range_noise_sigma > 0 and len(cloud):
        pts = cloud.points.copy()
        r = np.linalg.norm(pts[:, :3], axis=1)
        noisy = np.maximum(r + rng.normal(0.0, range_noise_sigma, len(r)), 0.0)
        safe = np.where(r > 0, r, 1.0)
        pts[:, :3] *= np.where(r > 0, noisy / safe, 1.0)[:, None]
        cloud = PointCloud(pts, cloud.ring, cloud.azimuth)
    return cloud


def apply_artifacts(cloud: PointCloud, config: ArtifactConfig, scan_period: float,
                    seed: int) -> PointCloud:
    """Motion distortion, then intensity variation, then dropout and range noise."""
    out = apply_motion_distortion(cloud, config.ego_velocity, scan_period)
    out = apply_intensity_variation(out, config.gain_sigma, config.noise_sigma, seed)
    return apply_dropout_and_range_noise(out, config.dropout_prob, config.range_noise_sigma, seed)

