"""Simulate one scene, inject sensor artefacts and export both BEV images as PGM.

    python demos/simulate_scene.py [seed] [out_dir]
"""
import sys
from pathlib import Path

from bevda.artifact_sim import ArtifactConfig, apply_artifacts
from bevda.bev_raster import BevGridConfig, boxes_to_pixels, rasterize, to_pgm
from bevda.scene_sim import LidarModel, generate_scene, raycast_scan


def main(seed: int = 0, out: Path = Path("demo_out")) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lidar, grid = LidarModel(), BevGridConfig()
    scene = generate_scene(seed, 5)
    ideal = raycast_scan(scene, lidar, seed)
    real = apply_artifacts(ideal, ArtifactConfig(), lidar.scan_period, seed)
    print(f"{len(scene.vehicles)} vehicles, {len(ideal)} ideal returns, {len(real)} after artefacts")
    for name, cloud in (("ideal", ideal), ("real", real)):
        img = rasterize(cloud, grid)
        for c, plane in enumerate(("height", "intensity", "density")):
            (out / f"{name}_{plane}.pgm").write_bytes(to_pgm(img.channels[c]))
    for b in boxes_to_pixels(scene.vehicles, grid):
        print(f"  box row {b.cy:5.1f} col {b.cx:5.1f}  {b.h:4.1f} x {b.w:4.1f} px")
    print(f"PGM planes written to {out}/")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0,
         Path(sys.argv[2]) if len(sys.argv) > 2 else Path("demo_out"))
