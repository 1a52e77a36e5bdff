"""Experiment configuration: flat ``key = value`` INI sections mirroring module configs."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..artifact_sim import ArtifactConfig
from ..bev_raster import BevGridConfig
from ..cyclegan import CycleGanConfig
from ..detector import DetectorConfig
from ..scene_sim import LidarModel, hdl64_like_elevations


class ConfigError(ValueError):
    pass


@dataclass
class LidarParams:
    rings: int = 64
    elev_lo_deg: float = -24.8
    elev_hi_deg: float = 2.0
    azimuth_steps: int = 1024
    max_range: float = 80.0
    sensor_height: float = 1.73
    scan_period: float = 0.1

    def model(self) -> LidarModel:
        return LidarModel(hdl64_like_elevations(self.rings, self.elev_lo_deg, self.elev_hi_deg),
                          self.azimuth_steps, self.max_range, self.sensor_height, self.scan_period)


@dataclass
class SceneParams:
    extent: tuple = (3.0, 38.0, -18.0, 18.0)
    ground_z: float = 0.0
    min_vehicles: int = 2
    max_vehicles: int = 8

    def __post_init__(self):
        if not 0 <= self.min_vehicles <= self.max_vehicles:
            raise ConfigError("need 0 <= min_vehicles <= max_vehicles")


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train_s: int = 300
    n_train_r: int = 300
    n_test_r: int = 100
    out_dir: str = "runs/default"
    scene: SceneParams = field(default_factory=SceneParams)
    lidar: LidarParams = field(default_factory=LidarParams)
    artifact: ArtifactConfig = field(default_factory=ArtifactConfig)
    grid: BevGridConfig = field(default_factory=BevGridConfig)
    cyclegan: CycleGanConfig = field(default_factory=CycleGanConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.n_test_r < 1:
            raise ConfigError("n_test_r must be >= 1")
        if min(self.n_train_s, self.n_train_r) < 0:
            raise ConfigError("dataset sizes must be >= 0")
        if self.grid.height != self.cyclegan.image_size or self.grid.width != self.cyclegan.image_size:
            raise ConfigError(f"grid is {self.grid.height}x{self.grid.width} but "
                              f"cyclegan.image_size is {self.cyclegan.image_size}")
        self.with_seed(self.seed)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate the run seed into the stage configs (in place)."""
        self.seed = int(seed)
        self.cyclegan.seed = self.seed
        self.detector.seed = self.seed
        return self


# section name -> attribute on ExperimentConfig (None for top-level scalars)
SECTIONS = {
    "experiment": None,
    "scene": "scene",
    "lidar": "lidar",
    "artifact": "artifact",
    "grid": "grid",
    "cyclegan": "cyclegan",
    "detector": "detector",
}
# seeds are owned by [experiment]
_SKIP = {"cyclegan": {"seed"}, "detector": {"seed"}}


def _fields(section: str, obj) -> list:
    if section == "experiment":
        return [f for f in dataclasses.fields(obj) if f.name not in SECTIONS.values()]
    return [f for f in dataclasses.fields(obj) if f.name not in _SKIP.get(section, ())]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _section_obj(cfg: ExperimentConfig, section: str):
    attr = SECTIONS[section]
    return cfg if attr is None else getattr(cfg, attr)


def to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = _section_obj(cfg, section)
        lines.append(f"[{section}]")
        for f in _fields(section, obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    base = ExperimentConfig()
    values: dict = {}
    for section in SECTIONS:
        obj = _section_obj(base, section)
        known = {f.name: f for f in _fields(section, obj)}
        given = parser[section] if parser.has_section(section) else {}
        extra = set(given) - set(known)
        if extra:
            raise ConfigError(f"[{section}] unknown keys: {sorted(extra)}")
        kwargs = {name: _parse(given[name], getattr(obj, name), f"[{section}] {name}")
                  for name in given}
        if section == "experiment":
            values.update(kwargs)
        else:
            try:
                values[SECTIONS[section]] = dataclasses.replace(obj, **kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from None
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    return from_ini(Path(path).read_text(encoding="utf-8"))


def detector_arch_hash(det: DetectorConfig, channels: int) -> str:
    """Hash of everything that shapes the detector network (not its data)."""
    desc = f"channels={channels};widths={tuple(det.widths)};anchors={det.n_anchors};classes={det.n_classes}"
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def sample_seed(run_seed: int, domain: str, index: int) -> int:
    """Per-sample scene seed; independent across domains and splits."""
    tag = int.from_bytes(hashlib.sha256(domain.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([run_seed, tag, index]).generate_state(1)[0])
