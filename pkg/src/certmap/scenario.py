"""YAML scenario files: scene, trajectory, camera, noise, grid and registration settings."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .camera import CameraModel
from .registration import GncConfig
from .simworld import AxisBox, Keyframe, Plane, Scene, SensorNoiseModel, Sphere, Trajectory, make_room_scene


class ScenarioError(ValueError):
    pass


class _Map(dict):
    line = 0


class _Seq(list):
    line = 0


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    out = _Map(loader.construct_mapping(node, deep=True))
    out.line = node.start_mark.line + 1
    return out


def _construct_seq(loader, node):
    out = _Seq(loader.construct_sequence(node, deep=True))
    out.line = node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


@dataclass(frozen=True)
class GridSpec:
    lo: tuple
    hi: tuple
    resolution: float = 0.05
    esdf_period_s: float = 0.2


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    scene: Scene
    trajectory: Trajectory
    camera: CameraModel
    noise: SensorNoiseModel
    grid: GridSpec
    features: int = 300
    fraction: float = 0.05
    iterations: int = 1000
    gnc: GncConfig = field(default_factory=GncConfig)
    seed: int = 0
    source: str = "<memory>"

    @property
    def esdf_period_frames(self) -> int:
        return max(1, int(round(self.grid.esdf_period_s * self.trajectory.frame_rate)))


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node, msg: str):
        line = getattr(node, "line", 0)
        where = f"{self.source}:{line}" if line else self.source
        raise ScenarioError(f"{where}: {msg}")

    def section(self, node, key: str, required: bool = True):
        if not isinstance(node, dict):
            self.fail(node, f"expected a mapping containing '{key}'")
        if key not in node:
            if required:
                self.fail(node, f"missing required key '{key}'")
            return None
        return node[key]

    def number(self, node, key: str, default=None, positive: bool = False):
        val = self.section(node, key, required=default is None)
        if val is None:
            return default
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(node, f"'{key}' must be a number, got {val!r}")
        if positive and not val > 0:
            self.fail(node, f"'{key}' must be positive, got {val}")
        return val

    def vector(self, node, key: str, n: int = 3) -> tuple:
        val = self.section(node, key)
        if not isinstance(val, list) or len(val) != n or not all(isinstance(x, (int, float)) for x in val):
            self.fail(node, f"'{key}' must be a list of {n} numbers")
        return tuple(float(x) for x in val)

    def build(self, doc) -> Scenario:
        if not isinstance(doc, dict):
            raise ScenarioError(f"{self.source}: top level must be a mapping")
        return Scenario(
            name=str(doc.get("name", Path(self.source).stem)),
            scene=self.scene(self.section(doc, "scene")),
            trajectory=self.trajectory(doc),
            camera=self.camera(self.section(doc, "camera")),
            noise=self.noise(doc.get("noise", _Map())),
            grid=self.grid(self.section(doc, "grid")),
            features=int(self.number(doc, "features", 300, positive=True)),
            fraction=float(self.number(doc, "fraction", 0.05, positive=True)),
            iterations=int(self.number(doc, "iterations", 1000, positive=True)),
            gnc=self.gnc(doc.get("gnc", _Map())),
            seed=int(self.number(doc, "seed", 0)),
            source=self.source,
        )

    def scene(self, node) -> Scene:
        prims = []
        for item in self.section(node, "primitives", required=False) or []:
            if not isinstance(item, dict) or len(item) != 1:
                self.fail(item if isinstance(item, dict) else node, "each primitive is a one-key mapping (sphere/box/plane)")
            kind, body = next(iter(item.items()))
            try:
                if kind == "sphere":
                    prims.append(Sphere(self.vector(body, "center"), float(self.number(body, "radius", positive=True))))
                elif kind == "box":
                    prims.append(AxisBox(self.vector(body, "min"), self.vector(body, "max")))
                elif kind == "plane":
                    prims.append(Plane(self.vector(body, "normal"), float(self.number(body, "offset"))))
                else:
                    self.fail(item, f"unknown primitive '{kind}'")
            except ValueError as exc:
                if isinstance(exc, ScenarioError):
                    raise
                self.fail(item, str(exc))
        room = self.section(node, "room", required=False)
        if room is not None:
            return make_room_scene(
                float(self.number(room, "half_x", positive=True)),
                float(self.number(room, "half_y", positive=True)),
                float(self.number(room, "height", positive=True)),
                float(self.number(room, "thickness", 0.2, positive=True)),
                extra=prims,
            )
        if not prims:
            self.fail(node, "scene needs a room or at least one primitive")
        return Scene(prims)

    def trajectory(self, doc) -> Trajectory:
        rate = float(self.number(doc, "frame_rate", positive=True))
        node = self.section(doc, "trajectory")
        if not isinstance(node, list) or not node:
            self.fail(doc, "'trajectory' must be a non-empty list of keyframes")
        kfs = []
        for kf in node:
            kfs.append(
                Keyframe(
                    float(self.number(kf, "t")),
                    self.vector(kf, "position"),
                    float(self.number(kf, "yaw", 0.0)),
                    float(self.number(kf, "pitch", 0.0)),
                    float(self.number(kf, "roll", 0.0)),
                )
            )
            if len(kfs) > 1 and kfs[-1].time <= kfs[-2].time:
                self.fail(kf, "keyframe times must be strictly increasing")
        return Trajectory(kfs, rate)

    def camera(self, node) -> CameraModel:
        w = int(self.number(node, "width", positive=True))
        h = int(self.number(node, "height", positive=True))
        try:
            return CameraModel(
                float(self.number(node, "fx", positive=True)),
                float(self.number(node, "fy", positive=True)),
                float(self.number(node, "cx", (w - 1) / 2.0)),
                float(self.number(node, "cy", (h - 1) / 2.0)),
                w,
                h,
                float(self.number(node, "max_depth", positive=True)),
                float(self.number(node, "min_depth", 0.1, positive=True)),
            )
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            self.fail(node, str(exc))

    def noise(self, node) -> SensorNoiseModel:
        try:
            return SensorNoiseModel(
                float(self.number(node, "delta_fraction", 0.02)),
                float(self.number(node, "delta_floor", 0.005)),
                float(self.number(node, "outlier_rate", 0.0)),
                float(self.number(node, "outlier_magnitude", 1.0)),
                fill=float(self.number(node, "fill", 1.0)),
            )
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            self.fail(node, str(exc))

    def grid(self, node) -> GridSpec:
        lo, hi = self.vector(node, "min"), self.vector(node, "max")
        if not all(b > a for a, b in zip(lo, hi)):
            self.fail(node, "grid max must exceed min on every axis")
        return GridSpec(
            lo, hi,
            float(self.number(node, "resolution", 0.05, positive=True)),
            float(self.number(node, "esdf_period", 0.2, positive=True)),
        )

    def gnc(self, node) -> GncConfig:
        try:
            return GncConfig(
                int(self.number(node, "max_iterations", 100, positive=True)),
                float(self.number(node, "mu_update_factor", 1.4)),
                float(self.number(node, "convergence_tol", 1e-6, positive=True)),
                float(self.number(node, "noise_multiplier", 1.0, positive=True)),
            )
        except ValueError as exc:
            if isinstance(exc, ScenarioError):
                raise
            self.fail(node, str(exc))


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ScenarioError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    return _Reader(source).build(doc)


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (e.g. ``lab-yaw``)."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("certmap.scenarios") / f"{str(path).replace('-', '_')}.yaml"
        if not bundled.is_file():
            raise ScenarioError(f"{path}: no such scenario file")
        return parse_scenario(bundled.read_text(), str(path))
    return parse_scenario(p.read_text(), str(p))
