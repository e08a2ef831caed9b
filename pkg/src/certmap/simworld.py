"""Analytic ground-truth world: obstacle scenes, trajectories, depth rendering, matched points.

Body frames follow the camera optical convention (x right, y down, z forward);
the inertial frame is z-up. Poses are body-to-inertial :class:`RotoTranslation`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .camera import CameraModel
from .geom import RotoTranslation, axis_angle_to_rotation, invert, rot_x, rot_y, rot_z
from .registration import CorrespondenceSet

TRACE_TOL = 1e-4
TRACE_STEPS = 256
TRACE_STEP_SCALE = 0.9
INVALID_DEPTH = 0.0

# camera optical axes expressed in a z-up body at zero yaw: forward = +x, right = -y, down = -z
_OPTICAL_TO_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


class InsufficientFeatures(RuntimeError):
    pass


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class AxisBox:
    min_corner: tuple
    max_corner: tuple

    def __post_init__(self):
        if not np.all(np.asarray(self.max_corner, float) > np.asarray(self.min_corner, float)):
            raise ValueError("box extents must be positive")


@dataclass(frozen=True)
class Plane:
    """Half-space ``normal . x <= offset`` is solid."""

    normal: tuple
    offset: float

    def __post_init__(self):
        if np.linalg.norm(np.asarray(self.normal, float)) == 0:
            raise ValueError("plane normal must be nonzero")


@dataclass(frozen=True, eq=False)
class Scene:
    primitives: tuple

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", prims)
        spheres = [(*p.center, p.radius) for p in prims if isinstance(p, Sphere)]
        boxes = [(*p.min_corner, *p.max_corner) for p in prims if isinstance(p, AxisBox)]
        planes = []
        for p in prims:
            if isinstance(p, Plane):
                n = np.asarray(p.normal, float)
                norm = np.linalg.norm(n)
                planes.append((*(n / norm), p.offset / norm))
        object.__setattr__(self, "_spheres", np.array(spheres, dtype=float).reshape(-1, 4))
        object.__setattr__(self, "_boxes", np.array(boxes, dtype=float).reshape(-1, 6))
        object.__setattr__(self, "_planes", np.array(planes, dtype=float).reshape(-1, 4))

    @property
    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._spheres, self._boxes, self._planes


@njit(cache=True)
def _sdf(px, py, pz, spheres, boxes, planes):
    d = np.inf
    for i in range(spheres.shape[0]):
        dx = px - spheres[i, 0]
        dy = py - spheres[i, 1]
        dz = pz - spheres[i, 2]
        d = min(d, math.sqrt(dx * dx + dy * dy + dz * dz) - spheres[i, 3])
    for i in range(boxes.shape[0]):
        qx = abs(px - 0.5 * (boxes[i, 0] + boxes[i, 3])) - 0.5 * (boxes[i, 3] - boxes[i, 0])
        qy = abs(py - 0.5 * (boxes[i, 1] + boxes[i, 4])) - 0.5 * (boxes[i, 4] - boxes[i, 1])
        qz = abs(pz - 0.5 * (boxes[i, 2] + boxes[i, 5])) - 0.5 * (boxes[i, 5] - boxes[i, 2])
        ox = max(qx, 0.0)
        oy = max(qy, 0.0)
        oz = max(qz, 0.0)
        inside = min(max(qx, max(qy, qz)), 0.0)
        d = min(d, math.sqrt(ox * ox + oy * oy + oz * oz) + inside)
    for i in range(planes.shape[0]):
        d = min(d, planes[i, 0] * px + planes[i, 1] * py + planes[i, 2] * pz - planes[i, 3])
    return d


@njit(cache=True, parallel=True)
def _sdf_batch(pts, spheres, boxes, planes):
    out = np.empty(pts.shape[0])
    for i in prange(pts.shape[0]):
        out[i] = _sdf(pts[i, 0], pts[i, 1], pts[i, 2], spheres, boxes, planes)
    return out


@njit(cache=True)
def _trace(ox, oy, oz, dx, dy, dz, max_t, spheres, boxes, planes):
    # returns hit distance along the unit direction, or -1 on a miss
    t = 0.0
    for _ in range(TRACE_STEPS):
        d = _sdf(ox + t * dx, oy + t * dy, oz + t * dz, spheres, boxes, planes)
        if d < TRACE_TOL:
            return t
        t += TRACE_STEP_SCALE * d
        if t > max_t:
            return -1.0
    return -1.0


@njit(cache=True, parallel=True)
def _trace_batch(origins, dirs, max_t, spheres, boxes, planes):
    out = np.empty(origins.shape[0])
    for i in prange(origins.shape[0]):
        out[i] = _trace(
            origins[i, 0], origins[i, 1], origins[i, 2],
            dirs[i, 0], dirs[i, 1], dirs[i, 2], max_t[i], spheres, boxes, planes,
        )
    return out


@njit(cache=True, parallel=True)
def _render(rays, rot, origin, max_depth, spheres, boxes, planes):
    h, w = rays.shape[0], rays.shape[1]
    depth = np.zeros((h, w))
    for r in prange(h):
        for c in range(w):
            rx, ry, rz = rays[r, c, 0], rays[r, c, 1], rays[r, c, 2]
            inv = 1.0 / math.sqrt(rx * rx + ry * ry + rz * rz)
            dx = (rot[0, 0] * rx + rot[0, 1] * ry + rot[0, 2] * rz) * inv
            dy = (rot[1, 0] * rx + rot[1, 1] * ry + rot[1, 2] * rz) * inv
            dz = (rot[2, 0] * rx + rot[2, 1] * ry + rot[2, 2] * rz) * inv
            # z-depth = t * (unit ray z in camera frame)
            t = _trace(origin[0], origin[1], origin[2], dx, dy, dz, max_depth / (rz * inv) + 1e-3,
                       spheres, boxes, planes)
            if t > 0.0:
                z = t * rz * inv
                if z <= max_depth:
                    depth[r, c] = z
    return depth


def scene_sdf(scene: Scene, p) -> np.ndarray | float:
    """Exact signed distance to the union of primitives (negative inside)."""
    p = np.asarray(p, dtype=float)
    pts = np.ascontiguousarray(p.reshape(-1, 3))
    out = _sdf_batch(pts, *scene.packed)
    return float(out[0]) if p.ndim == 1 else out.reshape(p.shape[:-1])


def render_depth(scene: Scene, cam: CameraModel, pose: RotoTranslation) -> np.ndarray:
    """Z-depth image by sphere tracing; misses and hits beyond ``max_depth`` are ``INVALID_DEPTH``."""
    return _render(
        np.ascontiguousarray(cam.pixel_rays()),
        np.ascontiguousarray(pose.rotation),
        np.ascontiguousarray(pose.translation),
        cam.max_depth,
        *scene.packed,
    )


def trace_rays(scene: Scene, origins, directions, max_t) -> np.ndarray:
    """Hit distances along unit ``directions``; -1 where nothing is hit within ``max_t``."""
    origins = np.ascontiguousarray(np.asarray(origins, float).reshape(-1, 3))
    dirs = np.asarray(directions, float).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=1, keepdims=True))
    max_t = np.ascontiguousarray(np.broadcast_to(np.asarray(max_t, float), (len(origins),)))
    return _trace_batch(origins, dirs, max_t, *scene.packed)


# --------------------------------------------------------------------------
# trajectories


def body_rotation(yaw_deg: float, pitch_deg: float = 0.0, roll_deg: float = 0.0) -> np.ndarray:
    """Optical-frame camera orientation for z-up yaw/pitch/roll (degrees)."""
    return rot_z(math.radians(yaw_deg)) @ rot_y(math.radians(pitch_deg)) @ rot_x(math.radians(roll_deg)) @ _OPTICAL_TO_BODY


@dataclass(frozen=True)
class Keyframe:
    time: float
    position: tuple
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-linear interpolation of position and yaw/pitch/roll between keyframes."""

    keyframes: tuple
    frame_rate: float

    def __post_init__(self):
        kfs = tuple(self.keyframes)
        if len(kfs) < 1:
            raise ValueError("trajectory needs at least one keyframe")
        times = np.array([k.time for k in kfs])
        if np.any(np.diff(times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        object.__setattr__(self, "keyframes", kfs)

    @property
    def duration(self) -> float:
        return self.keyframes[-1].time - self.keyframes[0].time

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def frame_time(self, k: int) -> float:
        return self.keyframes[0].time + k / self.frame_rate

    def pose_at(self, time: float) -> RotoTranslation:
        times = np.array([k.time for k in self.keyframes])
        vals = np.array([[*k.position, k.yaw, k.pitch, k.roll] for k in self.keyframes], dtype=float)
        v = np.array([np.interp(time, times, vals[:, i]) for i in range(6)])
        return RotoTranslation(body_rotation(v[3], v[4], v[5]), v[:3])

    def pose(self, k: int) -> RotoTranslation:
        return self.pose_at(self.frame_time(k))


def relative_motion(pose_k: RotoTranslation, pose_k1: RotoTranslation) -> RotoTranslation:
    """Frame-k to frame-(k+1) transform, so that ``p_{k+1} = R p_k + t``."""
    return invert(pose_k1) @ pose_k


# --------------------------------------------------------------------------
# correspondences


@dataclass(frozen=True)
class SensorNoiseModel:
    delta_fraction: float = 0.02
    delta_floor: float = 0.005
    outlier_rate: float = 0.0
    outlier_magnitude: float = 1.0
    rng_seed: int = 0
    fill: float = 1.0  # noise magnitude is drawn from [0, fill * delta]; 0 gives exact data

    def __post_init__(self):
        if self.delta_fraction < 0 or self.delta_floor <= 0:
            raise ValueError("delta_fraction must be >= 0 and delta_floor > 0")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must be in [0, 1)")
        if not self.outlier_magnitude > 0:
            raise ValueError("outlier_magnitude must be positive")
        if not 0.0 <= self.fill <= 1.0:
            raise ValueError("fill must be in [0, 1]")

    def bound(self, ranges) -> np.ndarray:
        return np.maximum(self.delta_fraction * np.asarray(ranges, float), self.delta_floor)


def _random_units(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _bounded_noise(rng: np.random.Generator, delta: np.ndarray) -> np.ndarray:
    return _random_units(rng, len(delta)) * (rng.random(len(delta)) * delta)[:, None]


def corrupt_pairs(a_true, b_true, noise: SensorNoiseModel, rng: np.random.Generator):
    """Add bounded per-frame noise to both sides and displace a fixed fraction of the ``b`` side.

    Returns ``(CorrespondenceSet, outlier_mask)``; the reported ``delta`` is the
    sum of the two per-frame bounds, each computed from the true range.
    """
    a_true = np.asarray(a_true, float)
    b_true = np.asarray(b_true, float)
    n = len(a_true)
    da = noise.bound(np.linalg.norm(a_true, axis=1))
    db = noise.bound(np.linalg.norm(b_true, axis=1))
    a = a_true + _bounded_noise(rng, noise.fill * da)
    b = b_true + _bounded_noise(rng, noise.fill * db)
    n_out = int(round(noise.outlier_rate * n))
    mask = np.zeros(n, dtype=bool)
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        mask[idx] = True
        b[idx] += noise.outlier_magnitude * _random_units(rng, n_out)
    return CorrespondenceSet(a, b, da + db), mask


def generate_correspondences(
    scene: Scene,
    cam: CameraModel,
    pose_k: RotoTranslation,
    pose_k1: RotoTranslation,
    count: int,
    noise: SensorNoiseModel,
    rng_seed=None,
    return_outliers: bool = False,
):
    """Sample ``count`` surface points seen by both cameras and return noisy matches.

    Returns ``(CorrespondenceSet, ground_truth)`` where ``ground_truth`` maps
    frame-k coordinates to frame k+1; with ``return_outliers`` an outlier mask
    is appended.
    """
    if count < 4:
        raise ValueError("count must be >= 4")
    rng = np.random.default_rng(noise.rng_seed if rng_seed is None else rng_seed)
    truth = relative_motion(pose_k, pose_k1)
    inv_k1 = invert(pose_k1)
    found = []
    total = 0
    for _ in range(8):
        m = 4 * count
        col = rng.uniform(-0.5, cam.width - 0.5, m)
        row = rng.uniform(-0.5, cam.height - 0.5, m)
        rays = np.stack([(col - cam.cx) / cam.fx, (row - cam.cy) / cam.fy, np.ones(m)], axis=1)
        dirs = rays @ pose_k.rotation.T
        t = trace_rays(scene, np.tile(pose_k.translation, (m, 1)), dirs, cam.max_depth * np.linalg.norm(rays, axis=1))
        hit = t > 0
        unit = rays / np.linalg.norm(rays, axis=1, keepdims=True)
        pts_k = unit[hit] * t[hit, None]
        z_ok = (pts_k[:, 2] >= cam.min_depth) & (pts_k[:, 2] <= cam.max_depth)
        pts_k = pts_k[z_ok]
        world = pose_k.apply(pts_k)
        pts_k1 = inv_k1.apply(world)
        r, c, z = cam.project(pts_k1)
        ok = (r >= 0) & (z >= cam.min_depth) & (z <= cam.max_depth)
        if ok.any():
            to_pt = world[ok] - pose_k1.translation
            dist = np.linalg.norm(to_pt, axis=1)
            t2 = trace_rays(scene, np.tile(pose_k1.translation, (len(dist), 1)), to_pt, dist + 0.01)
            vis = np.zeros(len(ok), dtype=bool)
            vis[np.flatnonzero(ok)] = (t2 > 0) & (t2 >= dist - 5e-3)
            ok = vis
        found.append(pts_k[ok])
        total += int(ok.sum())
        if total >= count:
            break
    pts = np.concatenate(found)
    if len(pts) < count:
        raise InsufficientFeatures(f"only {len(pts)} co-visible surface points, need {count}")
    a_true = pts[:count]
    b_true = truth.apply(a_true)
    c, mask = corrupt_pairs(a_true, b_true, noise, rng)
    inl = ~mask
    res = np.linalg.norm(c.b[inl] - truth.apply(c.a[inl]), axis=1)
    assert np.all(res <= c.delta[inl] + 1e-12), "generated inlier violates its noise bound"
    if return_outliers:
        return c, truth, mask
    return c, truth


def random_registration_problem(
    rng: np.random.Generator,
    count: int = 300,
    noise: SensorNoiseModel | None = None,
    max_angle_deg: float = 30.0,
    max_translation: float = 0.5,
    depth_range: tuple = (0.5, 6.0),
    fov_deg: float = 90.0,
):
    """Points scattered through a camera frustum moved by a random rototranslation.

    Returns ``(CorrespondenceSet, truth, outlier_mask)``.
    """
    noise = noise or SensorNoiseModel()
    z = rng.uniform(*depth_range, count)
    half = math.tan(math.radians(fov_deg) / 2.0)
    xy = rng.uniform(-half, half, (count, 2)) * z[:, None]
    a_true = np.column_stack([xy, z])
    axis = _random_units(rng, 1)[0]
    angle = math.radians(max_angle_deg) * rng.random()
    truth = RotoTranslation(
        axis_angle_to_rotation(axis, angle), _random_units(rng, 1)[0] * max_translation * rng.random()
    )
    c, mask = corrupt_pairs(a_true, truth.apply(a_true), noise, rng)
    return c, truth, mask


def make_room_scene(
    half_x: float = 4.0, half_y: float = 4.0, height: float = 2.6, thickness: float = 0.2, extra=()
) -> Scene:
    """Closed box room (floor, ceiling and four walls) plus optional extra primitives."""
    hx, hy, h, w = half_x, half_y, height, thickness
    shell = (
        AxisBox((-hx - w, -hy - w, -w), (hx + w, hy + w, 0.0)),
        AxisBox((-hx - w, -hy - w, h), (hx + w, hy + w, h + w)),
        AxisBox((-hx - w, -hy - w, 0.0), (-hx, hy + w, h)),
        AxisBox((hx, -hy - w, 0.0), (hx + w, hy + w, h)),
        AxisBox((-hx, -hy - w, 0.0), (hx, -hy, h)),
        AxisBox((-hx, hy, 0.0), (hx, hy + w, h)),
    )
    return Scene(shell + tuple(extra))


@dataclass(frozen=True, eq=False)
class World:
    """Scene, trajectory, camera and noise model bundled for a simulated run."""

    scene: Scene
    trajectory: Trajectory
    camera: CameraModel
    noise: SensorNoiseModel
    features: int = 300
    meta: dict = field(default_factory=dict)
