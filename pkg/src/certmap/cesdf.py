"""Voxel map whose published distances underestimate the true obstacle distance.

The grid stores a projective TSDF, an ESDF recomputed periodically from it,
and a per-voxel ``correction``: the running sum of pose-error deflations since
the voxel was last seen. Published (certified) distances are
``esdf - correction - margin`` where ``margin`` covers nearest-center lookup.

ESDF sources are the voxels that may be occupied: observed surface voxels,
never-observed voxels, and observed voxels whose certified distance has
drifted down to the margin ("forgotten" space). The grid exterior is not a
source, so scenes are expected to be enclosed by the grid.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .camera import CameraModel
from .geom import RotoTranslation, invert
from .simworld import _sdf

WEIGHT_CAP = 100.0
_FAR = 1e20


@dataclass(eq=False)
class VoxelGrid:
    origin: np.ndarray
    resolution: float
    dims: tuple
    tsdf: np.ndarray
    tsdf_weight: np.ndarray
    esdf: np.ndarray
    correction: np.ndarray
    observed: np.ndarray
    truncation: float = 0.0
    last_sdf: np.ndarray | None = None  # most recent single-frame measurement
    pending: np.ndarray | None = None  # deflation accumulated since the last propagation
    fresh: np.ndarray | None = None  # voxels seen in the most recent reset

    def __post_init__(self):
        if self.last_sdf is None:
            self.last_sdf = np.full(self.dims, self.truncation)
        if self.pending is None:
            self.pending = np.zeros(self.dims)
        if self.fresh is None:
            self.fresh = np.zeros(self.dims, dtype=np.bool_)

    @classmethod
    def create(cls, origin, resolution: float, dims, truncation: float | None = None) -> VoxelGrid:
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"bad grid dims {dims}")
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        trunc = 4.0 * resolution if truncation is None else float(truncation)
        return cls(
            origin=np.asarray(origin, dtype=float).reshape(3).copy(),
            resolution=float(resolution),
            dims=dims,
            tsdf=np.full(dims, trunc),
            tsdf_weight=np.zeros(dims),
            esdf=np.full(dims, np.nan),
            correction=np.zeros(dims),
            observed=np.zeros(dims, dtype=np.bool_),
            truncation=trunc,
        )

    @classmethod
    def spanning(cls, lo, hi, resolution: float, truncation: float | None = None) -> VoxelGrid:
        lo = np.asarray(lo, float)
        dims = np.ceil((np.asarray(hi, float) - lo) / resolution - 1e-9).astype(int)
        return cls.create(lo, resolution, dims, truncation)

    @property
    def margin(self) -> float:
        """Worst-case distance from a point to its voxel center."""
        return 0.5 * math.sqrt(3.0) * self.resolution

    @property
    def diagonal(self) -> float:
        return self.resolution * math.sqrt(sum(d * d for d in self.dims))

    def centers(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, float) + 0.5) * self.resolution

    def index_of(self, p) -> np.ndarray | None:
        idx = np.floor((np.asarray(p, float) - self.origin) / self.resolution).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= np.array(self.dims)):
            return None
        return idx

    def share_geometry(self) -> VoxelGrid:
        """A view sharing TSDF/weight/observed storage, with its own ESDF and zero correction."""
        return VoxelGrid(
            self.origin, self.resolution, self.dims, self.tsdf, self.tsdf_weight,
            np.full(self.dims, np.nan), np.zeros(self.dims), self.observed, self.truncation, self.last_sdf,
        )

    def certified(self) -> np.ndarray:
        """Published distance per voxel; NaN where unknown."""
        out = self.esdf - self.correction - self.margin
        out[~self.observed] = np.nan
        return out


@dataclass(frozen=True, eq=False)
class MapPoseEstimate:
    pose: RotoTranslation  # estimated B_{k+1} -> M
    delta: RotoTranslation  # estimated B_k -> B_{k+1}
    epsilon_r: float
    epsilon_t: float

    def __post_init__(self):
        if self.epsilon_r < 0 or self.epsilon_t < 0:
            raise ValueError("bounds must be nonnegative")


# --------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _project(cx_, cy_, cz_, rot, trans, intr):
    # voxel center (map frame) -> (row, col, z) in the camera; row = -1 when outside the image
    dx = cx_ - trans[0]
    dy = cy_ - trans[1]
    dz = cz_ - trans[2]
    x = rot[0, 0] * dx + rot[1, 0] * dy + rot[2, 0] * dz
    y = rot[0, 1] * dx + rot[1, 1] * dy + rot[2, 1] * dz
    z = rot[0, 2] * dx + rot[1, 2] * dy + rot[2, 2] * dz
    if z <= 0.0:
        return -1, -1, z
    col = math.floor(intr[0] * x / z + intr[2] + 0.5)
    row = math.floor(intr[1] * y / z + intr[3] + 0.5)
    if col < 0 or col >= intr[4] or row < 0 or row >= intr[5]:
        return -1, -1, z
    return int(row), int(col), z


@njit(cache=True)
def _measure(px, py, pz, depth, rot, trans, intr, margin, trunc):
    # Conservative signed distance of a voxel from one depth image, or NaN if unusable.
    # Every pixel whose ray can pass through the voxel cube must be valid, and the
    # nearest of their depths is used, so a cube is reported free only when all of
    # it lies in front of the measured surface.
    r, c, z = _project(px, py, pz, rot, trans, intr)
    if r < 0 or z < intr[6] or z > intr[7]:
        return np.nan
    rc = int(math.ceil(intr[0] * margin / z))
    rr = int(math.ceil(intr[1] * margin / z))
    h = int(intr[5])
    w = int(intr[4])
    d = np.inf
    for a in range(max(r - rr, 0), min(r + rr + 1, h)):
        for b in range(max(c - rc, 0), min(c + rc + 1, w)):
            v = depth[a, b]
            if not v > 0.0:
                return np.nan
            d = min(d, v)
    sdf = d - z
    if sdf < -trunc:
        return np.nan
    return min(sdf, trunc)


@njit(cache=True, parallel=True)
def _integrate(tsdf, weight, last, origin, res, trunc, lo, hi, depth, rot, trans, intr, visited):
    # visited[i, j, k] := the voxel was fused this call
    margin = 0.5 * math.sqrt(3.0) * res
    nx = hi[0] - lo[0]
    for ii in prange(nx):
        i = lo[0] + ii
        px = origin[0] + (i + 0.5) * res
        for j in range(lo[1], hi[1]):
            py = origin[1] + (j + 0.5) * res
            for k in range(lo[2], hi[2]):
                pz = origin[2] + (k + 0.5) * res
                sdf = _measure(px, py, pz, depth, rot, trans, intr, margin, trunc)
                if sdf != sdf:
                    continue
                w = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w + sdf) / (w + 1.0)
                weight[i, j, k] = min(w + 1.0, WEIGHT_CAP)
                last[i, j, k] = sdf
                visited[i, j, k] = True


@njit(cache=True, parallel=True)
def _fov_mask(origin, res, trunc, lo, hi, depth, rot, trans, intr, out):
    margin = 0.5 * math.sqrt(3.0) * res
    nx = hi[0] - lo[0]
    for ii in prange(nx):
        i = lo[0] + ii
        px = origin[0] + (i + 0.5) * res
        for j in range(lo[1], hi[1]):
            py = origin[1] + (j + 0.5) * res
            for k in range(lo[2], hi[2]):
                pz = origin[2] + (k + 0.5) * res
                sdf = _measure(px, py, pz, depth, rot, trans, intr, margin, trunc)
                if sdf == sdf:
                    out[i, j, k] = True


@njit(cache=True, parallel=True)
def _deflate(correction, pending, origin, res, rot, trans, t_prev, eps_r, eps_t):
    nx, ny, nz = correction.shape
    for i in prange(nx):
        px = origin[0] + (i + 0.5) * res - trans[0]
        for j in range(ny):
            py = origin[1] + (j + 0.5) * res - trans[1]
            for k in range(nz):
                pz = origin[2] + (k + 0.5) * res - trans[2]
                # p_hat in B_{k+1} minus the frame-k origin expressed in B_{k+1}
                bx = rot[0, 0] * px + rot[1, 0] * py + rot[2, 0] * pz - t_prev[0]
                by = rot[0, 1] * px + rot[1, 1] * py + rot[2, 1] * pz - t_prev[1]
                bz = rot[0, 2] * px + rot[1, 2] * py + rot[2, 2] * pz - t_prev[2]
                step = eps_r * math.sqrt(bx * bx + by * by + bz * bz) + eps_t
                correction[i, j, k] += step
                pending[i, j, k] += step


@njit(cache=True, parallel=True)
def _sources(tsdf, weight, last, observed, esdf, correction, margin, out):
    nx, ny, nz = tsdf.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                if not observed[i, j, k]:
                    out[i, j, k] = True
                    continue
                if correction[i, j, k] > 0.0:
                    e = esdf[i, j, k]
                    if not (e == e) or e - correction[i, j, k] - margin <= margin:
                        out[i, j, k] = True
                        continue
                if weight[i, j, k] <= 0.0:
                    continue
                v = tsdf[i, j, k]
                # the latest measurement alone may show a surface inside the cube
                if v <= 0.0 or last[i, j, k] <= margin:
                    out[i, j, k] = True
                    continue
                hit = False
                for di in range(-1, 2):
                    a = i + di
                    if a < 0 or a >= nx or hit:
                        continue
                    for dj in range(-1, 2):
                        b = j + dj
                        if b < 0 or b >= ny or hit:
                            continue
                        for dk in range(-1, 2):
                            c = k + dk
                            if c < 0 or c >= nz:
                                continue
                            if observed[a, b, c] and weight[a, b, c] > 0.0 and tsdf[a, b, c] <= 0.0:
                                hit = True
                                break
                out[i, j, k] = hit


@njit(cache=True)
def _edt_line(f, n, out, v, z):
    # lower envelope of parabolas (Felzenszwalb-Huttenlocher), exact on integer inputs
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        p = v[k]
        s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        while s <= z[k]:
            k -= 1
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@njit(cache=True, parallel=True)
def _edt_axis0(g):
    n0, n1, n2 = g.shape
    for j in prange(n1):
        f = np.empty(n0)
        out = np.empty(n0)
        v = np.empty(n0, dtype=np.int64)
        z = np.empty(n0 + 1)
        for k in range(n2):
            for i in range(n0):
                f[i] = g[i, j, k]
            _edt_line(f, n0, out, v, z)
            for i in range(n0):
                g[i, j, k] = out[i]


@njit(cache=True, parallel=True)
def _edt_axis1(g):
    n0, n1, n2 = g.shape
    for i in prange(n0):
        f = np.empty(n1)
        out = np.empty(n1)
        v = np.empty(n1, dtype=np.int64)
        z = np.empty(n1 + 1)
        for k in range(n2):
            for j in range(n1):
                f[j] = g[i, j, k]
            _edt_line(f, n1, out, v, z)
            for j in range(n1):
                g[i, j, k] = out[j]


@njit(cache=True, parallel=True)
def _edt_axis2(g):
    n0, n1, n2 = g.shape
    for i in prange(n0):
        f = np.empty(n2)
        out = np.empty(n2)
        v = np.empty(n2, dtype=np.int64)
        z = np.empty(n2 + 1)
        for j in range(n1):
            for k in range(n2):
                f[k] = g[i, j, k]
            _edt_line(f, n2, out, v, z)
            for k in range(n2):
                g[i, j, k] = out[k]


def squared_distance_transform(sources: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in voxels) to the nearest ``True`` cell; ~1e20 if none."""
    g = np.where(sources, 0.0, _FAR)
    _edt_axis0(g)
    _edt_axis1(g)
    _edt_axis2(g)
    return g


@njit(cache=True, parallel=True)
def _oracle(esdf, correction, observed, margin, origin, res, rot, trans, spheres, boxes, planes, tol):
    # counts voxels whose published distance exceeds the true distance of the point they stand for
    nx, ny, nz = esdf.shape
    counts = np.zeros(nx, dtype=np.int64)
    worst = np.zeros(nx)
    for i in prange(nx):
        px = origin[0] + (i + 0.5) * res
        for j in range(ny):
            py = origin[1] + (j + 0.5) * res
            for k in range(nz):
                if not observed[i, j, k]:
                    continue
                cert = esdf[i, j, k] - correction[i, j, k] - margin
                if not cert > 0.0:
                    continue
                pz = origin[2] + (k + 0.5) * res
                wx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
                wy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
                wz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
                true_d = max(_sdf(wx, wy, wz, spheres, boxes, planes), 0.0)
                if cert > true_d + tol:
                    counts[i] += 1
                    worst[i] = max(worst[i], cert - true_d)
    return counts.sum(), worst.max()


# --------------------------------------------------------------------------
# public operations


def _frustum_bounds(grid: VoxelGrid, cam: CameraModel, pose: RotoTranslation, reach: float):
    corners = np.array(
        [[-0.5, -0.5], [cam.width - 0.5, -0.5], [-0.5, cam.height - 0.5], [cam.width - 0.5, cam.height - 0.5]]
    )
    rays = np.column_stack([(corners[:, 0] - cam.cx) / cam.fx, (corners[:, 1] - cam.cy) / cam.fy, np.ones(4)])
    pts = np.vstack([np.zeros(3), rays * reach])
    world = pose.apply(pts)
    lo = np.floor((world.min(axis=0) - grid.origin) / grid.resolution).astype(np.int64) - 1
    hi = np.floor((world.max(axis=0) - grid.origin) / grid.resolution).astype(np.int64) + 2
    dims = np.array(grid.dims)
    return np.clip(lo, 0, dims), np.clip(hi, 0, dims)


def _prepare_depth(depth_image, cam: CameraModel) -> np.ndarray:
    depth = np.asarray(depth_image, dtype=np.float64)
    if depth.shape != cam.shape:
        raise ValueError(f"depth image shape {depth.shape} does not match camera {cam.shape}")
    # NaN, nonpositive and too-far readings become the invalid sentinel
    return np.ascontiguousarray(np.where(np.isfinite(depth) & (depth > 0) & (depth <= cam.max_depth), depth, 0.0))


def integrate_depth(grid: VoxelGrid, depth_image, cam: CameraModel, pose: RotoTranslation) -> np.ndarray:
    """Projective TSDF fusion of one depth image taken from ``pose`` (camera to map).

    Returns a boolean mask of the voxels fused by this call.
    """
    depth = _prepare_depth(depth_image, cam)
    visited = np.zeros(grid.dims, dtype=np.bool_)
    if not depth.any():
        return visited
    lo, hi = _frustum_bounds(grid, cam, pose, float(depth.max()) + grid.truncation)
    _integrate(
        grid.tsdf, grid.tsdf_weight, grid.last_sdf, grid.origin, grid.resolution, grid.truncation, lo, hi, depth,
        np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation), cam.intrinsics(), visited,
    )
    return visited


def fov_mask(grid: VoxelGrid, cam: CameraModel, pose: RotoTranslation, depth_image) -> np.ndarray:
    """Voxels inside the image and depth range that are not hidden behind the measured surface."""
    depth = _prepare_depth(depth_image, cam)
    out = np.zeros(grid.dims, dtype=np.bool_)
    if not depth.any():
        return out
    lo, hi = _frustum_bounds(grid, cam, pose, float(depth.max()) + grid.truncation)
    _fov_mask(
        grid.origin, grid.resolution, grid.truncation, lo, hi, depth,
        np.ascontiguousarray(pose.rotation), np.ascontiguousarray(pose.translation), cam.intrinsics(), out,
    )
    return out


def reset_corrections_in_fov(grid: VoxelGrid, cam: CameraModel, pose: RotoTranslation, depth_image, mask=None) -> np.ndarray:
    """Restart the correction of every voxel seen in this frame and mark it observed.

    A seen voxel keeps only the deflation accumulated since the last ESDF
    propagation, because its stored distance dates from then; the next
    propagation zeroes it if the voxel is still in view. With propagation
    every frame this is a plain reset to zero. ``mask`` may pass in a
    precomputed :func:`fov_mask` (the same set :func:`integrate_depth` fuses).
    """
    if mask is None:
        mask = fov_mask(grid, cam, pose, depth_image)
    grid.correction[mask] = grid.pending[mask]
    grid.observed |= mask
    grid.fresh = mask
    return mask


def deflate(grid: VoxelGrid, est: MapPoseEstimate) -> None:
    """Grow every voxel's correction by ``eps_r * |p_hat - t_hat| + eps_t``.

    ``p_hat`` is the voxel center expressed in the new body frame and ``t_hat``
    the estimated position of the previous body origin in that frame.
    """
    if est.epsilon_r == 0.0 and est.epsilon_t == 0.0:
        return
    _deflate(
        grid.correction, grid.pending, grid.origin, grid.resolution,
        np.ascontiguousarray(est.pose.rotation), np.ascontiguousarray(est.pose.translation),
        np.ascontiguousarray(est.delta.translation), float(est.epsilon_r), float(est.epsilon_t),
    )


def deflation_at(est: MapPoseEstimate, p_map) -> np.ndarray:
    """Closed-form per-point deflation, for spot checks."""
    p_body = invert(est.pose).apply(p_map)
    return est.epsilon_r * np.linalg.norm(p_body - est.delta.translation, axis=-1) + est.epsilon_t


def esdf_sources(grid: VoxelGrid) -> np.ndarray:
    """Voxels treated as possibly occupied when propagating distances."""
    out = np.zeros(grid.dims, dtype=np.bool_)
    _sources(grid.tsdf, grid.tsdf_weight, grid.last_sdf, grid.observed, grid.esdf, grid.correction, grid.margin, out)
    return out


def propagate_esdf(grid: VoxelGrid) -> None:
    """Recompute every observed voxel's distance to the nearest source voxel center."""
    if not grid.observed.any():
        raise ValueError("nothing observed yet")
    sources = esdf_sources(grid)
    d2 = squared_distance_transform(sources)
    esdf = np.sqrt(d2) * grid.resolution
    esdf[d2 >= _FAR] = grid.diagonal
    esdf[~grid.observed] = np.nan
    grid.esdf[...] = esdf
    grid.correction[grid.fresh] = 0.0
    grid.pending[...] = 0.0


def certified_distance(grid: VoxelGrid, pose: RotoTranslation, p_body) -> float | None:
    """Certified lower bound on the obstacle distance of a body-frame point; None if unknown."""
    idx = grid.index_of(pose.apply(p_body))
    if idx is None:
        return None
    i, j, k = idx
    e = grid.esdf[i, j, k]
    if not grid.observed[i, j, k] or not np.isfinite(e):
        return None
    return float(e - grid.correction[i, j, k] - grid.margin)


def certified_distances(grid: VoxelGrid, pose: RotoTranslation, p_body) -> np.ndarray:
    """Vectorized :func:`certified_distance`; NaN marks unknown."""
    p = pose.apply(np.asarray(p_body, float).reshape(-1, 3))
    idx = np.floor((p - grid.origin) / grid.resolution).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(grid.dims)), axis=1)
    out = np.full(len(p), np.nan)
    i, j, k = idx[inside].T
    vals = grid.esdf[i, j, k] - grid.correction[i, j, k] - grid.margin
    vals[~grid.observed[i, j, k]] = np.nan
    out[inside] = vals
    return out


def count_violations(grid: VoxelGrid, est_pose: RotoTranslation, true_pose: RotoTranslation, scene, tol: float = 1e-9):
    """Voxels whose published distance exceeds the true distance of the body point they represent.

    A voxel center ``c`` stands for body point ``est_pose^-1(c)``, which truly
    sits at ``true_pose(est_pose^-1(c))`` in the scene frame.
    """
    g = true_pose @ invert(est_pose)
    count, worst = _oracle(
        grid.esdf, grid.correction, grid.observed, grid.margin, grid.origin, grid.resolution,
        np.ascontiguousarray(g.rotation), np.ascontiguousarray(g.translation), *scene.packed, tol,
    )
    return int(count), float(worst)


# --------------------------------------------------------------------------
# per-frame driver


@dataclass(eq=False)
class MapState:
    grid: VoxelGrid
    pose: RotoTranslation = field(default_factory=RotoTranslation.identity)  # estimated B_k -> M
    frame: int = 0
    esdf_period: int = 6
    baseline: VoxelGrid | None = None

    def with_baseline(self) -> MapState:
        self.baseline = self.grid.share_geometry()
        return self

    def due_for_propagation(self) -> bool:
        return self.frame % self.esdf_period == 0


def observe_frame(state: MapState, depth_image, cam: CameraModel) -> np.ndarray:
    """Fuse a frame at the current pose, reset its FOV and propagate if due (no deflation)."""
    integrate_depth(state.grid, depth_image, cam, state.pose)
    mask = reset_corrections_in_fov(state.grid, cam, state.pose, depth_image)
    if state.due_for_propagation():
        propagate_esdf(state.grid)
        if state.baseline is not None:
            propagate_esdf(state.baseline)
    return mask


def step_frame(state: MapState, depth_image, cam: CameraModel, reg, timings: dict | None = None) -> MapState:
    """Advance the map by one registered frame.

    Order: pose update, TSDF fusion, deflation, FOV reset, then (on schedule) ESDF propagation.
    ``reg`` is any object with ``transform``, ``epsilon_r`` and ``epsilon_t``.
    """
    clock = time.perf_counter
    timings = {} if timings is None else timings
    delta = reg.transform
    state.pose = state.pose @ invert(delta)
    state.frame += 1
    est = MapPoseEstimate(state.pose, delta, float(reg.epsilon_r), float(reg.epsilon_t))

    t0 = clock()
    integrate_depth(state.grid, depth_image, cam, state.pose)
    t1 = clock()
    deflate(state.grid, est)
    t2 = clock()
    reset_corrections_in_fov(state.grid, cam, state.pose, depth_image)
    t3 = clock()
    if state.due_for_propagation():
        propagate_esdf(state.grid)
        if state.baseline is not None:
            propagate_esdf(state.baseline)
    t4 = clock()
    timings.update(integrate_ms=1e3 * (t1 - t0), deflate_ms=1e3 * (t2 - t1), reset_ms=1e3 * (t3 - t2), propagate_ms=1e3 * (t4 - t3))
    return state


# --------------------------------------------------------------------------
# snapshots


_SNAPSHOT_FIELDS = ("tsdf", "tsdf_weight", "esdf", "correction", "observed", "last_sdf")


def save_snapshot(path, grid: VoxelGrid, meta: dict | None = None) -> None:
    """Self-describing ``.npz``: header JSON plus per-voxel arrays flattened x-fastest."""
    header = {
        "origin": grid.origin.tolist(),
        "resolution": grid.resolution,
        "dims": list(grid.dims),
        "truncation": grid.truncation,
        "order": "x-fastest",
        **(meta or {}),
    }
    flat = {name: getattr(grid, name).ravel(order="F") for name in _SNAPSHOT_FIELDS}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.array(json.dumps(header, sort_keys=True)), **flat)


def load_snapshot(path) -> tuple[VoxelGrid, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        dims = tuple(header["dims"])
        arrays = {name: data[name].reshape(dims, order="F").copy() for name in _SNAPSHOT_FIELDS}
    grid = VoxelGrid(
        np.array(header["origin"], float), float(header["resolution"]), dims,
        arrays["tsdf"], arrays["tsdf_weight"], arrays["esdf"], arrays["correction"],
        arrays["observed"].astype(np.bool_), float(header["truncation"]), arrays["last_sdf"],
    )
    return grid, header


def export_slice(grid: VoxelGrid, z: float, path) -> int:
    """Write the voxel layer containing height ``z`` as CSV rows (x, y, esdf, correction, certified).

    Unknown voxels are written with empty esdf/certified fields. Returns the row count.
    """
    k = int(math.floor((z - grid.origin[2]) / grid.resolution))
    if not 0 <= k < grid.dims[2]:
        raise ValueError(f"z={z} is outside the grid")
    cert = grid.certified()[:, :, k]
    lines = ["x,y,esdf,correction,certified"]
    for j in range(grid.dims[1]):
        y = grid.origin[1] + (j + 0.5) * grid.resolution
        for i in range(grid.dims[0]):
            x = grid.origin[0] + (i + 0.5) * grid.resolution
            e = grid.esdf[i, j, k]
            known = grid.observed[i, j, k] and np.isfinite(e)
            lines.append(
                f"{x:.6f},{y:.6f},{f'{e:.6f}' if known else ''},{grid.correction[i, j, k]:.6f},"
                f"{f'{cert[i, j]:.6f}' if known else ''}"
            )
    Path(path).write_text("\n".join(lines) + "\n")
    return len(lines) - 1
