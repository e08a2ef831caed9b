"""Pinhole depth camera in the optical convention (x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    max_depth: float
    min_depth: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    @classmethod
    def centered(cls, width: int, height: int, fov_deg: float, max_depth: float, min_depth: float = 0.1):
        """Square pixels with the principal point at the image center and the given horizontal FOV."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height, max_depth, min_depth)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def intrinsics(self) -> np.ndarray:
        """Packed ``[fx, fy, cx, cy, width, height, min_depth, max_depth]`` for compiled kernels."""
        return np.array(
            [self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.min_depth, self.max_depth],
            dtype=np.float64,
        )

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with unit z component, shape ``(height, width, 3)``.

        Pixel ``(row, col)`` looks along ``((col - cx)/fx, (row - cy)/fy, 1)``.
        """
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones(cols.shape)], axis=-1
        )

    def project(self, p_cam) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest pixel (row, col) and z-depth for camera-frame points; ``inside`` masks valid ones."""
        p = np.asarray(p_cam, dtype=float).reshape(-1, 3)
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = np.floor(self.fx * p[:, 0] / z + self.cx + 0.5)
            row = np.floor(self.fy * p[:, 1] / z + self.cy + 0.5)
        inside = (z > 0) & (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        row = np.where(inside, row, -1).astype(np.int64)
        col = np.where(inside, col, -1).astype(np.int64)
        return row, col, z
