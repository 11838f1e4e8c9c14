"""Cameras, point clouds and pinhole depth projection.

World frame is right-handed with +z up. Cameras sit on a sphere around the
origin and look at it; camera space follows the OpenCV convention (x right,
y down, z forward), so a camera-space z value is the depth of a point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .numerics import SeededRng

TWO_PI = 2.0 * math.pi
# projected depths are floored onto this grid (world units) so that rotating the
# cloud and the camera together gives bit-identical maps despite float rounding
DEPTH_QUANTUM = 2.0 ** -24


def _wrap_angle(a: float) -> float:
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod of values just below a multiple of 2*pi can round back onto 2*pi
    return 0.0 if a >= TWO_PI else a


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    radius: float
    width: int = 48
    height: int = 48
    focal: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image must be at least 8x8, got {self.width}x{self.height}")
        object.__setattr__(self, "azimuth", _wrap_angle(float(self.azimuth)))
        if self.focal is None:
            object.__setattr__(self, "focal", 1.25 * self.width)
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    @property
    def center(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera's right, down, forward axes."""
        forward = -self.center / self.radius
        right = np.cross(forward, [0.0, 0.0, 1.0])
        norm = np.linalg.norm(right)
        if norm < 1e-12:  # looking straight down or up
            right = np.array([-math.sin(self.azimuth), math.cos(self.azimuth), 0.0])
        else:
            right = right / norm
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def with_azimuth(self, azimuth: float) -> "CameraPose":
        return CameraPose(azimuth, self.elevation, self.radius, self.width, self.height,
                          self.focal, self.cx, self.cy)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation.T

    def ray_directions(self) -> np.ndarray:
        """World-space ray directions through pixel centres, scaled to unit camera depth.

        Returned shape is (height * width, 3) in row-major pixel order.
        """
        u = (np.arange(self.width) + 0.5 - self.cx) / self.focal
        v = (np.arange(self.height) + 0.5 - self.cy) / self.focal
        uu, vv = np.meshgrid(u, v)
        cam = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
        return cam @ self.rotation


def hemisphere_cameras(count: int, elevation: float, radius: float, **intrinsics) -> List[CameraPose]:
    """``count`` poses at equal azimuth spacing, fixed elevation and radius."""
    if count < 2:
        raise ValueError(f"need at least 2 cameras, got {count}")
    return [CameraPose(TWO_PI * k / count, elevation, radius, **intrinsics) for k in range(count)]


@dataclass
class PointCloud:
    points: np.ndarray
    tags: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        self.points = pts
        if self.tags is not None:
            tags = np.asarray(self.tags, dtype=np.float64).reshape(-1)
            if tags.shape[0] != pts.shape[0]:
                raise ValueError("tag count does not match point count")
            self.tags = tags

    def __len__(self) -> int:
        return self.points.shape[0]

    def bounding_radius(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.points, axis=1)))

    def bounds(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def rotated_z(self, angle: float) -> "PointCloud":
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return PointCloud(self.points @ rot.T, self.tags)


@dataclass
class SparseDepthMap:
    depth: np.ndarray  # (height, width), world units; meaningless where invalid
    valid: np.ndarray  # (height, width) bool

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def normalized(self) -> np.ndarray:
        """Valid depths mapped to [0, 1] per view with the nearest point at 1; 0 elsewhere."""
        out = np.zeros_like(self.depth)
        if not self.valid.any():
            return out
        d = self.depth[self.valid]
        lo, hi = d.min(), d.max()
        out[self.valid] = 1.0 if hi <= lo else 1.0 - (d - lo) / (hi - lo)
        return out


def project_depth(cloud: PointCloud, pose: CameraPose) -> SparseDepthMap:
    """Nearest-pixel pinhole projection with a z-buffer.

    Points at or behind the camera plane are culled. Each hit pixel keeps the
    smallest camera-space depth of the points landing in it, floored to
    ``DEPTH_QUANTUM``.
    """
    depth = np.full((pose.height, pose.width), np.inf)
    if len(cloud):
        cam = pose.to_camera(cloud.points)
        z = cam[:, 2]
        front = z >= DEPTH_QUANTUM
        cam, z = cam[front], z[front]
        u = np.floor(pose.focal * cam[:, 0] / z + pose.cx).astype(np.int64)
        v = np.floor(pose.focal * cam[:, 1] / z + pose.cy).astype(np.int64)
        inside = (u >= 0) & (u < pose.width) & (v >= 0) & (v < pose.height)
        flat = depth.reshape(-1)
        zq = np.floor(z[inside] / DEPTH_QUANTUM) * DEPTH_QUANTUM
        np.minimum.at(flat, v[inside] * pose.width + u[inside], zq)
    valid = np.isfinite(depth)
    return SparseDepthMap(np.where(valid, depth, 0.0), valid)


def augment_cloud(cloud: PointCloud, keep_fraction: float, noise_fraction: float,
                  noise_scale: float, rng: SeededRng) -> PointCloud:
    """Random subsampling plus uniform outliers in an inflated bounding box.

    Keeps ``ceil(keep_fraction * N)`` original points and appends
    ``floor(noise_fraction * N)`` outliers (tag -1 when the cloud is tagged).
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot augment an empty cloud")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if not 0.0 <= noise_fraction <= 0.1:
        raise ValueError(f"noise_fraction must be in [0, 0.1], got {noise_fraction}")
    n_keep = math.ceil(keep_fraction * n - 1e-9)
    n_noise = math.floor(noise_fraction * n + 1e-9)
    if n_keep == n and n_noise == 0:
        return PointCloud(cloud.points.copy(), None if cloud.tags is None else cloud.tags.copy())
    keep = np.sort(rng.permutation(n)[:n_keep])
    lo, hi = cloud.bounds()
    lo = lo - noise_scale
    hi = hi + noise_scale
    noise = lo + (hi - lo) * rng.uniform((n_noise, 3))
    points = np.concatenate([cloud.points[keep], noise])
    tags = None
    if cloud.tags is not None:
        tags = np.concatenate([cloud.tags[keep], -np.ones(n_noise)])
    return PointCloud(points, tags)
