"""Procedural shapes with a single frontal feature.

Each :class:`ShapeSpec` family is a union of simple primitives plus one
feature marking the front. The same description drives three things: surface
point clouds (the coarse 3D prior), signed distances, and ground-truth voxel
fields rendered as toy "real images".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .geometry import PointCloud
from .numerics import SeededRng
from .renderer import VoxelRadianceField

FAMILIES = ("asymmetric-cone", "tagged-sphere", "box-with-bump", "composite")

FEATURE_COLOR = np.array([0.12, 0.18, 0.65])
DEFAULT_BODY_COLOR = np.array([0.85, 0.45, 0.2])


def _unit(azimuth: float) -> np.ndarray:
    return np.array([math.cos(azimuth), math.sin(azimuth), 0.0])


class Primitive:
    area: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample_surface(self, n: int, rng: SeededRng) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Sphere(Primitive):
    center: np.ndarray
    radius: float

    @property
    def area(self) -> float:
        return 4.0 * math.pi * self.radius ** 2

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def sample_surface(self, n, rng):
        d = rng.normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


@dataclass
class Box(Primitive):
    center: np.ndarray
    half: np.ndarray

    @property
    def area(self) -> float:
        a, b, c = self.half
        return 8.0 * (a * b + b * c + a * c)

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def sample_surface(self, n, rng):
        a, b, c = self.half
        face_area = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        cdf = np.cumsum(face_area) / face_area.sum()
        face = np.searchsorted(cdf, rng.uniform(n), side="right")
        uv = rng.uniform((n, 3), -1.0, 1.0)
        pts = uv * self.half
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * self.half[axis]
        return self.center + pts


@dataclass
class Cone(Primitive):
    """Circular cone, base disk at ``z0``, apex ``height`` above it shifted by ``lean``.

    A non-zero ``lean`` (horizontal apex offset) shears the cone so it is no
    longer rotationally symmetric.
    """

    base_z: float
    height: float
    radius: float
    lean: np.ndarray

    @property
    def slant(self) -> float:
        return math.hypot(self.radius, self.height)

    @property
    def area(self) -> float:
        return math.pi * self.radius * (self.radius + self.slant)

    def _unshear(self, p):
        s = (p[..., 2:3] - self.base_z) / self.height
        return p - s * self.lean

    def sdf(self, p):
        q = self._unshear(p)
        r = np.linalg.norm(q[..., :2], axis=-1)
        z = q[..., 2] - self.base_z
        h, rad = self.height, self.radius
        # exact distance to a right cone (2D profile: base edge (rad, 0), apex (0, h))
        edge = np.array([-rad, h])
        edge_len2 = edge @ edge
        wx, wy = r - rad, z
        t = np.clip((wx * edge[0] + wy * edge[1]) / edge_len2, 0.0, 1.0)
        dlat = np.hypot(wx - t * edge[0], wy - t * edge[1])
        dbase = np.hypot(np.maximum(r - rad, 0.0), z)
        dist = np.minimum(dlat, dbase)
        inside = (z > 0) & (z < h) & (r < rad * (1.0 - z / h))
        return np.where(inside, -dist, dist)

    def sample_surface(self, n, rng):
        lateral = math.pi * self.radius * self.slant
        p_lat = lateral / self.area
        on_lat = rng.uniform(n) < p_lat
        theta = rng.uniform(n, 0.0, 2.0 * math.pi)
        q = np.sqrt(rng.uniform(n))
        r = self.radius * q
        z = np.where(on_lat, self.height * (1.0 - q), 0.0)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta), self.base_z + z], axis=1)
        s = (pts[:, 2:3] - self.base_z) / self.height
        return pts + s * self.lean


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    scale: float = 1.0
    feature_azimuth: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}; expected one of {FAMILIES}")
        if not self.scale > 0:
            raise ValueError("shape scale must be positive")


@dataclass
class Shape:
    body: List[Primitive]
    feature: Optional[Primitive]
    # tagged-sphere marks a surface cap instead of adding a feature primitive
    cap_direction: Optional[np.ndarray] = None
    cap_cos: float = 1.0

    def primitives(self) -> List[Primitive]:
        return self.body + ([self.feature] if self.feature is not None else [])

    def sdf_body(self, p):
        return np.min(np.stack([b.sdf(p) for b in self.body]), axis=0)

    def sdf(self, p):
        return np.min(np.stack([q.sdf(p) for q in self.primitives()]), axis=0)

    def feature_mask(self, p, margin: float = 0.0) -> np.ndarray:
        """True where ``p`` belongs to the frontal feature."""
        if self.feature is not None:
            return self.feature.sdf(p) < self.sdf_body(p) + margin
        direction = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
        return direction @ self.cap_direction >= self.cap_cos


def build_shape(spec: ShapeSpec) -> Shape:
    s = spec.scale
    front = _unit(spec.feature_azimuth)
    if spec.family == "asymmetric-cone":
        base_z, height, radius = -0.55 * s, 1.15 * s, 0.5 * s
        lean = 0.3 * s * front
        cone = Cone(base_z, height, radius, lean)
        zn = base_z + 0.3 * height
        frac = (zn - base_z) / height
        surface = (radius * (1.0 - frac)) * front + frac * lean + np.array([0.0, 0.0, zn])
        nose = Sphere(surface + 0.06 * s * front, 0.17 * s)
        return Shape([cone], nose)
    if spec.family == "tagged-sphere":
        return Shape([Sphere(np.zeros(3), 0.7 * s)], None, cap_direction=front,
                     cap_cos=math.cos(math.radians(35.0)))
    if spec.family == "box-with-bump":
        half = np.array([0.42, 0.42, 0.38]) * s
        box = Box(np.zeros(3), half)
        # exit point of the frontal ray through the box's side
        t = min(half[0] / max(abs(front[0]), 1e-12), half[1] / max(abs(front[1]), 1e-12))
        bump = Sphere(t * front, 0.2 * s)
        return Shape([box], bump)
    # composite: sphere body with a conical hat and a frontal nose
    body = Sphere(np.array([0.0, 0.0, -0.2 * s]), 0.45 * s)
    hat = Cone(0.12 * s, 0.5 * s, 0.32 * s, np.zeros(3))
    nose = Sphere(np.array([0.0, 0.0, -0.15 * s]) + 0.45 * s * front, 0.13 * s)
    return Shape([body, hat], nose)


def generate_coarse_cloud(spec: ShapeSpec, n_points: int, rng: SeededRng) -> PointCloud:
    """Area-weighted surface samples of the union; tag 1 marks the frontal feature."""
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    shape = build_shape(spec)
    prims = shape.primitives()
    areas = np.array([p.area for p in prims])
    cdf = np.cumsum(areas) / areas.sum()
    chunks, total = [], 0
    while total < n_points:
        m = 2 * (n_points - total) + 16
        which = np.searchsorted(cdf, rng.uniform(m), side="right")
        cand = np.empty((m, 3))
        for k, prim in enumerate(prims):
            sel = which == k
            if sel.any():
                cand[sel] = prim.sample_surface(int(sel.sum()), rng)
        # drop samples buried inside another primitive of the union
        inside = np.zeros(m, dtype=bool)
        for k, prim in enumerate(prims):
            inside |= (which != k) & (prim.sdf(cand) < -1e-9)
        cand = cand[~inside]
        chunks.append(cand)
        total += cand.shape[0]
    points = np.concatenate(chunks)[:n_points]
    if shape.feature is not None:
        tags = (shape.feature.sdf(points) <= shape.sdf_body(points) + 1e-9).astype(np.float64)
    else:
        direction = points / np.linalg.norm(points, axis=1, keepdims=True)
        tags = (direction @ shape.cap_direction >= shape.cap_cos).astype(np.float64)
    return PointCloud(points, tags)


def _logit(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.02, 0.98)
    return np.log(c / (1.0 - c))


def ground_truth_field(spec: ShapeSpec, resolution: int = 24, extent: float = 1.0,
                       body_color: Sequence[float] = DEFAULT_BODY_COLOR,
                       feature_color: Sequence[float] = FEATURE_COLOR,
                       sharpness: float = 6.0, peak: float = 12.0) -> VoxelRadianceField:
    """Voxelize the shape: raw density ramps from ``-peak`` outside to ``peak`` inside."""
    shape = build_shape(spec)
    field = VoxelRadianceField.empty(resolution, extent)
    centers = field.voxel_centers()
    vox = 2.0 * extent / resolution
    d = shape.sdf(centers)
    density = np.clip(peak * 0.5 - sharpness * d / vox, -peak, peak)
    feat = shape.feature_mask(centers, margin=0.5 * vox)
    color = np.where(feat[..., None], _logit(feature_color), _logit(body_color))
    return VoxelRadianceField(density, color, extent)


def symmetric_field(resolution: int = 24, extent: float = 1.0, folds: int = 2,
                    body_color: Sequence[float] = DEFAULT_BODY_COLOR,
                    feature_color: Sequence[float] = FEATURE_COLOR) -> VoxelRadianceField:
    """A field with exact ``folds``-fold azimuthal symmetry (bit-exact on the grid).

    Built by averaging the voxelized asymmetric cone over index-space quarter
    turns, so only ``folds`` in {2, 4} are supported.
    """
    if folds not in (2, 4):
        raise ValueError("symmetric fields are built from grid rotations: folds must be 2 or 4")
    base = ground_truth_field(ShapeSpec("asymmetric-cone"), resolution, extent, body_color, feature_color)
    turns = (0, 2) if folds == 2 else (0, 1, 2, 3)
    dens = [np.rot90(base.density, k, axes=(0, 1)) for k in turns]
    cols = [np.rot90(base.color, k, axes=(0, 1)) for k in turns]
    density = np.max(np.stack(dens), axis=0)
    # sorting first makes the average independent of summation order
    color = np.sort(np.stack(cols), axis=0).sum(axis=0) / len(turns)
    return VoxelRadianceField(density, color, extent)
