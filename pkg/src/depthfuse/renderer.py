"""Voxel radiance field and a differentiable emission-absorption renderer.

The field stores pre-activation density and colour at voxel centres of a cube
``[-extent, extent]^3``. Samples are trilinearly interpolated in raw space and
then activated (softplus density, sigmoid colour). ``render`` returns the
image together with a :class:`RenderTape` from which ``render_backward``
computes the exact gradient of any rgb loss with respect to the raw grids.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse

from .geometry import CameraPose, SparseDepthMap, hemisphere_cameras
from .numerics import checksum, sigmoid, softplus

WHITE = np.ones(3)

# Corner offsets of a trilinear cell in (x, y, z) index order.
_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass
class VoxelRadianceField:
    density: np.ndarray  # (G, G, G) raw (softplus -> non-negative density)
    color: np.ndarray    # (G, G, G, 3) raw (sigmoid -> (0, 1))
    extent: float = 1.0

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        g = self.density.shape[0]
        if self.density.shape != (g, g, g) or self.color.shape != (g, g, g, 3):
            raise ValueError(f"bad field shapes {self.density.shape}, {self.color.shape}")
        if g < 2:
            raise ValueError("field resolution must be at least 2")
        if not (np.all(np.isfinite(self.density)) and np.all(np.isfinite(self.color))):
            raise ValueError("field parameters must be finite")

    @property
    def resolution(self) -> int:
        return self.density.shape[0]

    @classmethod
    def empty(cls, resolution: int, extent: float = 1.0) -> "VoxelRadianceField":
        # softplus(-100) ~ 4e-44: transparent to double precision at any step size
        g = resolution
        return cls(np.full((g, g, g), -100.0), np.zeros((g, g, g, 3)), extent)

    def copy(self) -> "VoxelRadianceField":
        return VoxelRadianceField(self.density.copy(), self.color.copy(), self.extent)

    def params(self) -> dict:
        return {"density": self.density, "color": self.color}

    def with_params(self, params: dict) -> "VoxelRadianceField":
        return VoxelRadianceField(params["density"], params["color"], self.extent)

    def fingerprint(self) -> str:
        return checksum(self.density, self.color, np.array([self.extent]))

    def voxel_centers(self) -> np.ndarray:
        g = self.resolution
        c = (np.arange(g) + 0.5) / g * 2.0 * self.extent - self.extent
        x, y, z = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([x, y, z], axis=-1)


@dataclass
class RenderedImage:
    rgb: np.ndarray      # (H, W, 3)
    opacity: np.ndarray  # (H, W)

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class RenderTape:
    """Everything ``render_backward`` needs; replayable without the field."""

    shape: Tuple[int, int]
    resolution: int
    field_fingerprint: str
    params4: np.ndarray        # (G^3, 4) raw density + raw rgb, flattened
    interp: sparse.csr_matrix  # (R*N, G^3) trilinear weights
    dist: np.ndarray           # (R,) world-space sample spacing per ray
    t_mid: np.ndarray          # (R, N) camera depth of each sample
    background: np.ndarray     # (3,)
    cache: Optional[tuple] = None

    def replay(self) -> RenderedImage:
        return _composite(self)[0]


def _ray_box(origin: np.ndarray, dirs: np.ndarray, extent: float):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (-extent - origin) * inv
        t_b = (extent - origin) * inv
    t_lo = np.nanmax(np.minimum(t_a, t_b), axis=1)
    t_hi = np.nanmin(np.maximum(t_a, t_b), axis=1)
    t_lo = np.maximum(t_lo, 0.0)
    hit = t_hi > t_lo
    t_hi = np.where(hit, t_hi, t_lo)
    return t_lo, t_hi


def _composite(tape: RenderTape):
    rays, n = tape.t_mid.shape
    raw = (tape.interp @ tape.params4).reshape(rays, n, 4)
    sigma = softplus(raw[..., 0])
    color = sigmoid(raw[..., 1:])
    tau = sigma * tape.dist[:, None]
    # exclusive prefix sums give transmittance before each sample
    acc = np.cumsum(tau, axis=1)
    trans = np.exp(tau - acc)
    trans_out = np.exp(-acc[:, -1])
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    rgb = np.einsum("rn,rnk->rk", weights, color) + trans_out[:, None] * tape.background
    h, w = tape.shape
    image = RenderedImage(rgb.reshape(h, w, 3), (1.0 - trans_out).reshape(h, w))
    return image, (raw, color, tau, trans, weights, trans_out)


def _interp_matrix(pos: np.ndarray, g: int, extent: float) -> sparse.csr_matrix:
    u = (pos.reshape(-1, 3) + extent) * (g / (2.0 * extent)) - 0.5
    np.clip(u, 0.0, g - 1.0, out=u)
    base = np.minimum(u.astype(np.int32), g - 2)  # truncation == floor for u >= 0
    frac = u - base
    lo = 1.0 - frac
    m = u.shape[0]
    wxy = np.empty((m, 4))
    wxy[:, 0] = lo[:, 0] * lo[:, 1]
    wxy[:, 1] = lo[:, 0] * frac[:, 1]
    wxy[:, 2] = frac[:, 0] * lo[:, 1]
    wxy[:, 3] = frac[:, 0] * frac[:, 1]
    weight = np.empty((m, 4, 2))
    np.multiply(wxy, lo[:, 2:3], out=weight[:, :, 0])
    np.multiply(wxy, frac[:, 2:3], out=weight[:, :, 1])
    flat = (base[:, 0] * g + base[:, 1]) * g + base[:, 2]
    index = flat[:, None] + _CORNER_OFFSETS[g][None, :]
    indptr = np.arange(0, 8 * m + 1, 8, dtype=np.int32)
    return sparse.csr_matrix((weight.reshape(-1), index.reshape(-1), indptr), shape=(m, g ** 3))


class _Offsets(dict):
    def __missing__(self, g):
        off = ((_CORNERS[:, 0] * g + _CORNERS[:, 1]) * g + _CORNERS[:, 2]).astype(np.int32)
        self[g] = off
        return off


_CORNER_OFFSETS = _Offsets()


# ray geometry depends only on the pose, the step count and the grid, so repeated
# renders from one pose (finite differences, turntable banks) reuse it
_GEOMETRY_CACHE: "OrderedDict[tuple, tuple]" = OrderedDict()
_GEOMETRY_CACHE_SIZE = 64


def _ray_geometry(pose: CameraPose, steps_per_ray: int, g: int, extent: float):
    key = (pose, steps_per_ray, g, extent)
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None:
        _GEOMETRY_CACHE.move_to_end(key)
        return hit
    origin = pose.center
    dirs = pose.ray_directions()
    t_lo, t_hi = _ray_box(origin, dirs, extent)
    n = steps_per_ray
    step = (t_hi - t_lo) / n
    t_mid = t_lo[:, None] + (np.arange(n) + 0.5)[None, :] * step[:, None]
    pos = origin + t_mid[..., None] * dirs[:, None, :]
    dist = step * np.linalg.norm(dirs, axis=1)
    t_mid.flags.writeable = False
    dist.flags.writeable = False
    geom = (_interp_matrix(pos, g, extent), dist, t_mid)
    _GEOMETRY_CACHE[key] = geom
    if len(_GEOMETRY_CACHE) > _GEOMETRY_CACHE_SIZE:
        _GEOMETRY_CACHE.popitem(last=False)
    return geom


def _build_tape(field: VoxelRadianceField, pose: CameraPose, steps_per_ray: int,
                background) -> RenderTape:
    if steps_per_ray < 8:
        raise ValueError(f"steps_per_ray must be >= 8, got {steps_per_ray}")
    if np.all(np.abs(pose.center) < field.extent):
        raise ValueError("camera is inside the field's bounding cube")
    interp, dist, t_mid = _ray_geometry(pose, steps_per_ray, field.resolution, field.extent)
    params4 = np.concatenate([field.density[..., None], field.color], axis=-1).reshape(-1, 4)
    return RenderTape(
        shape=(pose.height, pose.width),
        resolution=field.resolution,
        field_fingerprint=field.fingerprint(),
        params4=params4,
        interp=interp,
        dist=dist,
        t_mid=t_mid,
        background=np.asarray(background, dtype=np.float64),
    )


def render(field: VoxelRadianceField, pose: CameraPose, steps_per_ray: int = 48,
           background=WHITE) -> Tuple[RenderedImage, RenderTape]:
    tape = _build_tape(field, pose, steps_per_ray, background)
    image, tape.cache = _composite(tape)
    return image, tape


def render_image(field: VoxelRadianceField, pose: CameraPose, steps_per_ray: int = 48,
                 background=WHITE) -> RenderedImage:
    return render(field, pose, steps_per_ray, background)[0]


def render_backward(tape: RenderTape, pixel_loss_grad: np.ndarray,
                    field: Optional[VoxelRadianceField] = None) -> dict:
    """Reverse-mode gradient of a loss with rgb-gradient ``pixel_loss_grad``.

    Returns ``{"density": (G,G,G), "color": (G,G,G,3)}`` in raw parameter space.
    When ``field`` is given it must be the field the tape was recorded from.
    """
    if field is not None and field.fingerprint() != tape.field_fingerprint:
        raise ValueError("render tape was recorded from a different field")
    h, w = tape.shape
    g_rgb = np.asarray(pixel_loss_grad, dtype=np.float64)
    if g_rgb.shape != (h, w, 3):
        raise ValueError(f"pixel gradient shape {g_rgb.shape} != {(h, w, 3)}")
    g_rgb = g_rgb.reshape(-1, 3)
    if tape.cache is None:
        tape.cache = _composite(tape)[1]
    raw, color, tau, trans, weights, trans_out = tape.cache

    # colour path
    d_color = weights[..., None] * g_rgb[:, None, :]
    d_raw_color = d_color * color * (1.0 - color)

    # density path: dC/dtau_k = T_{k+1} c_k - (sum_{i>k} w_i c_i + T_N bg)
    contrib = weights[..., None] * color
    suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
    suffix = suffix + trans_out[:, None, None] * tape.background
    trans_next = trans * np.exp(-tau)
    d_tau = np.einsum("rnk,rk->rn", trans_next[..., None] * color - suffix, g_rgb)
    d_raw_density = d_tau * tape.dist[:, None] * sigmoid(raw[..., 0])

    d_raw = np.concatenate([d_raw_density[..., None], d_raw_color], axis=-1).reshape(-1, 4)
    grads = tape.interp.T @ d_raw
    g = tape.resolution
    return {
        "density": grads[:, 0].reshape(g, g, g),
        "color": grads[:, 1:].reshape(g, g, g, 3),
    }


def dense_depth(field: VoxelRadianceField, pose: CameraPose, steps_per_ray: int = 48,
                threshold: float = 0.5) -> SparseDepthMap:
    """Expected termination depth; valid where accumulated opacity exceeds ``threshold``."""
    tape = _build_tape(field, pose, steps_per_ray, WHITE)
    image, (_, _, _, _, weights, _) = _composite(tape)
    opacity = image.opacity
    num = np.einsum("rn,rn->r", weights, tape.t_mid).reshape(opacity.shape)
    valid = opacity > threshold
    depth = np.where(valid, num / np.maximum(opacity, 1e-300), 0.0)
    return SparseDepthMap(depth, valid)


def render_turntable(field: VoxelRadianceField, count: int, elevation: float, radius: float,
                     steps_per_ray: int = 48, width: int = 48, height: int = 48,
                     start: float = 0.0) -> List[RenderedImage]:
    """Renders at ``count`` equally spaced azimuths, ordered by azimuth."""
    if count < 1:
        raise ValueError("turntable needs at least one frame")
    if count == 1:
        poses = [CameraPose(start, elevation, radius, width, height)]
    else:
        poses = [p.with_azimuth(p.azimuth + start)
                 for p in hemisphere_cameras(count, elevation, radius, width=width, height=height)]
    return [render_image(field, p, steps_per_ray) for p in poses]
