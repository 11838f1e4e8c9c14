"""Score distillation of a voxel field, with optional depth-conditioned scores.

``sds_gradient`` forms ``w(t) * (eps_pred - eps)`` on the rendered image and
pushes it through the renderer's backward pass only; the score model is
queried forward and never differentiated.
"""

from __future__ import annotations

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .diffusion.models import ConditionChannel
from .diffusion.schedule import NoiseSchedule, add_noise
from .diffusion.training import SemanticCode
from .geometry import CameraPose, PointCloud, project_depth
from .numerics import OptimizerState, SeededRng, step_all
from .renderer import VoxelRadianceField, render, render_backward

log = logging.getLogger(__name__)

MODES = ("fused", "baseline")


class DistillError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 2000
    t_min: float = 0.02
    t_max: float = 0.98
    elevation_min: float = math.radians(30.0)
    elevation_max: float = math.radians(30.0)
    radius: float = 3.2
    image_size: int = 48
    steps_per_ray: int = 48
    resolution: int = 24
    extent: float = 1.0
    lr: float = 0.05
    mode: str = "fused"
    seed: int = 0
    views_per_iteration: int = 1
    lambda_inject: Optional[float] = None  # None keeps the model's own setting
    lambda_lora: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ValueError(f"need 0 < t_min < t_max <= 1, got {self.t_min}, {self.t_max}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.views_per_iteration < 1:
            raise ValueError("views_per_iteration must be >= 1")
        for name in ("lambda_inject", "lambda_lora"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.elevation_max < self.elevation_min:
            raise ValueError("elevation_max < elevation_min")


def initial_field(resolution: int, extent: float, rng: SeededRng) -> VoxelRadianceField:
    """Grey density blob at the origin with a small seeded colour jitter."""
    blank = VoxelRadianceField.empty(resolution, extent)
    r = np.linalg.norm(blank.voxel_centers(), axis=-1)
    density = 4.0 - 8.0 * r / (0.6 * extent)
    color = 0.05 * rng.normal((resolution, resolution, resolution, 3))
    return VoxelRadianceField(density, color, extent)


def sds_gradient(model, field: VoxelRadianceField, pose: CameraPose, t: int, rng: SeededRng,
                 code: Optional[SemanticCode], cond: Optional[ConditionChannel],
                 schedule: NoiseSchedule, steps_per_ray: int = 48,
                 embedding: Optional[np.ndarray] = None):
    """One-sample SDS gradient over the field's raw parameters.

    Returns ``(grads, info)`` where ``info`` carries the rendered image and the
    weighted residual. ``embedding`` overrides ``code.embedding`` when given.
    """
    image, tape = render(field, pose, steps_per_ray)
    x = image.rgb
    eps = rng.normal(x.shape)
    x_t = add_noise(x, t, eps, schedule)
    e = embedding if embedding is not None else code.embedding
    pred = model.predict_noise(x_t, t, e, cond)
    resid = schedule.weight(t) * (pred - eps)
    grads = render_backward(tape, resid)
    return grads, {"image": image, "residual": resid, "loss": float(np.mean((pred - eps) ** 2))}


def sample_pose(config: DistillConfig, rng: SeededRng) -> CameraPose:
    az = float(rng.uniform((), 0.0, 2.0 * math.pi))
    if config.elevation_max > config.elevation_min:
        el = float(rng.uniform((), config.elevation_min, config.elevation_max))
    else:
        el = config.elevation_min
    return CameraPose(az, el, config.radius, config.image_size, config.image_size)


@contextmanager
def _scales(model, config: DistillConfig):
    saved = {}
    for name in ("lambda_inject", "lambda_lora"):
        v = getattr(config, name)
        if v is not None and hasattr(model, name):
            saved[name] = getattr(model, name)
            setattr(model, name, v)
    try:
        yield
    finally:
        for name, v in saved.items():
            setattr(model, name, v)


def distill(config: DistillConfig, model, code: SemanticCode, cloud: Optional[PointCloud],
            schedule: NoiseSchedule, field: Optional[VoxelRadianceField] = None,
            embedding: Optional[np.ndarray] = None,
            callback: Optional[Callable[[int, dict], None]] = None):
    """Run SDS for ``config.iterations`` steps; returns (field, record).

    A non-finite gradient raises :class:`DistillError`; the partial record is
    attached to the exception as ``record``.
    """
    fused = config.mode == "fused"
    if fused and (cloud is None or len(cloud) == 0):
        raise ValueError("fused mode needs a non-empty point cloud")
    rng = SeededRng(config.seed)
    if field is None:
        field = initial_field(config.resolution, config.extent, rng.spawn(0))
    opt = OptimizerState("adam", lr=config.lr)
    params = {"density": field.density.copy(), "color": field.color.copy()}
    lo = max(1, int(math.ceil(config.t_min * schedule.T)))
    hi = max(lo, int(math.floor(config.t_max * schedule.T)))
    losses: List[float] = []
    record = {"losses": losses, "t_range": [lo, hi], "iterations_done": 0}
    started = time.perf_counter()
    with _scales(model, config):
        for it in range(config.iterations):
            current = field.with_params(params)
            total = None
            loss = 0.0
            for v in range(config.views_per_iteration):
                r = rng.spawn(1, it, v)
                pose = sample_pose(config, r)
                t = int(r.integers(lo, hi + 1))
                cond = ConditionChannel.from_depth(project_depth(cloud, pose)) if fused else None
                grads, info = sds_gradient(model, current, pose, t, r, code, cond, schedule,
                                           config.steps_per_ray, embedding)
                loss += info["loss"] / config.views_per_iteration
                if total is None:
                    total = grads
                else:
                    total = {k: total[k] + grads[k] for k in total}
                if callback is not None:
                    callback(it, info)
            if config.views_per_iteration > 1:
                total = {k: g / config.views_per_iteration for k, g in total.items()}
            if not all(np.all(np.isfinite(g)) for g in total.values()):
                record["wall_clock_s"] = time.perf_counter() - started
                err = DistillError(f"non-finite gradient at iteration {it}", it)
                err.record = record
                raise err
            params = step_all(opt, params, total)
            losses.append(loss)
            record["iterations_done"] = it + 1
    record["wall_clock_s"] = time.perf_counter() - started
    return field.with_params(params), record
