"""A frozen toy "image prior" for the analytic score model.

Given a condition channel it infers the viewing pose by nearest-descriptor
lookup against depth projections of the true shape, and returns the
ground-truth render at that pose. Without a condition it always returns the
frontal render, so the unconditioned score has no notion of camera pose.

Prompts are ambiguous: each prompt admits several identities (body colours).
The image is a softmax mixture over identities whose logits combine the
embedding's distance to per-identity prototypes with a mild, view-dependent
preference. A prompt embedding sitting between prototypes therefore drifts to
different identities at different views; an embedding optimized towards one
prototype pins the identity everywhere.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..geometry import CameraPose, project_depth
from ..numerics import SeededRng
from ..renderer import render
from ..shapes import FEATURE_COLOR, ShapeSpec, build_shape, generate_coarse_cloud, ground_truth_field
from .models import ConditionChannel

IDENTITY_COLORS = np.array([
    [0.90, 0.50, 0.15],  # orange
    [0.25, 0.75, 0.30],  # green
    [0.75, 0.25, 0.70],  # magenta
])


def prompt_seed(prompt_id: str) -> int:
    return zlib.crc32(prompt_id.encode("utf-8"))


def identity_prototypes(prompt_id: str, count: int, dim: int, radius: float = 3.0) -> np.ndarray:
    """Orthogonal prototype embeddings, one per identity, at equal norm."""
    g = SeededRng(prompt_seed(prompt_id)).normal((dim, dim))
    q, _ = np.linalg.qr(g)
    return radius * q[:, :count].T


def prompt_embedding(prompt_id: str, dim: int, count: int = 3) -> np.ndarray:
    """The lookup-table embedding of an ambiguous prompt: the prototypes' centroid."""
    return identity_prototypes(prompt_id, count, dim).mean(axis=0)


def depth_descriptor(cond: ConditionChannel, block: int = 4) -> np.ndarray:
    """Block-pooled occupancy and mean normalized depth; robust to point sparsity."""
    h, w = cond.shape
    hb, wb = h // block, w // block
    m = cond.mask[: hb * block, : wb * block].reshape(hb, block, wb, block)
    d = (cond.depth * cond.mask)[: hb * block, : wb * block].reshape(hb, block, wb, block)
    count = m.sum(axis=(1, 3))
    occupied = (count > 0).astype(np.float64)
    mean_depth = np.where(count > 0, d.sum(axis=(1, 3)) / np.maximum(count, 1.0), 0.0)
    return np.concatenate([occupied.ravel(), mean_depth.ravel()])


@dataclass
class WorldConfig:
    resolution: int = 24
    extent: float = 1.0
    image_size: int = 48
    steps_per_ray: int = 48
    radius: float = 3.2
    elevations: tuple = (math.radians(30.0),)
    bank_count: int = 180
    reference_points: int = 4000
    temperature: float = 1.0
    view_strength: float = 1.5


class WorldModel:
    """Implements ``mean(e, cond)`` / ``mean_vjp`` for :class:`AnalyticScore`."""

    def __init__(self, spec: ShapeSpec, prompt_id: str, embed_dim: int = 16,
                 config: Optional[WorldConfig] = None, identities: np.ndarray = IDENTITY_COLORS):
        self.spec = spec
        self.prompt_id = prompt_id
        self.config = cfg = config or WorldConfig()
        self.identities = np.asarray(identities, dtype=np.float64)
        k = self.identities.shape[0]
        self.prototypes = identity_prototypes(prompt_id, k, embed_dim)
        # preferred azimuth of each identity, evenly spread around the turntable
        self.phases = spec.feature_azimuth + 2.0 * math.pi * (np.arange(k) + 0.5) / k
        s = cfg.image_size
        self.image_shape = (s, s, 3)

        field = ground_truth_field(spec, cfg.resolution, cfg.extent)
        body = ~_feature_voxels(spec, field)
        ref_cloud = generate_coarse_cloud(spec, cfg.reference_points, SeededRng(prompt_seed(prompt_id)).spawn(99))

        poses: List[CameraPose] = []
        for el in cfg.elevations:
            for j in range(cfg.bank_count):
                poses.append(CameraPose(spec.feature_azimuth + 2.0 * math.pi * j / cfg.bank_count,
                                        el, cfg.radius, s, s))
        self.poses = poses
        body_w, opacity, desc = [], [], []
        for pose in poses:
            image, tape = render(field, pose, cfg.steps_per_ray)
            weights = tape.cache[4]
            frac = (tape.interp @ body.reshape(-1).astype(np.float64)).reshape(weights.shape)
            body_w.append((weights * np.clip(frac, 0.0, 1.0)).sum(axis=1).reshape(s, s))
            opacity.append(image.opacity)
            desc.append(depth_descriptor(ConditionChannel.from_depth(project_depth(ref_cloud, pose))))
        self.body_weight = np.stack(body_w)
        self.opacity = np.stack(opacity)
        self.descriptors = np.stack(desc)
        # frontal pose: feature azimuth at the first (default) elevation
        self.frontal_index = 0
        self.reference_cloud = ref_cloud

    # lookup ---------------------------------------------------------------
    def pose_index(self, cond: Optional[ConditionChannel]) -> int:
        if cond is None:
            return self.frontal_index
        d = depth_descriptor(cond)
        dist = ((self.descriptors - d) ** 2).sum(axis=1)
        return int(np.argmin(dist))

    def image(self, j: int, identity: int) -> np.ndarray:
        return self._basis(j)[identity]

    def _basis(self, j: int) -> np.ndarray:
        """(K, H, W, 3) ground-truth renders of every identity at bank pose ``j``."""
        bw = self.body_weight[j][..., None]
        op = self.opacity[j][..., None]
        fixed = (op - bw) * FEATURE_COLOR + (1.0 - op) * 1.0
        return bw[None] * self.identities[:, None, None, :] + fixed[None]

    def logits(self, e, j: int) -> np.ndarray:
        e = np.asarray(e, dtype=np.float64)
        dist2 = ((self.prototypes - e) ** 2).sum(axis=1)
        az = self.poses[j].azimuth
        return -dist2 / self.config.temperature + self.config.view_strength * np.cos(az - self.phases)

    def weights(self, e, j: int) -> np.ndarray:
        z = self.logits(e, j)
        z = np.exp(z - z.max())
        return z / z.sum()

    def identity_index(self, e, cond=None) -> int:
        return int(np.argmax(self.weights(e, self.pose_index(cond))))

    # target interface -------------------------------------------------------
    def mean(self, e, cond: Optional[ConditionChannel] = None) -> np.ndarray:
        j = self.pose_index(cond)
        return np.tensordot(self.weights(e, j), self._basis(j), axes=1)

    def mean_vjp(self, e, cond, g) -> np.ndarray:
        j = self.pose_index(cond)
        s = self.weights(e, j)
        a = np.tensordot(self._basis(j), np.asarray(g), axes=([1, 2, 3], [0, 1, 2]))
        d_logit = s * (a - s @ a)
        d_dist = -d_logit / self.config.temperature
        return (d_dist[:, None] * 2.0 * (np.asarray(e) - self.prototypes)).sum(axis=0)


def _feature_voxels(spec: ShapeSpec, field) -> np.ndarray:
    vox = 2.0 * field.extent / field.resolution
    return build_shape(spec).feature_mask(field.voxel_centers(), margin=0.5 * vox)
