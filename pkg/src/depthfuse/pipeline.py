"""End-to-end run orchestration and on-disk artifacts.

Stages run in a fixed order (model, semantic-code, cloud, adapters, distill,
artifacts). A failure in any stage is re-raised as :class:`StageError`
carrying the stage name. ``manifest.json`` is written before any stage runs
and rewritten with results, hashes and timings at the end.
"""

from __future__ import annotations

import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config import Config
from .diffusion.models import AnalyticScore, ConditionChannel, MLPDenoiser
from .diffusion.schedule import NoiseSchedule, build_schedule
from .diffusion.training import (Example, SemanticCode, optimize_embedding, pretrain_base,
                                 train_injector, tune_adapters)
from .diffusion.world import IDENTITY_COLORS, WorldConfig, WorldModel, prompt_embedding
from .distill import DistillConfig, DistillError, distill
from .evaluation import EstimatorParams
from .fileio import ensure_dir, file_hash, write_field, write_json, write_losses, write_ply, write_ppm
from .geometry import CameraPose, PointCloud, augment_cloud, project_depth
from .numerics import OptimizerState, SeededRng, checksum
from .renderer import VoxelRadianceField, dense_depth, render_image, render_turntable
from .shapes import ShapeSpec, generate_coarse_cloud, ground_truth_field

STAGES = ("model", "semantic-code", "cloud", "adapters", "distill", "artifacts")

# stream keys, fixed so every stage draws from its own reproducible substream
_STREAM = {"embedding": 11, "cloud": 12, "augment": 13, "adapters": 14, "random-code": 15,
           "injector-data": 16, "pretrain": 17, "injector": 18}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunManifest:
    command: str
    prompt_id: str
    shape: str
    mode: str
    seed: int
    seed_source: str
    config: Dict[str, object]
    decisions: Dict[str, object] = field(default_factory=dict)
    stages: List[Dict[str, object]] = field(default_factory=list)
    hashes: Dict[str, str] = field(default_factory=dict)
    checksums: Dict[str, str] = field(default_factory=dict)
    loss_proxy: List[float] = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "running"
    error: Optional[Dict[str, object]] = None
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        write_json(path, self.to_dict())


@dataclass
class PipelineResult:
    field: VoxelRadianceField
    code: SemanticCode
    cloud: PointCloud
    manifest: RunManifest
    out_dir: Optional[Path]


# builders ------------------------------------------------------------------

def schedule_from(cfg: Config) -> NoiseSchedule:
    return build_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max, cfg.weighting)


def world_config_from(cfg: Config) -> WorldConfig:
    return WorldConfig(resolution=cfg.resolution, image_size=cfg.image_size,
                       steps_per_ray=cfg.steps_per_ray, radius=cfg.camera_radius,
                       elevations=(math.radians(cfg.elevation_min_deg),),
                       bank_count=cfg.world_bank_count, temperature=cfg.world_temperature,
                       view_strength=cfg.world_view_strength)


def distill_config_from(cfg: Config, seed: int, mode: Optional[str] = None) -> DistillConfig:
    return DistillConfig(iterations=cfg.iterations, t_min=cfg.t_min, t_max=cfg.t_max,
                         elevation_min=math.radians(cfg.elevation_min_deg),
                         elevation_max=math.radians(cfg.elevation_max_deg),
                         radius=cfg.camera_radius, image_size=cfg.image_size,
                         steps_per_ray=cfg.steps_per_ray, resolution=cfg.resolution,
                         lr=cfg.lr, mode=mode or cfg.mode, seed=seed,
                         views_per_iteration=cfg.views_per_iteration,
                         lambda_inject=cfg.lambda_inject, lambda_lora=cfg.lambda_lora)


def estimator_from(cfg: Config) -> EstimatorParams:
    return EstimatorParams(tie_tolerance=cfg.tie_tolerance, bank_factor=cfg.bank_factor,
                           radius=cfg.camera_radius, image_size=cfg.image_size,
                           steps_per_ray=cfg.steps_per_ray)


def frontal_pose(spec: ShapeSpec, cfg: Config) -> CameraPose:
    return CameraPose(spec.feature_azimuth, math.radians(cfg.elevation_min_deg), cfg.camera_radius,
                      cfg.image_size, cfg.image_size)


def reference_field(spec: ShapeSpec, cfg: Config) -> VoxelRadianceField:
    body = IDENTITY_COLORS[cfg.reference_identity % len(IDENTITY_COLORS)]
    return ground_truth_field(spec, cfg.resolution, body_color=body)


def reference_image(spec: ShapeSpec, cfg: Config) -> np.ndarray:
    """The reference x-hat: the ground-truth render at the frontal pose."""
    return render_image(reference_field(spec, cfg), frontal_pose(spec, cfg), cfg.steps_per_ray).rgb


def coarse_cloud(spec: ShapeSpec, cfg: Config, seed: int) -> PointCloud:
    root = SeededRng(seed)
    cloud = generate_coarse_cloud(spec, cfg.cloud_points, root.spawn(_STREAM["cloud"]))
    return augment_cloud(cloud, cfg.keep_fraction, cfg.noise_fraction, cfg.noise_scale,
                         root.spawn(_STREAM["augment"]))


def random_embedding(prompt_id: str, dim: int, scale: float, rng: SeededRng) -> np.ndarray:
    """The prompt's lookup embedding plus isotropic Gaussian jitter."""
    return prompt_embedding(prompt_id, dim) + scale * rng.normal((dim,))


def injector_dataset(families: Sequence[str], prompt_id: str, cfg: Config, rng: SeededRng,
                     views: Optional[int] = None) -> List[Example]:
    """Ground-truth renders of generic objects, each paired with a depth condition.

    Every example draws a shape family, a feature azimuth, an identity colour
    and a camera azimuth. A ``dense_fraction`` share uses the rendered dense
    depth; the rest use sparse projections of a freshly augmented coarse cloud.
    """
    views = cfg.injector_views if views is None else views
    if not families:
        raise ValueError("injector dataset needs at least one shape family")
    e = prompt_embedding(prompt_id, cfg.embed_dim)
    el = math.radians(cfg.elevation_min_deg)
    out = []
    for i in range(views):
        r = rng.spawn(i)
        family = families[int(r.integers(0, len(families)))]
        spec = ShapeSpec(family, feature_azimuth=float(r.uniform((), 0.0, 2.0 * math.pi)))
        ident = int(r.integers(0, len(IDENTITY_COLORS)))
        gt = ground_truth_field(spec, cfg.resolution, body_color=IDENTITY_COLORS[ident])
        pose = CameraPose(float(r.uniform((), 0.0, 2.0 * math.pi)), el, cfg.camera_radius,
                          cfg.image_size, cfg.image_size)
        image = render_image(gt, pose, cfg.steps_per_ray).rgb
        if float(r.uniform(())) < cfg.dense_fraction:
            depth = dense_depth(gt, pose, cfg.steps_per_ray)
            kind = "dense"
        else:
            cloud = augment_cloud(generate_coarse_cloud(spec, cfg.cloud_points, r.spawn(1)),
                                  cfg.keep_fraction, cfg.noise_fraction, cfg.noise_scale, r.spawn(2))
            depth = project_depth(cloud, pose)
            kind = "sparse"
        out.append(Example(image, e, ConditionChannel.from_depth(depth), kind))
    return out


def build_mlp(cfg: Config, schedule: NoiseSchedule, seed: int) -> MLPDenoiser:
    s = cfg.image_size
    return MLPDenoiser((s, s, 3), schedule, hidden=tuple(cfg.hidden), embed_dim=cfg.embed_dim,
                       rank=cfg.lora_rank, lambda_inject=cfg.lambda_inject,
                       lambda_lora=cfg.lambda_lora, basis_rank=cfg.prior_rank, seed=seed)


def train_mlp(prompt_id: str, cfg: Config, seed: int, dataset: Optional[List[Example]] = None):
    """Pretrain the base on unconditioned renders, then fit the injector with it frozen."""
    schedule = schedule_from(cfg)
    root = SeededRng(seed)
    model = build_mlp(cfg, schedule, seed)
    if dataset is None:
        dataset = injector_dataset(cfg.injector_shapes, prompt_id, cfg, root.spawn(_STREAM["injector-data"]))
    images = np.stack([ex.image for ex in dataset])
    embeds = np.stack([ex.embedding for ex in dataset])
    base_trace = pretrain_base(model, images, embeds, schedule, OptimizerState("adam", lr=cfg.injector_lr),
                               cfg.pretrain_steps, root.spawn(_STREAM["pretrain"]), cfg.injector_batch)
    inj_trace = train_injector(model, dataset, schedule, OptimizerState("adam", lr=cfg.injector_lr),
                               cfg.injector_steps, root.spawn(_STREAM["injector"]), cfg.injector_batch)
    return model, {"pretrain": base_trace, "injector": inj_trace}


def build_model(spec: ShapeSpec, prompt_id: str, cfg: Config, seed: int, model=None):
    """Returns (model, notes). An analytic model wraps a world model of ``spec``."""
    if model is not None:
        return model, {"source": "provided"}
    schedule = schedule_from(cfg)
    if cfg.model == "analytic-gaussian":
        world = WorldModel(spec, prompt_id, cfg.embed_dim, world_config_from(cfg))
        return AnalyticScore(schedule, world, cfg.lambda_inject), {"source": "analytic world model"}
    trained, traces = train_mlp(prompt_id, cfg, seed)
    return trained, {"source": "trained in-run", "injector_final_loss": traces["injector"][-1]
                     if traces["injector"] else None}


# pipeline -------------------------------------------------------------------

def _stage(manifest: RunManifest, name: str):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()
            self.entry = {"name": name, "status": "running", "notes": {}}
            manifest.stages.append(self.entry)
            return self.entry

        def __exit__(self, exc_type, exc, tb):
            self.entry["wall_clock_s"] = time.perf_counter() - self.t0
            if exc is None:
                self.entry["status"] = self.entry.get("status_override", "done")
                self.entry.pop("status_override", None)
                return False
            self.entry["status"] = "failed"
            info = {"stage": name, "message": str(exc)}
            if isinstance(exc, DistillError):
                info["iteration"] = exc.iteration
            manifest.status = "failed"
            manifest.error = info
            if isinstance(exc, StageError):
                return False
            raise StageError(name, str(exc)) from exc

    return _Ctx()


def decision_values(cfg: Config, seed: int) -> Dict[str, object]:
    """Values the run depends on that are fixed by design rather than by config."""
    sched = schedule_from(cfg)
    d = distill_config_from(cfg, seed)
    return {
        "sds_weight": "1 - alpha_bar(t)" if cfg.weighting == "variance" else "1",
        "t_range_steps": [max(1, math.ceil(d.t_min * sched.T)), math.floor(d.t_max * sched.T)],
        "azimuth_distribution": "uniform [0, 2pi)",
        "cloud_projection": "fresh every iteration",
        "depth_normalization": "per view, nearest valid point = 1, farthest = 0",
        "optimizer": "adam(beta1=0.9, beta2=0.999, eps=1e-8)",
        "init_field": "density blob radius 0.6 extent, colour jitter 0.05",
        "reference_image": "ground-truth render at frontal pose",
        "eval_estimator": asdict(estimator_from(cfg)),
        "stream_keys": dict(_STREAM),
    }


def run_pipeline(prompt_id: str, spec: ShapeSpec, cfg: Config, out_dir=None, seed: int = 0,
                 seed_source: str = "default", mode: Optional[str] = None, model=None,
                 embedding: Optional[np.ndarray] = None, command: str = "distill",
                 turntable: bool = True) -> PipelineResult:
    """Semantic code, coarse cloud, adapter tuning, distillation and artifacts, in order.

    ``embedding`` skips embedding inversion and uses the given vector instead
    (the random-code ablation); ``model`` reuses an already built score model.
    """
    mode = mode or cfg.mode
    started = time.perf_counter()
    manifest = RunManifest(command, prompt_id, spec.family, mode, seed, seed_source,
                           config=dict(cfg.values), decisions=decision_values(cfg, seed))
    out = None
    if out_dir is not None:
        out = ensure_dir(out_dir)
        manifest.write(out / "manifest.json")
    root = SeededRng(seed)
    try:
        with _stage(manifest, "model") as st:
            model, notes = build_model(spec, prompt_id, cfg, seed, model)
            st["notes"].update(notes, kind=model.kind)
        schedule = model.schedule

        with _stage(manifest, "semantic-code") as st:
            x_hat = reference_image(spec, cfg)
            e0 = prompt_embedding(prompt_id, cfg.embed_dim)
            if embedding is not None:
                e_hat = np.asarray(embedding, dtype=np.float64)
                st["notes"]["embedding"] = "supplied (inversion skipped)"
            elif cfg.embed_steps == 0:
                e_hat = e0
                st["notes"]["embedding"] = "prompt lookup (0 inversion steps)"
            else:
                e_hat, trace = optimize_embedding(
                    model, x_hat, e0, schedule, OptimizerState("adam", lr=cfg.embed_lr),
                    cfg.embed_steps, root.spawn(_STREAM["embedding"]), cfg.embed_batch,
                    (cfg.embed_t_min, cfg.embed_t_max))
                st["notes"].update(first_loss=trace[0], final_loss=trace[-1])
            code = SemanticCode(x_hat, e_hat)
            manifest.checksums["embedding"] = checksum(e_hat)

        with _stage(manifest, "cloud") as st:
            cloud = coarse_cloud(spec, cfg, seed)
            st["notes"]["points"] = len(cloud)

        with _stage(manifest, "adapters") as st:
            if not isinstance(model, MLPDenoiser):
                st["status_override"] = "skipped"
                st["notes"]["reason"] = "analytic model has no adapter weights"
            elif cfg.lambda_lora == 0.0 or cfg.adapter_steps == 0:
                st["status_override"] = "skipped"
                st["notes"]["reason"] = "lambda_lora = 0 or adapter_steps = 0"
            else:
                sampler = _frontal_condition(spec, cfg, cloud)
                trace = tune_adapters(model, code, sampler, schedule,
                                      OptimizerState("adam", lr=cfg.adapter_lr), cfg.adapter_steps,
                                      root.spawn(_STREAM["adapters"]))
                st["notes"].update(first_loss=trace[0], final_loss=trace[-1])
            if isinstance(model, MLPDenoiser):
                for blk in ("theta", "phi", "psi"):
                    manifest.checksums[blk] = model.checksum(blk)

        with _stage(manifest, "distill") as st:
            dcfg = distill_config_from(cfg, seed, mode)
            try:
                final, record = distill(dcfg, model, code, cloud, schedule)
            except DistillError as exc:
                manifest.loss_proxy = list(getattr(exc, "record", {}).get("losses", []))
                raise
            manifest.loss_proxy = record["losses"]
            st["notes"].update(t_range=record["t_range"], iterations=record["iterations_done"])
            manifest.checksums["field"] = final.fingerprint()

        with _stage(manifest, "artifacts"):
            if out is not None:
                write_artifacts(out, final, cloud, code, manifest, cfg, turntable)
    finally:
        manifest.wall_clock_s = time.perf_counter() - started
        if manifest.status == "running":
            manifest.status = "complete"
        if out is not None:
            manifest.write(out / "manifest.json")
    return PipelineResult(final, code, cloud, manifest, out)


def _frontal_condition(spec: ShapeSpec, cfg: Config, cloud: PointCloud):
    def sampler(pose=None):
        p = pose or frontal_pose(spec, cfg)
        return ConditionChannel.from_depth(project_depth(cloud, p))
    return sampler


def write_artifacts(out: Path, fld: VoxelRadianceField, cloud: PointCloud, code: SemanticCode,
                    manifest: RunManifest, cfg: Config, turntable: bool = True) -> None:
    write_field(out / "field.ckpt", fld)
    write_losses(out / "losses.csv", manifest.loss_proxy)
    write_ply(out / "cloud.ply", cloud)
    write_ppm(out / "reference.ppm", code.reference_image)
    np.save(out / "embedding.npy", code.embedding)
    names = ["field.ckpt", "losses.csv", "cloud.ply", "reference.ppm", "embedding.npy"]
    if turntable:
        names += write_turntable(out / "turntable", fld, cfg, prefix="turntable/")
    manifest.hashes = {n: file_hash(out / n) for n in names}


def write_turntable(directory, fld: VoxelRadianceField, cfg: Config, count: Optional[int] = None,
                    prefix: str = "") -> List[str]:
    d = ensure_dir(directory)
    count = cfg.eval_frames if count is None else count
    frames = render_turntable(fld, count, math.radians(cfg.eval_elevation_deg), cfg.camera_radius,
                              cfg.steps_per_ray, cfg.image_size, cfg.image_size)
    names = []
    for i, img in enumerate(frames):
        name = f"frame_{i:03d}.ppm"
        write_ppm(d / name, img)
        names.append(prefix + name)
    return names
