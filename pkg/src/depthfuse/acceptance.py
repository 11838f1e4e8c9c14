"""Canned acceptance experiments.

Each suite writes ``<suite>.csv`` holding only computed quantities (no
timings), so two runs with the same seeds produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import Config
from .diffusion.models import AnalyticScore, LinearDecoder
from .diffusion.schedule import build_schedule
from .diffusion.training import SemanticCode, denoising_loss, train_injector, tune_adapters
from .diffusion.world import prompt_embedding
from .distill import sds_gradient
from .evaluation import color_variance, consistency_variance
from .fileio import ensure_dir
from .geometry import CameraPose
from .numerics import OptimizerState, SeededRng, checksum, cosine, finite_difference_gradient
from .pipeline import (build_model, estimator_from, injector_dataset, random_embedding,
                       reference_image, run_pipeline, train_mlp, _frontal_condition,
                       coarse_cloud, _STREAM)
from .renderer import VoxelRadianceField, render, render_backward, render_turntable
from .shapes import ShapeSpec, ground_truth_field, symmetric_field


@dataclass
class SuiteResult:
    name: str
    passed: bool
    summary: str
    header: List[str]
    rows: List[list]
    seconds: float = 0.0
    extra: Dict[str, object] = field(default_factory=dict)

    def write_csv(self, directory) -> Path:
        path = Path(directory) / f"{self.name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([_fmt(v) for v in row])
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


def _random_field(resolution: int, rng: SeededRng) -> VoxelRadianceField:
    g = resolution
    return VoxelRadianceField(0.5 + rng.normal((g, g, g)), rng.spawn(1).normal((g, g, g, 3)))


# 1 --------------------------------------------------------------------------

def suite_gradient(seeds=None, iterations=None) -> SuiteResult:
    """Renderer backward pass against central differences on a tiny field."""
    rng = SeededRng(7)
    fld = _random_field(8, rng)
    pose = CameraPose(0.3, 0.4, 3.2, 16, 16)
    steps = 16
    g = rng.spawn(2).normal((16, 16, 3))
    _, tape = render(fld, pose, steps)
    grads = render_backward(tape, g)
    analytic = np.concatenate([grads["density"].ravel(), grads["color"].ravel()])
    n_d = fld.density.size

    def loss(flat):
        f = VoxelRadianceField(flat[:n_d].reshape(fld.density.shape),
                               flat[n_d:].reshape(fld.color.shape), fld.extent)
        img, _ = render(f, pose, steps)
        return float(np.sum(g * img.rgb))

    x0 = np.concatenate([fld.density.ravel(), fld.color.ravel()])
    fd = finite_difference_gradient(loss, x0, 1e-5)
    rel = float(np.linalg.norm(analytic - fd) / np.linalg.norm(fd))
    rows = [["density", float(np.linalg.norm(analytic[:n_d] - fd[:n_d]) / np.linalg.norm(fd[:n_d]))],
            ["color", float(np.linalg.norm(analytic[n_d:] - fd[n_d:]) / np.linalg.norm(fd[n_d:]))],
            ["all", rel]]
    passed = rel < 1e-3
    return SuiteResult("gradient", passed, f"relative error {rel:.3e} (< 1e-3)",
                       ["block", "relative_error"], rows)


# 2 --------------------------------------------------------------------------

def sds_setup(seed: int = 3):
    """An analytic score on a random linear decoder, a tiny field and a pose."""
    rng = SeededRng(seed)
    schedule = build_schedule()
    shape = (16, 16, 3)
    p = int(np.prod(shape))
    decoder = LinearDecoder(0.3 * rng.normal((p, 4)), 0.5 + 0.1 * rng.spawn(1).normal((p,)), shape)
    model = AnalyticScore(schedule, decoder)
    fld = _random_field(8, rng.spawn(2))
    pose = CameraPose(0.7, 0.5, 3.2, 16, 16)
    e = rng.spawn(3).normal((4,))
    return model, schedule, fld, pose, e


def full_sds_loss(model, schedule, fld, pose, t, noise_seed, e, steps=16) -> Callable:
    """Flat-parameter closure of w(t) * ||eps_hat(x_t) - eps||^2 with fixed noise."""
    n_d = fld.density.size

    def loss(flat):
        f = VoxelRadianceField(flat[:n_d].reshape(fld.density.shape),
                               flat[n_d:].reshape(fld.color.shape), fld.extent)
        img, _ = render(f, pose, steps)
        eps = SeededRng(noise_seed).normal(img.rgb.shape)
        a = schedule.alpha_bar(t)
        x_t = math.sqrt(a) * img.rgb + math.sqrt(1.0 - a) * eps
        resid = model.predict_noise(x_t, t, e) - eps
        return float(schedule.weight(t) * np.sum(resid ** 2))

    return loss


def suite_sds(seeds=None, iterations=None) -> SuiteResult:
    model, schedule, fld, pose, e = sds_setup()
    rows = []
    worst = 1.0
    for t in (100, 500, 900):
        grads, _ = sds_gradient(model, fld, pose, t, SeededRng(40 + t), None, None, schedule, 16, e)
        sds = np.concatenate([grads["density"].ravel(), grads["color"].ravel()])
        x0 = np.concatenate([fld.density.ravel(), fld.color.ravel()])
        fd = finite_difference_gradient(full_sds_loss(model, schedule, fld, pose, t, 40 + t, e), x0, 1e-5)
        c = cosine(sds, fd)
        ratio = float(np.dot(fd, sds) / np.dot(sds, sds))
        a = schedule.alpha_bar(t)
        rows.append([t, c, ratio, 2.0 * math.sqrt(a / (1.0 - a))])
        worst = min(worst, c)
    passed = worst > 1.0 - 1e-6
    return SuiteResult("sds", passed, f"min cosine {worst:.9f} (> 1 - 1e-6)",
                       ["t", "cosine", "fd_over_sds", "predicted_ratio"], rows)


# 3 --------------------------------------------------------------------------

def janus_config(iterations: Optional[int] = None) -> Config:
    cfg = Config()
    return cfg.replace(iterations=iterations) if iterations is not None else cfg


def front_back_distance(fld: VoxelRadianceField, spec: ShapeSpec, cfg: Config) -> float:
    el = math.radians(cfg.eval_elevation_deg)
    frames = render_turntable(fld, 2, el, cfg.camera_radius, cfg.steps_per_ray, cfg.image_size,
                              cfg.image_size, start=spec.feature_azimuth)
    return float(np.max(np.abs(frames[0].rgb - frames[1].rgb)))


def suite_janus(seeds: Optional[int] = None, iterations: Optional[int] = None) -> SuiteResult:
    """Baseline vs fused consistency variance on the asymmetric cone, per seed."""
    n = 5 if seeds is None else seeds
    cfg = janus_config(iterations)
    spec = ShapeSpec("asymmetric-cone")
    model, _ = build_model(spec, cfg.prompt_id, cfg, 0)
    params = estimator_from(cfg)
    el = math.radians(cfg.eval_elevation_deg)
    rows = []
    for seed in range(n):
        out = {}
        for mode in ("baseline", "fused"):
            res = run_pipeline(cfg.prompt_id, spec, cfg, None, seed, "acceptance", mode, model=model)
            rep = consistency_variance(res.field, cfg.eval_frames, el, params)
            out[mode] = (rep.variance, front_back_distance(res.field, spec, cfg))
        rows.append([seed, out["baseline"][0], out["fused"][0], out["baseline"][1], out["fused"][1]])
    base = [r[1] for r in rows]
    fused = [r[2] for r in rows]
    per_seed = all(f < b for b, f in zip(base, fused))
    med_b, med_f = statistics.median(base), statistics.median(fused)
    passed = per_seed and med_f < 0.5 * med_b
    return SuiteResult("janus", passed,
                       f"median fused {med_f:.3e} vs baseline {med_b:.3e}; fused < baseline on "
                       f"{sum(f < b for b, f in zip(base, fused))}/{n} seeds",
                       ["seed", "baseline_variance", "fused_variance", "baseline_front_back",
                        "fused_front_back"], rows)


# 4 --------------------------------------------------------------------------

def small_mlp_config() -> Config:
    return Config().replace(model="mlp-denoiser", image_size=16, steps_per_ray=24, resolution=16,
                            cloud_points=1500, hidden=[128, 768])


def suite_injector(seeds=None, iterations=None) -> SuiteResult:
    """Held-out conditional loss with the trained injector vs lambda_inject = 0."""
    cfg = small_mlp_config()
    root = SeededRng(0)
    train = injector_dataset(cfg.injector_shapes, cfg.prompt_id, cfg, root.spawn(1), views=200)
    held = injector_dataset(cfg.injector_shapes, cfg.prompt_id, cfg, root.spawn(2), views=64)
    model, traces = train_mlp(cfg.prompt_id, cfg.replace(injector_steps=0), 0, dataset=train)
    theta_before = model.checksum("theta")
    train_injector(model, train, model.schedule, OptimizerState("adam", lr=cfg.injector_lr),
                   cfg.injector_steps, root.spawn(3), cfg.injector_batch)
    theta_after = model.checksum("theta")

    # every held-out view is scored at several (t, noise) draws
    r = root.spawn(4)
    draws = 4
    images = np.concatenate([np.stack([ex.image for ex in held])] * draws)
    embeds = np.concatenate([np.stack([ex.embedding for ex in held])] * draws)
    conds = [ex.condition for ex in held] * draws
    ts = r.integers(1, model.schedule.T + 1, size=len(images))
    eps = r.spawn(1).normal(images.shape)
    with_injector = denoising_loss(model, images, embeds, conds, ts, eps, use_adapters=False)
    saved = model.lambda_inject
    model.lambda_inject = 0.0
    without = denoising_loss(model, images, embeds, conds, ts, eps, use_adapters=False)
    model.lambda_inject = saved
    gain = 1.0 - with_injector / without
    same = theta_before == theta_after
    passed = gain >= 0.10 and same
    rows = [["lambda_inject_0", without], ["trained_injector", with_injector],
            ["relative_gain", gain], ["theta_unchanged", same]]
    return SuiteResult("injector", passed, f"held-out loss {with_injector:.5f} vs {without:.5f} "
                       f"(gain {100 * gain:.1f}% >= 10%), theta unchanged: {same}",
                       ["quantity", "value"], rows)


# 5 --------------------------------------------------------------------------

def semantic_config(iterations: Optional[int] = None) -> Config:
    # a stronger view term makes the frontal feature the dominant cue the code must carry
    cfg = Config().replace(image_size=32, steps_per_ray=32, resolution=16, iterations=800,
                           world_view_strength=3.0)
    return cfg.replace(iterations=iterations) if iterations is not None else cfg


RANDOM_CODES = 10
RANDOM_CODE_SCALE = 0.25


def suite_semantic(seeds: Optional[int] = None, iterations: Optional[int] = None) -> SuiteResult:
    """Turntable colour variance with the optimized code vs random codes (median of 10)."""
    n = 3 if seeds is None else seeds
    cfg = semantic_config(iterations)
    spec = ShapeSpec("asymmetric-cone")
    model, _ = build_model(spec, cfg.prompt_id, cfg, 0)
    el = math.radians(cfg.eval_elevation_deg)

    def turntable_variance(fld):
        return color_variance(render_turntable(fld, 36, el, cfg.camera_radius, cfg.steps_per_ray,
                                               cfg.image_size, cfg.image_size))

    rows = []
    for seed in range(n):
        opt = run_pipeline(cfg.prompt_id, spec, cfg, None, seed, "acceptance", "fused", model=model)
        v_opt = turntable_variance(opt.field)
        rvars = []
        for k in range(RANDOM_CODES):
            e = random_embedding(cfg.prompt_id, cfg.embed_dim, RANDOM_CODE_SCALE,
                                 SeededRng(seed).spawn(_STREAM["random-code"], k))
            res = run_pipeline(cfg.prompt_id, spec, cfg, None, seed, "acceptance", "fused",
                               model=model, embedding=e)
            rvars.append(turntable_variance(res.field))
        rows.append([seed, v_opt, statistics.median(rvars), min(rvars), max(rvars)])
    passed = all(r[1] < r[2] for r in rows)
    return SuiteResult("semantic", passed,
                       "optimized < random median on "
                       f"{sum(r[1] < r[2] for r in rows)}/{n} seeds "
                       f"({', '.join(f'{r[1]:.2e}<{r[2]:.2e}' for r in rows)})",
                       ["seed", "optimized_variance", "random_median", "random_min", "random_max"], rows)


# 6 --------------------------------------------------------------------------

def suite_adapter(seeds=None, iterations=None) -> SuiteResult:
    cfg = small_mlp_config().replace(pretrain_steps=150, injector_steps=100, adapter_steps=100)
    spec = ShapeSpec("asymmetric-cone")
    model, _ = train_mlp(cfg.prompt_id, cfg, 0)
    schedule = model.schedule
    x_hat = reference_image(spec, cfg)
    e_hat = prompt_embedding(cfg.prompt_id, cfg.embed_dim)
    code = SemanticCode(x_hat, e_hat.copy())
    cloud = coarse_cloud(spec, cfg, 0)
    sampler = _frontal_condition(spec, cfg, cloud)
    cond = sampler()

    r = SeededRng(5)
    ts = r.integers(1, schedule.T + 1, size=32)
    eps = r.spawn(1).normal((32, *x_hat.shape))
    images = np.broadcast_to(x_hat, eps.shape)

    x_t = np.sqrt(schedule.alphas_bar[ts - 1])[:, None, None, None] * images + \
        np.sqrt(1.0 - schedule.alphas_bar[ts - 1])[:, None, None, None] * eps
    on, _ = model.forward(x_t, ts, e_hat, cond, use_adapters=True)
    off, _ = model.forward(x_t, ts, e_hat, cond, use_adapters=False)
    noop = bool(np.array_equal(on, off))

    before = denoising_loss(model, images, e_hat, cond, ts, eps)
    sums = {b: model.checksum(b) for b in ("theta", "phi")}
    e_sum = checksum(code.embedding)
    tune_adapters(model, code, sampler, schedule, OptimizerState("adam", lr=cfg.adapter_lr),
                  cfg.adapter_steps, SeededRng(6))
    after = denoising_loss(model, images, e_hat, cond, ts, eps)
    frozen = all(model.checksum(b) == s for b, s in sums.items()) and checksum(code.embedding) == e_sum
    passed = noop and after < before and frozen
    rows = [["zero_init_noop", noop], ["loss_before", before], ["loss_after", after],
            ["theta_phi_embedding_unchanged", frozen]]
    return SuiteResult("adapter", passed, f"no-op {noop}, loss {before:.5f} -> {after:.5f}, "
                       f"frozen blocks unchanged {frozen}", ["quantity", "value"], rows)


# 7 --------------------------------------------------------------------------

def suite_symmetry(seeds=None, iterations=None) -> SuiteResult:
    cfg = Config()
    params = estimator_from(cfg)
    el = math.radians(cfg.eval_elevation_deg)
    sym = consistency_variance(symmetric_field(cfg.resolution, folds=2), cfg.eval_frames, el, params)
    gt = consistency_variance(ground_truth_field(ShapeSpec("asymmetric-cone"), cfg.resolution),
                              cfg.eval_frames, el, params)
    passed = gt.variance < 1e-6 and sym.variance >= 10.0 * gt.variance
    rows = [["two_fold_symmetric", sym.variance], ["asymmetric_ground_truth", gt.variance]]
    return SuiteResult("symmetry", passed, f"symmetric {sym.variance:.3e} vs ground truth "
                       f"{gt.variance:.3e} (>= 10x, gt < 1e-6)", ["field", "variance"], rows)


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "gradient": suite_gradient,
    "sds": suite_sds,
    "janus": suite_janus,
    "injector": suite_injector,
    "semantic": suite_semantic,
    "adapter": suite_adapter,
    "symmetry": suite_symmetry,
}


def run_suites(names, out_dir, seeds: Optional[int] = None,
               iterations: Optional[int] = None) -> List[SuiteResult]:
    out = ensure_dir(out_dir)
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name](seeds=seeds, iterations=iterations)
        res.seconds = time.perf_counter() - t0
        res.write_csv(out)
        results.append(res)
    return results
