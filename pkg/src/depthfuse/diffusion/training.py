"""Training loops: base pretraining, injector training, embedding inversion, adapter tuning.

Every loop minimizes the same per-element mean squared noise-prediction
error over one parameter block while all other blocks stay frozen.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..numerics import OptimizerState, SeededRng, step_all
from .models import AnalyticScore, ConditionChannel, MLPDenoiser, check_embedding, mlp_backward
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class UnsupportedModelError(TypeError):
    pass


class EmbeddingDivergence(FloatingPointError):
    def __init__(self, message: str, trace: List[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class SemanticCode:
    reference_image: np.ndarray  # x-hat, (H, W, 3)
    embedding: np.ndarray        # e-hat, (d_e,)


@dataclass
class Example:
    image: np.ndarray
    embedding: np.ndarray
    condition: Optional[ConditionChannel] = None
    kind: str = "sparse"


def sample_timesteps(rng: SeededRng, schedule: NoiseSchedule, n: int,
                     t_range: Tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    lo = max(1, int(np.ceil(t_range[0] * schedule.T)))
    hi = max(lo, int(np.floor(t_range[1] * schedule.T)))
    return rng.integers(lo, hi + 1, size=n)


def _noised(images: np.ndarray, ts: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule):
    a = schedule.alphas_bar[ts - 1].reshape((-1,) + (1,) * (images.ndim - 1))
    return np.sqrt(a) * images + np.sqrt(1.0 - a) * eps


def _require_mlp(model, what: str):
    if not isinstance(model, MLPDenoiser):
        raise UnsupportedModelError(f"{what} needs an mlp-denoiser, got {getattr(model, 'kind', model)!r}")


def denoising_loss(model: MLPDenoiser, images, embeddings, conds, ts, eps,
                   use_adapters: bool = True) -> float:
    """Mean squared noise-prediction error on a fixed batch."""
    x_t = _noised(np.asarray(images), np.asarray(ts), np.asarray(eps), model.schedule)
    pred, _ = model.forward(x_t, ts, embeddings, conds, use_adapters=use_adapters)
    return float(np.mean((pred - eps) ** 2))


def _batch(rng: SeededRng, n_items: int, size: int) -> np.ndarray:
    return rng.integers(0, n_items, size=size)


def pretrain_base(model: MLPDenoiser, images: np.ndarray, embeddings: np.ndarray,
                  schedule: NoiseSchedule, opt: OptimizerState, steps: int, rng: SeededRng,
                  batch: int = 32) -> List[float]:
    """Fit the unconditioned base weights theta (stand-in for a pretrained prior)."""
    _require_mlp(model, "pretrain_base")
    model.fit_prior(images)
    trace = []
    for step in range(steps):
        r = rng.spawn(step)
        idx = _batch(r, len(images), batch)
        ts = sample_timesteps(r, schedule, len(idx))
        eps = r.normal((len(idx), *model.image_shape))
        x_t = _noised(images[idx], ts, eps, schedule)
        pred, cache = model.forward(x_t, ts, embeddings[idx], None, use_adapters=False)
        resid = pred - eps
        trace.append(float(np.mean(resid ** 2)))
        g = mlp_backward(model, cache, 2.0 * resid / resid.size, ("theta",))["theta"]
        model.set_block("theta", step_all(opt, model.theta, g))
    return trace


def train_injector(model: MLPDenoiser, dataset: Sequence[Example], schedule: NoiseSchedule,
                   opt: OptimizerState, steps: int, rng: SeededRng, batch: int = 32) -> List[float]:
    """Fit the depth injector phi with the base frozen; returns the loss trace."""
    _require_mlp(model, "train_injector")
    if not dataset:
        raise ValueError("injector training needs a non-empty dataset")
    images = np.stack([ex.image for ex in dataset])
    embeds = np.stack([ex.embedding for ex in dataset])
    trace = []
    for step in range(steps):
        r = rng.spawn(step)
        idx = _batch(r, len(dataset), batch)
        ts = sample_timesteps(r, schedule, len(idx))
        eps = r.normal((len(idx), *model.image_shape))
        x_t = _noised(images[idx], ts, eps, schedule)
        conds = [dataset[i].condition for i in idx]
        pred, cache = model.forward(x_t, ts, embeds[idx], conds, use_adapters=False)
        resid = pred - eps
        trace.append(float(np.mean(resid ** 2)))
        g = mlp_backward(model, cache, 2.0 * resid / resid.size, ("phi",))["phi"]
        model.set_block("phi", step_all(opt, model.phi, g))
    return trace


def optimize_embedding(model, x_hat: np.ndarray, e_init: np.ndarray, schedule: NoiseSchedule,
                       opt: OptimizerState, steps: int, rng: SeededRng, batch: int = 4,
                       t_range: Tuple[float, float] = (0.0, 1.0),
                       limit: float = 1e3) -> Tuple[np.ndarray, List[float]]:
    """Invert a reference image into an embedding with the score model frozen."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.shape != tuple(model.image_shape):
        raise ValueError(f"reference image {x_hat.shape} != model input {model.image_shape}")
    e = check_embedding(e_init).copy()
    trace: List[float] = []
    for step in range(steps):
        r = rng.spawn(step)
        ts = sample_timesteps(r, schedule, batch, t_range)
        eps = r.normal((batch, *x_hat.shape))
        x_t = _noised(np.broadcast_to(x_hat, eps.shape), ts, eps, schedule)
        if isinstance(model, AnalyticScore):
            grad = np.zeros_like(e)
            loss = 0.0
            for b in range(batch):
                resid = model.predict_noise(x_t[b], int(ts[b]), e) - eps[b]
                loss += float(np.mean(resid ** 2)) / batch
                grad += model.embedding_grad(x_t[b], int(ts[b]), e, None, 2.0 * resid / (resid.size * batch))
        else:
            pred, cache = model.forward(x_t, ts, e, None)
            resid = pred - eps
            loss = float(np.mean(resid ** 2))
            grad = mlp_backward(model, cache, 2.0 * resid / resid.size, ("embedding",))["embedding"]["e"]
        trace.append(loss)
        e = step_all(opt, {"e": e}, {"e": grad})["e"]
        try:
            check_embedding(e, limit)
        except FloatingPointError as exc:
            raise EmbeddingDivergence(f"{exc} at step {step}", trace) from None
    return e, trace


def tune_adapters(model: MLPDenoiser, code: SemanticCode, cond_sampler: Callable,
                  schedule: NoiseSchedule, opt: OptimizerState, steps: int, rng: SeededRng,
                  pose=None, batch: int = 16) -> List[float]:
    """Fit the low-rank adapters psi on the semantic code with theta, phi and e-hat frozen."""
    _require_mlp(model, "tune_adapters")
    if model.lambda_lora == 0.0:
        raise ValueError("lambda_lora is 0: adapters receive no gradient")
    x_hat = np.asarray(code.reference_image, dtype=np.float64)
    e_hat = np.array(code.embedding, dtype=np.float64)
    trace = []
    for step in range(steps):
        r = rng.spawn(step)
        ts = sample_timesteps(r, schedule, batch)
        eps = r.normal((batch, *x_hat.shape))
        x_t = _noised(np.broadcast_to(x_hat, eps.shape), ts, eps, schedule)
        cond = cond_sampler(pose) if cond_sampler is not None else None
        pred, cache = model.forward(x_t, ts, e_hat, cond)
        resid = pred - eps
        trace.append(float(np.mean(resid ** 2)))
        g = mlp_backward(model, cache, 2.0 * resid / resid.size, ("psi",))["psi"]
        model.set_block("psi", step_all(opt, model.psi, g))
    return trace
