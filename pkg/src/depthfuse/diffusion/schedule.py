"""Linear-beta DDPM schedule and forward noising."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHTINGS = ("variance", "constant")


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray       # (T,), entry t-1 holds beta_t
    alphas_bar: np.ndarray  # (T,)
    weights: np.ndarray     # (T,) SDS weight w~(t)
    weighting: str = "variance"

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def _check(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return float(self.alphas_bar[t - 1])

    def weight(self, t: int) -> float:
        self._check(t)
        return float(self.weights[t - 1])

    def snr(self) -> np.ndarray:
        return self.alphas_bar / (1.0 - self.alphas_bar)


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2,
                   weighting: str = "variance") -> NoiseSchedule:
    """``weighting='variance'`` gives w~(t) = 1 - alpha_bar_t; ``'constant'`` gives 1."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"unknown weighting {weighting!r}")
    betas = np.linspace(beta_min, beta_max, T)
    alphas_bar = np.cumprod(1.0 - betas)
    weights = 1.0 - alphas_bar if weighting == "variance" else np.ones(T)
    return NoiseSchedule(betas, alphas_bar, weights, weighting)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    a = schedule.alpha_bar(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
