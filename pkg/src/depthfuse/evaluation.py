"""Turntable consistency metric and image fidelity measures.

Pose estimation is nearest-template matching against renders of the same
field. Templates whose RMS distance is within ``tie_tolerance`` of the best
match are treated as indistinguishable. Tied templates are grouped into
contiguous arcs of the bank; each arc is represented by its own best entry
and the arc with the smallest azimuth wins. A field with a repeated
appearance therefore folds its estimates onto one period, which shows up as
jumps in the adjacent differences.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .renderer import RenderedImage, VoxelRadianceField, render_turntable

PSNR_CAP = 99.0
GREY_LEVEL = 1.0 / 255.0
TAU = 2.0 * math.pi


@dataclass
class EstimatorParams:
    tie_tolerance: float = GREY_LEVEL
    bank_factor: int = 2
    bank_offset: float = 0.25  # in bank spacings, keeps frames off the template grid
    radius: float = 3.2
    image_size: int = 48
    steps_per_ray: int = 48

    def __post_init__(self):
        if self.tie_tolerance < 0:
            raise ValueError("tie_tolerance must be >= 0")
        if self.bank_factor < 1:
            raise ValueError("bank_factor must be >= 1")


@dataclass
class ConsistencyReport:
    azimuths: List[float]       # turns in [0, 1)
    differences: List[float]    # minimal signed adjacent differences, turns
    variance: float             # population variance of differences, squared turns
    frame_count: int
    estimator: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.differences) != self.frame_count or len(self.azimuths) != self.frame_count:
            raise ValueError("report needs one azimuth and one cyclic difference per frame")
        if self.variance < 0:
            raise ValueError("variance must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "est_azimuth", "adj_diff"])
        for i, (a, d) in enumerate(zip(self.azimuths, self.differences)):
            w.writerow([i, repr(float(a)), repr(float(d))])
        return buf.getvalue()


def _rgb(img) -> np.ndarray:
    return np.asarray(img.rgb if isinstance(img, RenderedImage) else img, dtype=np.float64)


def _circular_runs(mask: np.ndarray) -> List[np.ndarray]:
    n = len(mask)
    if mask.all():
        return [np.arange(n)]
    starts = np.flatnonzero(mask & ~np.roll(mask, 1))
    runs = []
    for s in starts:
        length = 0
        while mask[(s + length) % n]:
            length += 1
        runs.append((s + np.arange(length)) % n)
    return runs


def estimate_azimuths(frames: Sequence, template_bank: Sequence[Tuple[float, object]],
                      tie_tolerance: float = GREY_LEVEL) -> List[float]:
    """Azimuth (radians, in [0, 2pi)) of each frame's best template."""
    if not template_bank:
        raise ValueError("empty template bank")
    az = np.array([a for a, _ in template_bank], dtype=np.float64) % TAU
    order = np.argsort(az, kind="stable")
    az = az[order]
    bank = np.stack([_rgb(template_bank[i][1]) for i in order])
    if len(frames) > 1:
        gaps = np.diff(np.concatenate([az, [az[0] + TAU]]))
        if gaps.max() > TAU / len(frames) + 1e-9:
            raise ValueError("template bank is coarser than the frame spacing")
    flat = bank.reshape(len(bank), -1)
    out = []
    for frame in frames:
        x = _rgb(frame)
        if x.shape != bank.shape[1:]:
            raise ValueError(f"frame shape {x.shape} != template shape {bank.shape[1:]}")
        rms = np.sqrt(np.mean((flat - x.reshape(-1)) ** 2, axis=1))
        tied = rms <= rms.min() + tie_tolerance
        best = None
        for run in _circular_runs(tied):
            k = run[np.argmin(rms[run])]
            if best is None or az[k] < az[best]:
                best = k
        out.append(float(az[best]))
    return out


def circular_differences(turns: Sequence[float]) -> np.ndarray:
    """Minimal signed difference from each estimate to the next, cyclically."""
    a = np.asarray(turns, dtype=np.float64)
    d = np.roll(a, -1) - a
    return _wrap_unit(d + 0.5) - 0.5


def _wrap_unit(x: np.ndarray) -> np.ndarray:
    # a tiny negative input rounds to exactly 1.0 under the modulo
    w = np.mod(x, 1.0)
    return np.where(w >= 1.0, 0.0, w)


def report_from_azimuths(azimuths_rad: Sequence[float], estimator: dict | None = None) -> ConsistencyReport:
    turns = _wrap_unit(np.asarray(azimuths_rad, dtype=np.float64) / TAU)
    diffs = circular_differences(turns)
    return ConsistencyReport(
        azimuths=[float(t) for t in turns],
        differences=[float(d) for d in diffs],
        variance=float(np.var(diffs)),
        frame_count=len(turns),
        estimator=dict(estimator or {}),
    )


def consistency_variance(fld: VoxelRadianceField, count: int = 100,
                         elevation: float = math.radians(30.0),
                         params: EstimatorParams | None = None) -> ConsistencyReport:
    """Render a turntable, match it against a denser self-template bank, report spread."""
    p = params or EstimatorParams()
    s = p.image_size
    frames = render_turntable(fld, count, elevation, p.radius, p.steps_per_ray, s, s)
    n_bank = p.bank_factor * count
    start = TAU * p.bank_offset / n_bank
    bank_imgs = render_turntable(fld, n_bank, elevation, p.radius, p.steps_per_ray, s, s, start=start)
    bank = [(start + TAU * j / n_bank, img) for j, img in enumerate(bank_imgs)]
    est = estimate_azimuths(frames, bank, p.tie_tolerance)
    meta = asdict(p)
    meta.update(count=count, elevation=elevation, difference="minimal signed, turns",
                variance="population")
    return report_from_azimuths(est, meta)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over rgb; identical images give the 99 dB cap."""
    x, y = _rgb(a), _rgb(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def foreground_color(img: RenderedImage, background: float = 1.0) -> np.ndarray:
    """Opacity-weighted mean colour of the object, background removed."""
    alpha = img.opacity[..., None]
    premult = img.rgb - (1.0 - alpha) * background
    total = float(alpha.sum())
    if total <= 1e-12:
        return np.zeros(3)
    return premult.reshape(-1, 3).sum(axis=0) / total


def color_variance(frames: Sequence[RenderedImage]) -> float:
    """Cross-frame variance of the foreground mean colour, summed over channels."""
    colors = np.stack([foreground_color(f) for f in frames])
    return float(colors.var(axis=0).sum())
