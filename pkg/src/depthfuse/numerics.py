"""Small dense-array helpers shared by every other module.

Arrays are plain ``numpy.ndarray`` objects in float64. The helpers here add
seeded Gaussian sampling, two first-order optimizers and a central-difference
gradient oracle used throughout the test-suite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Sequence

import numpy as np

Grid = np.ndarray

MAX_AXES = 4


class ShapeError(ValueError):
    """Raised for empty, oversized or mismatched array shapes."""


def _check_shape(shape) -> tuple:
    if np.ndim(shape) == 0:
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or len(shape) > MAX_AXES:
        raise ShapeError(f"shape must have 1..{MAX_AXES} axes, got {shape}")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape has a zero or negative extent: {shape}")
    return shape


class SeededRng:
    """Counter-based random stream (Philox) with Box-Muller normals.

    Child streams derived with :meth:`spawn` are independent of each other and
    of the parent, so per-view or per-worker draws can be split without
    changing the parent's sequence.
    """

    def __init__(self, seed: int, _key: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = tuple(_key)
        seq = np.random.SeedSequence([self.seed, *self._key])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self._key + tuple(int(k) for k in key))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Grid:
        return low + (high - low) * self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, shape) -> Grid:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1], keeps log finite
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n].reshape(shape)


def gaussian_noise(rng: SeededRng, shape) -> Grid:
    """I.i.d. standard normal draws of the given shape."""
    return rng.normal(shape)


@dataclass
class OptimizerState:
    """Per-parameter optimizer bookkeeping for ``sgd`` or ``adam``."""

    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[str, Grid] = field(default_factory=dict)
    v: Dict[str, Grid] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Grid, grads: Grid, name: str = "param") -> Grid:
    """Return updated ``params`` after one step; ``state`` is advanced in place."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError(f"{name}: params {params.shape} vs grads {grads.shape}")
    if state.kind == "sgd":
        state.step_count += 1
        return params - state.lr * grads

    m = state.m.get(name)
    if m is None:
        m = np.zeros_like(params)
        state.v[name] = np.zeros_like(params)
    elif m.shape != params.shape:
        raise ShapeError(f"{name}: moment buffer {m.shape} vs params {params.shape}")
    v = state.v[name]
    t = state.step_count + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    state.m[name] = m
    state.v[name] = v
    state.step_count = t
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def step_all(state: OptimizerState, params: Mapping[str, Grid], grads: Mapping[str, Grid]) -> Dict[str, Grid]:
    """One optimizer step over a dict of named parameter blocks.

    The step counter advances once for the whole dict, not once per block.
    """
    out = {}
    count = state.step_count
    for name in params:
        state.step_count = count
        out[name] = optimizer_step(state, params[name], grads[name], name=name)
    state.step_count = count + 1
    return out


def finite_difference_gradient(f: Callable[[Grid], float], x: Grid, h: float = 1e-5) -> Grid:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = tuple(int(k) for k in np.unravel_index(i, x.shape))
            raise FloatingPointError(f"non-finite function value at coordinate {idx}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def checksum(*arrays: Grid) -> str:
    """SHA-256 over the raw little-endian bytes of the given arrays."""
    hasher = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        hasher.update(str(a.shape).encode())
        hasher.update(a.tobytes())
    return hasher.hexdigest()


def relative_error(a: Grid, b: Grid, floor: float = 1e-12) -> float:
    """max |a-b| / max(|b|) over all entries."""
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def cosine(a: Grid, b: Grid) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def softplus(x: Grid) -> Grid:
    return np.logaddexp(0.0, x)


def sigmoid(x: Grid) -> Grid:
    return 0.5 * (1.0 + np.tanh(0.5 * x))
