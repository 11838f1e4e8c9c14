"""Noise predictors: an analytic Gaussian score and a small MLP denoiser.

The MLP carries two optional side networks:

* a depth injector (``phi``) that reads the noisy input together with the
  condition channel and emits residual features added to each hidden
  pre-activation, scaled by ``lambda_inject``;
  its output projections start at zero, so a fresh injector changes nothing;
* low-rank adapters (``psi``), one ``B @ A`` pair per base linear layer,
  scaled by ``lambda_lora``; ``B`` starts at zero.

Parameters live in three dicts (``theta``, ``phi``, ``psi``) so training code
can update one block and leave the others byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..geometry import SparseDepthMap
from ..numerics import SeededRng, checksum, sigmoid
from .schedule import NoiseSchedule

BLOCKS = ("theta", "phi", "psi", "embedding")


@dataclass
class ConditionChannel:
    """Normalized depth in [0, 1] and a {0, 1} validity mask, both (H, W)."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.depth.shape != self.mask.shape:
            raise ValueError("depth and mask shapes differ")

    @classmethod
    def from_depth(cls, depth_map: SparseDepthMap) -> "ConditionChannel":
        return cls(depth_map.normalized(), depth_map.valid.astype(np.float64))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    def flat(self) -> np.ndarray:
        return np.concatenate([self.depth.ravel(), self.mask.ravel()])


def check_embedding(e: np.ndarray, limit: float = 1e3) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(e)) or np.linalg.norm(e) > limit:
        raise FloatingPointError(f"embedding diverged (norm {np.linalg.norm(e):.3g} > {limit})")
    return e


class AnalyticScore:
    """Exact noise predictor for a Gaussian data model centred on ``target.mean``.

    ``target`` supplies ``mean(e, cond)`` (an image) and
    ``mean_vjp(e, cond, g)`` (gradient of ``<g, mean>`` with respect to ``e``).
    With ``lambda_inject == 0`` the condition is ignored.
    """

    kind = "analytic-gaussian"

    def __init__(self, schedule: NoiseSchedule, target, lambda_inject: float = 1.0):
        self.schedule = schedule
        self.target = target
        self.lambda_inject = lambda_inject

    @property
    def image_shape(self):
        return self.target.image_shape

    def _cond(self, cond):
        return cond if self.lambda_inject != 0 else None

    def mean(self, e, cond=None) -> np.ndarray:
        return self.target.mean(e, self._cond(cond))

    def predict_noise(self, x_t, t: int, e, cond: Optional[ConditionChannel] = None) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != tuple(self.image_shape):
            raise ValueError(f"input shape {x_t.shape} != model shape {self.image_shape}")
        if cond is not None and cond.shape != tuple(self.image_shape[:2]):
            raise ValueError(f"condition resolution {cond.shape} != {self.image_shape[:2]}")
        a = self.schedule.alpha_bar(t)
        return (x_t - np.sqrt(a) * self.mean(e, cond)) / np.sqrt(1.0 - a)

    def score(self, x_t, t: int, e, cond=None) -> np.ndarray:
        """grad log q(x_t) for q = N(sqrt(a) mu, (1 - a) I)."""
        a = self.schedule.alpha_bar(t)
        return -(np.asarray(x_t) - np.sqrt(a) * self.mean(e, cond)) / (1.0 - a)

    def embedding_grad(self, x_t, t: int, e, cond, out_grad) -> np.ndarray:
        """d <out_grad, predict_noise> / d e."""
        a = self.schedule.alpha_bar(t)
        return -np.sqrt(a) / np.sqrt(1.0 - a) * self.target.mean_vjp(e, self._cond(cond), out_grad)


class LinearDecoder:
    """mean(e) = D @ e + b reshaped to an image; ignores the condition."""

    def __init__(self, matrix: np.ndarray, offset: np.ndarray, image_shape):
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.offset = np.asarray(offset, dtype=np.float64).reshape(-1)
        self.image_shape = tuple(image_shape)

    def mean(self, e, cond=None):
        return (self.matrix @ np.asarray(e) + self.offset).reshape(self.image_shape)

    def mean_vjp(self, e, cond, g):
        return self.matrix.T @ np.asarray(g).reshape(-1)

    def optimum(self, image) -> np.ndarray:
        return np.linalg.lstsq(self.matrix, np.asarray(image).reshape(-1) - self.offset, rcond=None)[0]


def time_embedding(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t / T, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = 2.0 ** np.arange(dim // 2) * np.pi
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(a):
    s = sigmoid(a)
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


@dataclass
class ForwardCache:
    inputs: list          # per base layer input
    pre: list             # per hidden layer pre-activation
    sig: list             # sigmoid of pre for silu backward
    lora_mid: list        # per base layer A @ input (None when adapters are off)
    inj_in: Optional[np.ndarray]
    inj_pre: list
    inj_sig: list
    inj_hidden: list
    lambda_inject: float
    lambda_lora: float
    d_image: int
    d_time: int
    out_scale: np.ndarray  # (B, 1) preconditioning factor on the network output


class MLPDenoiser:
    """Fully-connected epsilon predictor on flattened images.

    Input of the first layer is ``[x_t, time features, embedding]``.
    ``widths`` is ``[P, h1, ..., hk, P]`` with ``P`` the flattened image size.

    The network is preconditioned: it predicts a residual on top of the
    linear minimum-variance noise estimate under a Gaussian image prior,
    with input and output rescaled to roughly unit variance at every
    timestep. The prior (mean, a rank-``basis_rank`` principal basis with its
    spectrum, and an isotropic floor) lives in ``theta`` alongside the
    weights; before :meth:`fit_prior` it is the flat prior with per-pixel
    mean ``data_mean`` and spread ``data_std``.
    """

    PRIOR_KEYS = ("mean", "basis", "spectrum", "floor")

    kind = "mlp-denoiser"

    def __init__(self, image_shape, schedule: NoiseSchedule, hidden: Sequence[int] = (128, 128),
                 embed_dim: int = 16, time_dim: int = 16, rank: int = 4,
                 lambda_inject: float = 1.0, lambda_lora: float = 0.3, seed: int = 0,
                 data_mean: float = 0.5, data_std: float = 0.35, basis_rank: int = 192):
        self.data_mean = float(data_mean)
        self.data_std = float(data_std)
        self.basis_rank = int(basis_rank)
        self.image_shape = tuple(image_shape)
        self.schedule = schedule
        self.embed_dim = embed_dim
        self.time_dim = time_dim
        self.rank = rank
        self.lambda_inject = lambda_inject
        self.lambda_lora = lambda_lora
        p = int(np.prod(self.image_shape))
        self.widths = [p, *hidden, p]
        self.cond_dim = 2 * self.image_shape[0] * self.image_shape[1]
        rng = SeededRng(seed)
        self.theta = self._init_base(rng.spawn(1))
        self.phi = self._init_injector(rng.spawn(2))
        self.psi = self._init_adapters(rng.spawn(3))

    # parameter layout -------------------------------------------------
    @property
    def layer_dims(self):
        """(fan_in, fan_out) of each base linear layer."""
        dims = []
        fan_in = self.widths[0] + self.time_dim + self.embed_dim
        for out in self.widths[1:]:
            dims.append((fan_in, out))
            fan_in = out
        return dims

    @property
    def hidden(self):
        return self.widths[1:-1]

    def _init_base(self, rng):
        theta = {}
        for i, (fi, fo) in enumerate(self.layer_dims):
            theta[f"W{i}"] = rng.spawn(i).normal((fo, fi)) / np.sqrt(fi)
            theta[f"b{i}"] = np.zeros(fo)
        p = self.widths[0]
        theta["mean"] = np.full(p, self.data_mean)
        theta["basis"] = np.zeros((p, self.basis_rank))
        theta["spectrum"] = np.zeros(self.basis_rank)
        theta["floor"] = np.array([self.data_std ** 2])
        return theta

    def fit_prior(self, images: np.ndarray, floor_min: float = 1e-4) -> None:
        """Closed-form fit of the Gaussian prior in ``theta`` to flattened images."""
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        mean = x.mean(axis=0)
        _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
        k = min(self.basis_rank, vt.shape[0])
        var = sv ** 2 / len(x)
        basis = np.zeros((x.shape[1], self.basis_rank))
        spectrum = np.zeros(self.basis_rank)
        basis[:, :k] = vt[:k].T
        spectrum[:k] = var[:k]
        rest = max(x.shape[1] - k, 1)
        floor = max(float(var[k:].sum()) / rest, floor_min)
        self.theta = dict(self.theta, mean=mean, basis=basis, spectrum=spectrum,
                          floor=np.array([floor]))

    def _init_injector(self, rng):
        phi = {}
        fan_in = self.widths[0] + self.cond_dim + self.time_dim
        for i, h in enumerate(self.hidden):
            phi[f"U{i}"] = rng.spawn(i).normal((h, fan_in)) / np.sqrt(fan_in)
            phi[f"c{i}"] = np.zeros(h)
            phi[f"Z{i}"] = np.zeros((h, h))  # zero projection: no effect until trained
            phi[f"z{i}"] = np.zeros(h)
            fan_in = h
        return phi

    def _init_adapters(self, rng):
        psi = {}
        for i, (fi, fo) in enumerate(self.layer_dims):
            psi[f"A{i}"] = rng.spawn(i).normal((self.rank, fi)) / np.sqrt(fi)
            psi[f"B{i}"] = np.zeros((fo, self.rank))
        return psi

    def block(self, name: str) -> Dict[str, np.ndarray]:
        return {"theta": self.theta, "phi": self.phi, "psi": self.psi}[name]

    def set_block(self, name: str, params: Dict[str, np.ndarray]):
        setattr(self, name, {k: np.asarray(v, dtype=np.float64) for k, v in params.items()})

    def checksum(self, name: str) -> str:
        blk = self.block(name)
        return checksum(*(blk[k] for k in sorted(blk)))

    # forward / backward -----------------------------------------------
    def _as_batch(self, x_t, t, e, cond):
        x = np.asarray(x_t, dtype=np.float64)
        single = x.shape == self.image_shape
        x = x.reshape(-1, self.widths[0])
        b = x.shape[0]
        if x.shape[1] != self.widths[0] or (not single and x.size != b * self.widths[0]):
            raise ValueError(f"input shape {np.shape(x_t)} does not match {self.image_shape}")
        t = np.broadcast_to(np.asarray(t), (b,))
        e = np.broadcast_to(np.asarray(e, dtype=np.float64).reshape(-1, self.embed_dim), (b, self.embed_dim))
        c = None
        if cond is not None:
            conds = cond if isinstance(cond, (list, tuple)) else [cond]
            for cc in conds:
                if cc.shape != tuple(self.image_shape[:2]):
                    raise ValueError(f"condition resolution {cc.shape} != {self.image_shape[:2]}")
            c = np.stack([cc.flat() for cc in conds])
            c = np.broadcast_to(c, (b, self.cond_dim))
        return single, x, t, e, c

    def _precondition(self, x, t):
        """Returns (network input, linear noise estimate, output scale), per batch row."""
        th = self.theta
        a = self.schedule.alphas_bar[np.asarray(t, dtype=np.int64) - 1][:, None]
        floor = float(th["floor"][0])
        centred = x - np.sqrt(a) * th["mean"]
        proj = centred @ th["basis"]
        inside = proj @ th["basis"].T
        lin = np.sqrt(1.0 - a) * ((proj / (a * th["spectrum"] + 1.0 - a)) @ th["basis"].T
                                  + (centred - inside) / (a * floor + 1.0 - a))
        denom = a * floor + (1.0 - a)
        # output scale: rms noise error of the linear estimate over all pixels
        spec = th["spectrum"][None, :]
        err = (a * spec / (a * spec + 1.0 - a)).sum(axis=1, keepdims=True)
        err = err + (x.shape[1] - np.count_nonzero(th["spectrum"])) * a * floor / denom
        return centred / np.sqrt(denom), lin, np.sqrt(err / x.shape[1])

    def forward(self, x_t, t, e, cond=None, use_adapters: bool = True):
        """Returns (prediction, cache). Accepts a single image or a batch."""
        single, x, t, e, c = self._as_batch(x_t, t, e, cond)
        temb = time_embedding(t, self.schedule.T, self.time_dim)
        x, lin, c_out = self._precondition(x, t)
        lam_i = self.lambda_inject if c is not None else 0.0
        lam_l = self.lambda_lora if use_adapters else 0.0

        inj_in, inj_pre, inj_sig, inj_hidden, residual = None, [], [], [], []
        if lam_i != 0.0:
            u = inj_in = np.concatenate([x, c, temb], axis=1)
            for i in range(len(self.hidden)):
                a = u @ self.phi[f"U{i}"].T + self.phi[f"c{i}"]
                u, s = _silu(a)
                inj_pre.append(a)
                inj_sig.append(s)
                inj_hidden.append(u)
                residual.append(u @ self.phi[f"Z{i}"].T + self.phi[f"z{i}"])

        h = np.concatenate([x, temb, e], axis=1)
        inputs, pre, sig, lora_mid = [], [], [], []
        n_layers = len(self.layer_dims)
        for i in range(n_layers):
            inputs.append(h)
            a = h @ self.theta[f"W{i}"].T + self.theta[f"b{i}"]
            if lam_l != 0.0:
                mid = h @ self.psi[f"A{i}"].T
                lora_mid.append(mid)
                a = a + lam_l * (mid @ self.psi[f"B{i}"].T)
            else:
                lora_mid.append(None)
            if i < n_layers - 1:
                if lam_i != 0.0:
                    a = a + lam_i * residual[i]
                h, s = _silu(a)
                pre.append(a)
                sig.append(s)
            else:
                h = lin + c_out * a
        cache = ForwardCache(inputs, pre, sig, lora_mid, inj_in, inj_pre, inj_sig, inj_hidden,
                             lam_i, lam_l, self.widths[0], self.time_dim, c_out)
        out = h.reshape(self.image_shape) if single else h.reshape((-1, *self.image_shape))
        return out, cache

    def predict_noise(self, x_t, t, e, cond=None) -> np.ndarray:
        return self.forward(x_t, t, e, cond)[0]


def mlp_backward(model: MLPDenoiser, cache: Optional[ForwardCache], output_grad,
                 blocks: Sequence[str] = ("theta",)) -> Dict[str, Dict[str, np.ndarray]]:
    """Gradients of ``<output_grad, prediction>`` for the selected parameter blocks only.

    Unselected blocks are absent from the result. ``"embedding"`` yields the
    gradient with respect to the embedding input, summed over the batch.
    """
    if cache is None:
        raise RuntimeError("mlp_backward needs the cache of a preceding forward pass")
    for b in blocks:
        if b not in BLOCKS:
            raise ValueError(f"unknown parameter block {b!r}")
    want = set(blocks)
    g = np.asarray(output_grad, dtype=np.float64).reshape(-1, model.widths[-1]) * cache.out_scale
    n_layers = len(model.layer_dims)
    grads = {b: {} for b in blocks}
    d_residual = [None] * len(model.hidden)
    lam_l, lam_i = cache.lambda_lora, cache.lambda_inject

    for i in reversed(range(n_layers)):
        h_in = cache.inputs[i]
        if "theta" in want:
            grads["theta"][f"W{i}"] = g.T @ h_in
            grads["theta"][f"b{i}"] = g.sum(axis=0)
        if lam_l != 0.0 and "psi" in want:
            grads["psi"][f"B{i}"] = lam_l * (g.T @ cache.lora_mid[i])
            grads["psi"][f"A{i}"] = lam_l * ((g @ model.psi[f"B{i}"]).T @ h_in)
        if i < n_layers - 1 and lam_i != 0.0:
            d_residual[i] = lam_i * g
        if i == 0 and "embedding" not in want:
            break
        gh = g @ model.theta[f"W{i}"]
        if lam_l != 0.0:
            gh = gh + lam_l * ((g @ model.psi[f"B{i}"]) @ model.psi[f"A{i}"])
        if i == 0:
            start = cache.d_image + cache.d_time
            grads["embedding"]["e"] = gh[:, start:].sum(axis=0)
            break
        g = gh * _silu_grad(cache.pre[i - 1], cache.sig[i - 1])

    if "theta" in want:
        for name in MLPDenoiser.PRIOR_KEYS:
            grads["theta"][name] = np.zeros_like(model.theta[name])
    if "psi" in want and lam_l == 0.0:
        grads["psi"] = {name: np.zeros_like(val) for name, val in model.psi.items()}
    if "phi" in want:
        if lam_i == 0.0:
            for name, val in model.phi.items():
                grads["phi"][name] = np.zeros_like(val)
        else:
            gu = None
            for i in reversed(range(len(model.hidden))):
                dr = d_residual[i]
                u = cache.inj_hidden[i]
                grads["phi"][f"Z{i}"] = dr.T @ u
                grads["phi"][f"z{i}"] = dr.sum(axis=0)
                gu_i = dr @ model.phi[f"Z{i}"]
                gu = gu_i if gu is None else gu + gu_i
                ga = gu * _silu_grad(cache.inj_pre[i], cache.inj_sig[i])
                u_in = cache.inj_hidden[i - 1] if i > 0 else cache.inj_in
                grads["phi"][f"U{i}"] = ga.T @ u_in
                grads["phi"][f"c{i}"] = ga.sum(axis=0)
                gu = ga @ model.phi[f"U{i}"] if i > 0 else None
    return grads


def predict_noise(model, x_t, t: int, e, cond: Optional[ConditionChannel] = None) -> np.ndarray:
    return model.predict_noise(x_t, t, e, cond)
