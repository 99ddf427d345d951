"""Mixture density network with isotropic Gaussian kernels, in plain numpy.

Architecture: four ReLU dense layers followed by three heads reading the last
hidden layer -- a linear head for the kernel centres, a softmax head for the
mixing weights and a modified-ELU head for the kernel widths.  Forward pass,
negative log-likelihood and its exact gradient are all hand written.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

SIGMA_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"SBMDNCK\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class MdnConfig:
    input_dim: int = 21
    hidden: tuple[int, ...] = (500, 500, 500, 500)
    n_kernels: int = 36
    target_dim: int = 9

    def __post_init__(self):
        if self.input_dim < 1 or self.n_kernels < 1 or self.target_dim < 1 or not self.hidden:
            raise ValueError("invalid MDN configuration")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def mu_dim(self) -> int:
        return self.n_kernels * self.target_dim

    @property
    def output_dim(self) -> int:
        return self.n_kernels * (self.target_dim + 2)

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        """(name, fan_in, fan_out) for every dense layer, Keras-style names."""
        names = ["dense"] + [f"dense_{i}" for i in range(1, len(self.hidden) + 3)]
        dims = (self.input_dim,) + self.hidden
        shapes = [(names[i], dims[i], dims[i + 1]) for i in range(len(self.hidden))]
        last = self.hidden[-1]
        k = len(self.hidden)
        shapes.append((names[k], last, self.mu_dim))           # centres, linear
        shapes.append((names[k + 1], last, self.n_kernels))    # weights, softmax
        shapes.append((names[k + 2], last, self.n_kernels))    # widths, modified ELU
        return shapes

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "n_kernels": self.n_kernels, "target_dim": self.target_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "MdnConfig":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["n_kernels"]), int(d["target_dim"]))


def param_count(cfg: MdnConfig) -> int:
    return sum((fan_in + 1) * fan_out for _, fan_in, fan_out in cfg.layer_shapes())


@dataclass
class NetworkParams:
    """All trainable weights in one flat vector plus a fixed input scaling.

    ``layer(name)`` returns (W, b) views into ``flat`` with W of shape
    (fan_in, fan_out).  ``input_shift``/``input_scale`` standardise the
    observations and are not trained.
    """

    cfg: MdnConfig
    flat: np.ndarray
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None
    _views: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.flat.shape != (param_count(self.cfg),):
            raise ValueError(f"expected {param_count(self.cfg)} parameters, got {self.flat.shape}")
        if self.input_shift is None:
            self.input_shift = np.zeros(self.cfg.input_dim)
        if self.input_scale is None:
            self.input_scale = np.ones(self.cfg.input_dim)
        self._views = {}
        off = 0
        for name, fan_in, fan_out in self.cfg.layer_shapes():
            w = self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.flat[off:off + fan_out]
            off += fan_out
            self._views[name] = (w, b)

    @classmethod
    def zeros(cls, cfg: MdnConfig, dtype=np.float64) -> "NetworkParams":
        return cls(cfg, np.zeros(param_count(cfg), dtype=dtype))

    def layer(self, name: str):
        return self._views[name]

    @property
    def layer_names(self) -> list[str]:
        return [s[0] for s in self.cfg.layer_shapes()]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.cfg, self.flat.copy(), self.input_shift.copy(), self.input_scale.copy())

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.cfg, self.flat.astype(dtype), self.input_shift.copy(),
                             self.input_scale.copy())

    def with_flat(self, flat: np.ndarray) -> "NetworkParams":
        return NetworkParams(self.cfg, flat, self.input_shift, self.input_scale)


def init_params(cfg: MdnConfig, rng: np.random.Generator, mu_bias=None,
                input_shift=None, input_scale=None, dtype=np.float64) -> NetworkParams:
    """He-normal weights for the ReLU stack, LeCun-normal for the heads, zero
    biases except the centre head, whose bias is set to ``mu_bias`` (an M-vector,
    typically the prior mean profile) for every kernel."""
    p = NetworkParams.zeros(cfg, dtype=np.float64)
    n_hidden = len(cfg.hidden)
    for i, (name, fan_in, fan_out) in enumerate(cfg.layer_shapes()):
        w, b = p.layer(name)
        gain = 2.0 if i < n_hidden else 1.0
        w[...] = rng.standard_normal((fan_in, fan_out)) * math.sqrt(gain / fan_in)
    if mu_bias is not None:
        _, b = p.layer(cfg.layer_shapes()[n_hidden][0])
        b[...] = np.tile(np.asarray(mu_bias, dtype=float), cfg.n_kernels)
    if input_shift is not None:
        p.input_shift = np.asarray(input_shift, dtype=float).copy()
    if input_scale is not None:
        p.input_scale = np.asarray(input_scale, dtype=float).copy()
    return p.astype(dtype)


@dataclass
class MixtureParams:
    """Isotropic Gaussian mixture: weights (..., L), widths (..., L), centres (..., L, M)."""

    alpha: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.ndim < 2 or self.alpha.shape != self.mu.shape[:-1] or self.sigma.shape != self.alpha.shape:
            raise ValueError("inconsistent mixture parameter shapes")

    @property
    def n_kernels(self) -> int:
        return self.alpha.shape[-1]

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def __getitem__(self, idx) -> "MixtureParams":
        return MixtureParams(self.alpha[idx], self.sigma[idx], self.mu[idx])

    def validate(self, atol: float = 1e-9) -> None:
        if np.any(self.alpha < 0) or not np.allclose(self.alpha.sum(-1), 1.0, atol=atol, rtol=0):
            raise ValueError("mixing weights must be non-negative and sum to one")
        if np.any(self.sigma <= 0):
            raise ValueError("kernel widths must be positive")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("kernel centres must be finite")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "sigma": self.sigma.tolist(), "mu": self.mu.tolist()}


def modified_elu(z):
    """ELU(z) + 1: z + 1 for z >= 0 and exp(z) below; positive everywhere."""
    z = np.asarray(z)
    return np.where(z >= 0, z + 1.0, np.exp(np.minimum(z, 0.0)))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _forward_cache(params: NetworkParams, d: np.ndarray):
    cfg = params.cfg
    dtype = params.flat.dtype
    x = ((d - params.input_shift) / params.input_scale).astype(dtype, copy=False)
    acts = [x]
    names = params.layer_names
    n_hidden = len(cfg.hidden)
    for name in names[:n_hidden]:
        w, b = params.layer(name)
        acts.append(np.maximum(acts[-1] @ w + b, 0))
    top = acts[-1]
    w_mu, b_mu = params.layer(names[n_hidden])
    w_a, b_a = params.layer(names[n_hidden + 1])
    w_s, b_s = params.layer(names[n_hidden + 2])
    mu = (top @ w_mu + b_mu).reshape(len(x), cfg.n_kernels, cfg.target_dim)
    z_alpha = top @ w_a + b_a
    z_sigma = top @ w_s + b_s
    sigma_raw = modified_elu(z_sigma)
    sigma = np.maximum(sigma_raw, SIGMA_FLOOR).astype(dtype, copy=False)
    return acts, mu, z_alpha, z_sigma, sigma


def _check_input(params: NetworkParams, d) -> tuple[np.ndarray, bool]:
    d = np.asarray(d, dtype=float)
    single = d.ndim == 1
    d2 = d[None, :] if single else d
    if d2.ndim != 2 or d2.shape[1] != params.cfg.input_dim:
        raise ValueError(f"expected observations of length {params.cfg.input_dim}, got shape {d.shape}")
    return d2, single


def forward(params: NetworkParams, d) -> MixtureParams:
    """Mixture parameters for one observation (N,) or a batch (B, N)."""
    d2, single = _check_input(params, d)
    _, mu, z_alpha, _, sigma = _forward_cache(params, d2)
    mp = MixtureParams(_softmax(z_alpha.astype(float)), sigma.astype(float), mu.astype(float))
    return mp[0] if single else mp


def concat_output(mp: MixtureParams) -> np.ndarray:
    """Flattened network output [centres, weights, widths] of length L(M+2)."""
    lead = mp.alpha.shape[:-1]
    return np.concatenate([mp.mu.reshape(lead + (-1,)), mp.alpha, mp.sigma], axis=-1)


def kernel_log_terms(log_alpha, sigma, mu, m):
    """log(alpha_l phi_l(m)) for every kernel."""
    m = np.asarray(m)
    dim = mu.shape[-1]
    r2 = np.sum((m[..., None, :] - mu) ** 2, axis=-1)
    return log_alpha - dim * np.log(sigma) - r2 / (2.0 * sigma**2) - 0.5 * dim * LOG_2PI


def nll_loss(mp: MixtureParams, m) -> np.ndarray:
    """-log sum_l alpha_l phi_l(m), per sample; zero-weight kernels drop out."""
    with np.errstate(divide="ignore"):
        log_alpha = np.log(mp.alpha)
    return -logsumexp(kernel_log_terms(log_alpha, mp.sigma, mp.mu, m), axis=-1)


def loss(params: NetworkParams, d, m) -> float:
    """Mean negative log-likelihood of targets ``m`` given observations ``d``."""
    d2, _ = _check_input(params, d)
    m2 = np.atleast_2d(np.asarray(m, dtype=float))
    _, mu, z_alpha, _, sigma = _forward_cache(params, d2)
    terms = kernel_log_terms(_log_softmax(z_alpha), sigma, mu, m2.astype(mu.dtype, copy=False))
    return float(np.mean(-logsumexp(terms, axis=-1)))


def backward(params: NetworkParams, d, m) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. ``params.flat``."""
    cfg = params.cfg
    d2, _ = _check_input(params, d)
    m2 = np.atleast_2d(np.asarray(m, dtype=float))
    if m2.shape != (len(d2), cfg.target_dim):
        raise ValueError(f"expected targets of shape {(len(d2), cfg.target_dim)}, got {m2.shape}")
    dtype = params.flat.dtype
    m2 = m2.astype(dtype, copy=False)
    batch = len(d2)
    acts, mu, z_alpha, z_sigma, sigma = _forward_cache(params, d2)
    log_alpha = _log_softmax(z_alpha)
    dim = cfg.target_dim
    with np.errstate(invalid="ignore"):               # non-finite targets surface via ``total``
        diff = m2[:, None, :] - mu
        r2 = np.sum(diff**2, axis=-1)
        terms = log_alpha - dim * np.log(sigma) - r2 / (2.0 * sigma**2) - 0.5 * dim * LOG_2PI
        lse = logsumexp(terms, axis=-1, keepdims=True)
        gamma = np.exp(terms - lse)                   # responsibilities
    total = float(np.mean(-lse))
    inv_b = 1.0 / batch

    g_mu = (-gamma / sigma**2)[..., None] * diff * inv_b
    g_zalpha = (np.exp(log_alpha) - gamma) * inv_b
    g_sigma = gamma * (dim / sigma - r2 / sigma**3) * inv_b
    dsig = np.where(z_sigma >= 0, 1.0, np.exp(np.minimum(z_sigma, 0.0)))
    dsig = np.where(modified_elu(z_sigma) < SIGMA_FLOOR, 0.0, dsig)
    g_zsigma = g_sigma * dsig

    grad = NetworkParams.zeros(cfg, dtype=dtype)
    names = params.layer_names
    n_hidden = len(cfg.hidden)
    top = acts[-1]
    g_top = np.zeros_like(top)
    for name, g_out in zip(names[n_hidden:], (g_mu.reshape(batch, -1), g_zalpha, g_zsigma)):
        w, _ = params.layer(name)
        gw, gb = grad.layer(name)
        gw[...] = top.T @ g_out
        gb[...] = g_out.sum(axis=0)
        g_top += g_out @ w.T
    g = g_top
    for i in range(n_hidden - 1, -1, -1):
        name = names[i]
        g = g * (acts[i + 1] > 0)
        w, _ = params.layer(name)
        gw, gb = grad.layer(name)
        gw[...] = acts[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ w.T
    return total, grad.flat


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: NetworkParams, path, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header length, JSON header,
    then row-major little-endian float64 weights and the input scaling."""
    header = {
        "config": params.cfg.to_dict(),
        "layers": [{"name": n, "fan_in": a, "fan_out": b} for n, a, b in params.cfg.layer_shapes()],
        "param_count": param_count(params.cfg),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.input_shift, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.input_scale, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an MDN checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
    header = json.loads(raw[16:16 + hlen])
    cfg = MdnConfig.from_dict(header["config"])
    n = param_count(cfg)
    body = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    if body.size != n + 2 * cfg.input_dim:
        raise CheckpointError(f"{path}: truncated checkpoint")
    params = NetworkParams(cfg, body[:n].astype(np.float64),
                           body[n:n + cfg.input_dim].copy(), body[n + cfg.input_dim:].copy())
    return params, header.get("meta", {})
