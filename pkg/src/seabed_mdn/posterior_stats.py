"""Closed-form statistics of an isotropic Gaussian mixture posterior.

Everything here works in float64 on a single ``MixtureParams`` (alpha (L,),
sigma (L,), mu (L, M)).  ``sample_mixture`` exists mainly as an independent
check of the analytic moments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdn_core import SIGMA_FLOOR, MixtureParams

DEFAULT_AXIS = (0.3, 2.5)
DEFAULT_POINTS = 512


class ZeroVariance(ValueError):
    """A covariance diagonal entry is at or below the squared width floor."""

    def __init__(self, index: int):
        super().__init__(f"variance of parameter {index} is below the floor")
        self.index = index


def _single(mp: MixtureParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if mp.mu.ndim != 2:
        raise ValueError("expected a single mixture, got a batch")
    return (np.asarray(mp.alpha, dtype=np.float64), np.asarray(mp.sigma, dtype=np.float64),
            np.asarray(mp.mu, dtype=np.float64))


def map_model(mp: MixtureParams) -> np.ndarray:
    """Centre of the kernel with the largest peak height alpha / sigma^M.

    Compared in log space; ``np.argmax`` picks the lowest index on ties.
    """
    alpha, sigma, mu = _single(mp)
    with np.errstate(divide="ignore"):
        score = np.log(alpha) - mu.shape[1] * np.log(sigma)
    return mu[int(np.argmax(score))].copy()


def mean_model(mp: MixtureParams) -> np.ndarray:
    alpha, _, mu = _single(mp)
    return alpha @ mu


def covariance(mp: MixtureParams) -> np.ndarray:
    alpha, sigma, mu = _single(mp)
    dev = mu - alpha @ mu
    cov = (alpha[:, None] * dev).T @ dev
    cov[np.diag_indices_from(cov)] += alpha @ sigma**2
    return 0.5 * (cov + cov.T)


def correlation(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    diag = np.diag(cov)
    bad = np.flatnonzero(diag <= SIGMA_FLOOR**2)
    if bad.size:
        raise ZeroVariance(int(bad[0]))
    sd = np.sqrt(diag)
    r = cov / np.outer(sd, sd)
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


@dataclass
class MarginalGrid:
    """Marginal density on a 1D axis (``y`` is None) or a 2D lattice.

    For 2D, ``density[a, b]`` is the value at ``(x[a], y[b])``.
    """

    x: np.ndarray
    density: np.ndarray
    y: np.ndarray | None = None
    index: tuple[int, ...] = ()

    def integral(self) -> float:
        if self.y is None:
            return float(np.trapezoid(self.density, self.x))
        return float(np.trapezoid(np.trapezoid(self.density, self.y, axis=1), self.x))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if self.y is None:
                w.writerow(["vs_km_s", "density"])
                for a, p in zip(self.x, self.density):
                    w.writerow([repr(float(a)), repr(float(p))])
            else:
                w.writerow(["vs_i_km_s", "vs_j_km_s", "density"])
                for ia, a in enumerate(self.x):
                    for ib, b in enumerate(self.y):
                        w.writerow([repr(float(a)), repr(float(b)), repr(float(self.density[ia, ib]))])


def default_axis(n: int = DEFAULT_POINTS, bounds=DEFAULT_AXIS) -> np.ndarray:
    return np.linspace(bounds[0], bounds[1], n)


def _check_index(i: int, dim: int) -> None:
    if not 0 <= i < dim:
        raise IndexError(f"parameter index {i} outside [0, {dim})")


def marginal_1d(mp: MixtureParams, i: int, grid=None) -> MarginalGrid:
    alpha, sigma, mu = _single(mp)
    _check_index(i, mu.shape[1])
    x = default_axis() if grid is None else np.asarray(grid, dtype=np.float64)
    z = (x[:, None] - mu[None, :, i]) / sigma
    dens = np.exp(-0.5 * z**2) @ (alpha / sigma) / math.sqrt(2.0 * math.pi)
    return MarginalGrid(x, dens, index=(i,))


def marginal_2d(mp: MixtureParams, i: int, j: int, grid_i=None, grid_j=None) -> MarginalGrid:
    alpha, sigma, mu = _single(mp)
    _check_index(i, mu.shape[1])
    _check_index(j, mu.shape[1])
    if i == j:
        raise ValueError("2D marginal needs two distinct parameters")
    x = default_axis() if grid_i is None else np.asarray(grid_i, dtype=np.float64)
    y = default_axis() if grid_j is None else np.asarray(grid_j, dtype=np.float64)
    # the kernel is separable, so build it from two 1D factors
    gx = np.exp(-0.5 * ((x[:, None] - mu[:, i]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((y[:, None] - mu[:, j]) / sigma) ** 2)
    dens = np.einsum("al,bl,l->ab", gx, gy, alpha / sigma**2) / (2.0 * math.pi)
    return MarginalGrid(x, dens, y, index=(i, j))


def sample_mixture(mp: MixtureParams, n: int, rng: np.random.Generator,
                   return_labels: bool = False):
    """Draw ``n`` vectors: a kernel index from alpha, then an isotropic normal."""
    alpha, sigma, mu = _single(mp)
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.choice(len(alpha), size=n, p=alpha / alpha.sum())
    draws = mu[labels] + sigma[labels, None] * rng.standard_normal((n, mu.shape[1]))
    return (draws, labels) if return_labels else draws


@dataclass
class PosteriorSummary:
    map_model: np.ndarray
    mean_model: np.ndarray
    covariance: np.ndarray
    correlation: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def to_dict(self) -> dict:
        return {
            "map_model": self.map_model.tolist(),
            "mean_model": self.mean_model.tolist(),
            "std": self.std.tolist(),
            "covariance": self.covariance.tolist(),
            "correlation": self.correlation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSummary":
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("map_model", "mean_model", "covariance", "correlation")))

    def to_json(self, path=None, extra: dict | None = None) -> str:
        text = json.dumps({**self.to_dict(), **(extra or {})}, indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def summarize(mp: MixtureParams) -> PosteriorSummary:
    cov = covariance(mp)
    return PosteriorSummary(map_model(mp), mean_model(mp), cov, correlation(cov))
