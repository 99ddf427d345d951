"""Layered seabed parametrization, prior sampler and empirical vP/rho relations.

All lengths are in km, velocities in km/s and densities in g/cm^3.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

N_LAYERS = 9

DEFAULT_THICKNESSES = (0.03, 0.06, 0.10, 0.15, 0.30, 0.50, 0.50, 0.50, math.inf)


class InvalidVelocityModel(ValueError):
    """Raised when a shear-velocity vector violates the prior constraints."""


@dataclass(frozen=True)
class PriorConfig:
    """Bounds of the layered-seabed prior and the fixed water column."""

    vs1_bounds: tuple[float, float] = (0.3, 1.0)
    growth_bounds: tuple[float, float] = (0.8, 1.4)
    hard_cap: float = 2.5
    thicknesses: tuple[float, ...] = DEFAULT_THICKNESSES
    water_depth: float = 0.325
    water_vp: float = 1.49
    water_rho: float = 1.0

    def __post_init__(self):
        lo, hi = self.vs1_bounds
        if not 0 < lo < hi:
            raise ValueError(f"vs1_bounds must satisfy 0 < low < high, got {self.vs1_bounds}")
        glo, ghi = self.growth_bounds
        if not 0 < glo < ghi:
            raise ValueError(f"growth_bounds must satisfy 0 < low < high, got {self.growth_bounds}")
        if not self.hard_cap > hi:
            raise ValueError("hard_cap must exceed the upper vs1 bound")
        if len(self.thicknesses) != N_LAYERS or not math.isinf(self.thicknesses[-1]):
            raise ValueError(f"need {N_LAYERS} thicknesses ending with inf")
        if any(not h > 0 for h in self.thicknesses[:-1]):
            raise ValueError("finite thicknesses must be positive")
        if self.water_depth < 0 or self.water_vp <= 0 or self.water_rho <= 0:
            raise ValueError("invalid water column")

    @property
    def n_layers(self) -> int:
        return len(self.thicknesses)

    def to_dict(self) -> dict:
        return {
            "vs1_bounds": list(self.vs1_bounds),
            "growth_bounds": list(self.growth_bounds),
            "hard_cap": self.hard_cap,
            "thicknesses": [None if math.isinf(h) else h for h in self.thicknesses],
            "water_depth": self.water_depth,
            "water_vp": self.water_vp,
            "water_rho": self.water_rho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(
            vs1_bounds=tuple(d["vs1_bounds"]),
            growth_bounds=tuple(d["growth_bounds"]),
            hard_cap=float(d["hard_cap"]),
            thicknesses=tuple(math.inf if h is None else float(h) for h in d["thicknesses"]),
            water_depth=float(d["water_depth"]),
            water_vp=float(d["water_vp"]),
            water_rho=float(d["water_rho"]),
        )

    def save(self, path) -> None:
        """Write the config as a commented ``key = value`` file."""
        th = ", ".join("inf" if math.isinf(h) else repr(h) for h in self.thicknesses)
        text = (
            "[prior]\n"
            "# top seabed layer shear velocity bounds, km/s\n"
            f"vs1_bounds = {self.vs1_bounds[0]!r}, {self.vs1_bounds[1]!r}\n"
            "# allowed ratio vs[i] / vs[i-1], dimensionless\n"
            f"growth_bounds = {self.growth_bounds[0]!r}, {self.growth_bounds[1]!r}\n"
            "# absolute upper limit on shear velocity, km/s\n"
            f"hard_cap = {self.hard_cap!r}\n"
            "# seabed layer thicknesses, km (last one is the half-space)\n"
            f"thicknesses = {th}\n"
            "# water column: depth km, vp km/s, density g/cm^3\n"
            f"water_depth = {self.water_depth!r}\n"
            f"water_vp = {self.water_vp!r}\n"
            f"water_rho = {self.water_rho!r}\n"
        )
        Path(path).write_text(text)

    @classmethod
    def load(cls, path) -> "PriorConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string(Path(path).read_text())
        sec = parser["prior"] if parser.has_section("prior") else parser[parser.default_section]
        defaults = cls()

        def floats(key, fallback):
            if key not in sec:
                return fallback
            return tuple(float(v) for v in sec[key].split(","))

        return cls(
            vs1_bounds=floats("vs1_bounds", defaults.vs1_bounds),
            growth_bounds=floats("growth_bounds", defaults.growth_bounds),
            hard_cap=sec.getfloat("hard_cap", defaults.hard_cap),
            thicknesses=floats("thicknesses", defaults.thicknesses),
            water_depth=sec.getfloat("water_depth", defaults.water_depth),
            water_vp=sec.getfloat("water_vp", defaults.water_vp),
            water_rho=sec.getfloat("water_rho", defaults.water_rho),
        )


@dataclass(frozen=True)
class Layer:
    thickness: float
    vs: float
    vp: float
    rho: float


@dataclass(frozen=True)
class LayeredEarthModel:
    """Water column over elastic layers; the last layer is a half-space.

    ``water_depth == 0`` gives a dry model with a free surface on top of the
    first elastic layer.
    """

    water_depth: float
    water_vp: float
    water_rho: float
    layers: tuple[Layer, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one elastic layer")
        if not math.isinf(self.layers[-1].thickness):
            raise ValueError("bottom layer must have infinite thickness")
        for lay in self.layers[:-1]:
            if not lay.thickness > 0:
                raise ValueError("finite thicknesses must be positive")
        for lay in self.layers:
            if not (lay.vs > 0 and lay.vp > lay.vs and lay.rho > 0):
                raise ValueError(f"unphysical layer {lay}")

    @property
    def water_vs(self) -> float:
        return 0.0

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (thickness, vp, vs, rho) arrays of the elastic layers.

        The half-space thickness is reported as 0 so the arrays stay finite.
        """
        h = np.array([0.0 if math.isinf(l.thickness) else l.thickness for l in self.layers])
        vp = np.array([l.vp for l in self.layers])
        vs = np.array([l.vs for l in self.layers])
        rho = np.array([l.rho for l in self.layers])
        return h, vp, vs, rho


def vp_from_vs(vs):
    """Compressional velocity from shear velocity, both km/s."""
    return 1.16 * np.asarray(vs, dtype=float) + 1.36


def rho_from_vp(vp):
    """Density in g/cm^3 from compressional velocity in km/s."""
    vp = np.asarray(vp, dtype=float)
    if np.any(vp <= 0):
        raise ValueError("vp must be positive")
    return 1.74 * vp**0.25


def layer_bounds(prev_vs: float, vs1: float, cfg: PriorConfig) -> tuple[float, float]:
    """Admissible interval for a layer below one with shear velocity ``prev_vs``."""
    lo = max(cfg.growth_bounds[0] * prev_vs, vs1)
    hi = min(cfg.growth_bounds[1] * prev_vs, cfg.hard_cap)
    return lo, hi


def sample_prior(rng: np.random.Generator, cfg: PriorConfig = PriorConfig()) -> np.ndarray:
    """Draw one shear-velocity profile layer by layer."""
    vs = np.empty(cfg.n_layers)
    vs[0] = rng.uniform(*cfg.vs1_bounds)
    for i in range(1, cfg.n_layers):
        lo, hi = layer_bounds(vs[i - 1], vs[0], cfg)
        vs[i] = rng.uniform(lo, hi)
    return vs


def sample_prior_batch(rng: np.random.Generator, n: int, cfg: PriorConfig = PriorConfig()) -> np.ndarray:
    """Vectorized ``sample_prior``; returns an (n, M) array."""
    vs = np.empty((n, cfg.n_layers))
    vs[:, 0] = rng.uniform(*cfg.vs1_bounds, size=n)
    for i in range(1, cfg.n_layers):
        lo = np.maximum(cfg.growth_bounds[0] * vs[:, i - 1], vs[:, 0])
        hi = np.minimum(cfg.growth_bounds[1] * vs[:, i - 1], cfg.hard_cap)
        vs[:, i] = rng.uniform(lo, hi)
    return vs


def check_velocity_vector(vs: Sequence[float], cfg: PriorConfig = PriorConfig(), tol: float = 1e-12) -> None:
    """Raise ``InvalidVelocityModel`` unless ``vs`` lies inside the prior support."""
    vs = np.asarray(vs, dtype=float)
    if vs.shape != (cfg.n_layers,):
        raise InvalidVelocityModel(f"expected {cfg.n_layers} velocities, got shape {vs.shape}")
    if not np.all(np.isfinite(vs)) or np.any(vs <= 0) or np.any(vs > cfg.hard_cap + tol):
        raise InvalidVelocityModel("velocities must be finite, positive and below the hard cap")
    lo0, hi0 = cfg.vs1_bounds
    if not lo0 - tol <= vs[0] <= hi0 + tol:
        raise InvalidVelocityModel(f"vs[0]={vs[0]} outside {cfg.vs1_bounds}")
    for i in range(1, cfg.n_layers):
        lo, hi = layer_bounds(vs[i - 1], vs[0], cfg)
        if not lo - tol <= vs[i] <= hi + tol:
            raise InvalidVelocityModel(f"vs[{i}]={vs[i]} outside [{lo}, {hi}]")


def build_layered_model(vs: Sequence[float], cfg: PriorConfig = PriorConfig()) -> LayeredEarthModel:
    vs = np.asarray(vs, dtype=float)
    if vs.shape != (cfg.n_layers,):
        raise ValueError(f"expected {cfg.n_layers} velocities, got shape {vs.shape}")
    vp = vp_from_vs(vs)
    rho = rho_from_vp(vp)
    layers = tuple(
        Layer(float(h), float(s), float(p), float(r))
        for h, s, p, r in zip(cfg.thicknesses, vs, vp, rho)
    )
    return LayeredEarthModel(cfg.water_depth, cfg.water_vp, cfg.water_rho, layers)


def uniform_model(vs: float, vp: float | None = None, rho: float | None = None,
                  water_depth: float = 0.0, water_vp: float = 1.49, water_rho: float = 1.0,
                  thicknesses: Sequence[float] = DEFAULT_THICKNESSES) -> LayeredEarthModel:
    """Stack of identical elastic layers, i.e. a homogeneous half-space."""
    vp = float(vp_from_vs(vs)) if vp is None else vp
    rho = float(rho_from_vp(vp)) if rho is None else rho
    layers = tuple(Layer(float(h), vs, vp, rho) for h in thicknesses)
    return LayeredEarthModel(water_depth, water_vp, water_rho, layers)


def prior_mean(cfg: PriorConfig = PriorConfig(), n: int = 20000, seed: int = 0) -> np.ndarray:
    """Monte-Carlo mean profile of the prior."""
    return sample_prior_batch(np.random.default_rng(seed), n, cfg).mean(axis=0)
