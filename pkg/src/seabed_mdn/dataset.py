"""Synthetic (dispersion curve, velocity profile) datasets.

Stored datasets are noiseless; observation noise is drawn on demand with
``add_noise``.  On disk a dataset is a directory holding one little-endian
float64 record file per split (21 phase velocities followed by 9 shear
velocities per record) next to a JSON manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward_dispersion import FrequencyGrid, RootNotFound, default_grid, dispersion_values
from .geo_model import PriorConfig, rho_from_vp, sample_prior, vp_from_vs

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RECORD_DTYPE = "<f8"
SPLIT_NAMES = ("train", "val", "test")


class ForwardFailureRateExceeded(RuntimeError):
    pass


class GridMismatch(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Version mismatch, truncated record file or checksum failure."""


@dataclass(frozen=True)
class NoiseModel:
    """Independent Gaussian noise with standard deviation ``epsilon * d_i``."""

    epsilon: float = 0.05

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class Dataset:
    """Paired arrays ``d`` (n, N) and ``m`` (n, M)."""

    d: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)
        if self.d.ndim != 2 or self.m.ndim != 2 or len(self.d) != len(self.m):
            raise ValueError("d and m must be 2-D arrays with the same number of rows")

    def __len__(self) -> int:
        return len(self.d)

    def __getitem__(self, idx) -> "Dataset":
        return Dataset(self.d[idx], self.m[idx])

    def records(self) -> np.ndarray:
        return np.hstack([self.d, self.m]).astype(RECORD_DTYPE)

    def to_csv(self, path) -> None:
        n_d, n_m = self.d.shape[1], self.m.shape[1]
        header = ",".join([f"d{i}" for i in range(n_d)] + [f"vs{i + 1}" for i in range(n_m)])
        np.savetxt(path, self.records(), delimiter=",", header=header, comments="", fmt="%.17g")


@dataclass
class DatasetManifest:
    sample_count: int
    splits: dict[str, int]
    grid: FrequencyGrid
    prior: PriorConfig
    epsilon: float
    seed: int
    chunk_size: int
    fixed_noise: bool = False
    format_version: int = FORMAT_VERSION
    checksums: dict[str, str] = field(default_factory=dict)
    n_obs: int = 21
    n_params: int = 9

    def __post_init__(self):
        if sum(self.splits.values()) != self.sample_count:
            raise ValueError("split sizes must sum to sample_count")

    @property
    def record_size(self) -> int:
        return 8 * (self.n_obs + self.n_params)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "sample_count": self.sample_count,
            "splits": dict(self.splits),
            "frequencies_hz": self.grid.freqs.tolist(),
            "prior": self.prior.to_dict(),
            "epsilon": self.epsilon,
            "fixed_noise": self.fixed_noise,
            "seed": self.seed,
            "chunk_size": self.chunk_size,
            "record_layout": {
                "dtype": "float64 little-endian",
                "fields": [f"phase_vel[{self.n_obs}] km/s", f"vs[{self.n_params}] km/s"],
                "record_bytes": self.record_size,
            },
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "checksums_sha256": dict(self.checksums),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            sample_count=int(d["sample_count"]),
            splits={k: int(v) for k, v in d["splits"].items()},
            grid=FrequencyGrid(np.array(d["frequencies_hz"], dtype=float)),
            prior=PriorConfig.from_dict(d["prior"]),
            epsilon=float(d["epsilon"]),
            seed=int(d["seed"]),
            chunk_size=int(d["chunk_size"]),
            fixed_noise=bool(d.get("fixed_noise", False)),
            format_version=int(d["format_version"]),
            checksums=dict(d.get("checksums_sha256", {})),
            n_obs=int(d.get("n_obs", 21)),
            n_params=int(d.get("n_params", 9)),
        )


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def _generate_chunk(args):
    seed, chunk, n, cfg, freqs, max_retries = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))
    d = np.empty((n, len(freqs)))
    m = np.empty((n, cfg.n_layers))
    h = np.array([0.0 if np.isinf(t) else t for t in cfg.thicknesses])
    attempts = 0
    failures = 0
    for i in range(n):
        for _ in range(max_retries):
            attempts += 1
            vs = sample_prior(rng, cfg)
            vp = vp_from_vs(vs)
            try:
                d[i] = dispersion_values(h, vp, vs, rho_from_vp(vp), cfg.water_depth,
                                         cfg.water_vp, cfg.water_rho, freqs)
            except RootNotFound:
                failures += 1
                continue
            m[i] = vs
            break
        else:
            raise ForwardFailureRateExceeded(
                f"{max_retries} consecutive forward failures in chunk {chunk}")
    return d, m, attempts, failures


def generate(n: int, cfg: PriorConfig = PriorConfig(), grid: FrequencyGrid | None = None,
             seed: int = 0, workers: int = 1, chunk_size: int = 1000,
             max_failure_rate: float = 0.15, max_retries: int = 1000) -> Dataset:
    """Draw ``n`` prior models and their fundamental-mode dispersion curves.

    Models whose curve cannot be computed at some frequency (no guided mode
    below the half-space shear speed) are redrawn.  Chunk ``j`` of
    ``chunk_size`` samples always uses the random stream spawned from
    ``(seed, j)``, so the output does not depend on ``workers``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    grid = default_grid() if grid is None else grid
    n_chunks = -(-n // chunk_size)
    jobs = [(seed, j, min(chunk_size, n - j * chunk_size), cfg, grid.freqs, max_retries)
            for j in range(n_chunks)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_chunk, jobs))
    else:
        results = []
        for j, job in enumerate(jobs):
            results.append(_generate_chunk(job))
            log.info("generated chunk %d/%d", j + 1, n_chunks)
    attempts = sum(r[2] for r in results)
    failures = sum(r[3] for r in results)
    rate = failures / attempts
    log.info("forward failures: %d of %d attempts (%.2f%%)", failures, attempts, 100 * rate)
    if attempts >= 200 and rate > max_failure_rate:
        raise ForwardFailureRateExceeded(
            f"{failures} of {attempts} forward calls failed ({rate:.1%} > {max_failure_rate:.1%})")
    return Dataset(np.vstack([r[0] for r in results]), np.vstack([r[1] for r in results]))


def add_noise(d: np.ndarray, nm: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Return ``d + eta`` with ``eta_i ~ N(0, (epsilon d_i)^2)`` drawn independently."""
    d = np.asarray(d, dtype=float)
    if nm.epsilon == 0:
        return d.copy()
    return d + rng.standard_normal(d.shape) * (nm.epsilon * d)


def split_sizes(n: int, proportions=(98, 1, 1)) -> tuple[int, ...]:
    """Integer split sizes summing to ``n`` in the given proportions.

    Every part after the first gets at least one sample when ``n`` allows it.
    """
    p = np.asarray(proportions, dtype=float)
    if np.any(p <= 0):
        raise ValueError("proportions must be positive")
    sizes = np.floor(n * p / p.sum()).astype(int)
    if n >= len(p):
        sizes[1:] = np.maximum(sizes[1:], 1)
    sizes[0] += n - sizes.sum()
    return tuple(int(s) for s in sizes)


def split(ds: Dataset, sizes, rng: np.random.Generator) -> tuple[Dataset, ...]:
    """Shuffle then cut into consecutive parts of the given sizes."""
    sizes = tuple(int(s) for s in sizes)
    if any(s < 0 for s in sizes) or sum(sizes) != len(ds):
        raise ValueError(f"split sizes {sizes} do not sum to {len(ds)}")
    perm = rng.permutation(len(ds))
    bounds = np.cumsum((0,) + sizes)
    return tuple(ds[perm[a:b]] for a, b in zip(bounds[:-1], bounds[1:]))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save(splits: dict[str, Dataset], manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        if len(ds) != manifest.splits.get(name):
            raise ValueError(f"split {name!r} size disagrees with manifest")
        fn = path / f"{name}.bin"
        ds.records().tofile(fn)
        manifest.checksums[name] = _sha256(fn)
    (path / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no manifest.json in {path}") from None
    if raw.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"dataset format version {raw.get('format_version')} != {FORMAT_VERSION}")
    return DatasetManifest.from_dict(raw)


def load(path, grid: FrequencyGrid | None = None,
         names=None) -> tuple[dict[str, Dataset], DatasetManifest]:
    """Read splits back, verifying size and checksum.

    ``grid`` is the frequency grid the caller expects; a different grid in the
    manifest raises ``GridMismatch``.
    """
    path = Path(path)
    manifest = load_manifest(path)
    if grid is not None and not grid.matches(manifest.grid):
        raise GridMismatch("dataset frequency grid differs from the requested grid")
    n_cols = manifest.n_obs + manifest.n_params
    out = {}
    for name in (names or manifest.splits):
        fn = path / f"{name}.bin"
        expected = manifest.splits[name] * manifest.record_size
        size = fn.stat().st_size
        if size != expected:
            raise DatasetFormatError(f"{fn}: {size} bytes, expected {expected} (truncated?)")
        want = manifest.checksums.get(name)
        if want is not None and _sha256(fn) != want:
            raise DatasetFormatError(f"{fn}: checksum mismatch")
        rec = np.fromfile(fn, dtype=RECORD_DTYPE).reshape(-1, n_cols).astype(np.float64)
        out[name] = Dataset(rec[:, :manifest.n_obs], rec[:, manifest.n_obs:])
    return out, manifest


def build(n: int, seed: int, cfg: PriorConfig = PriorConfig(), grid: FrequencyGrid | None = None,
          proportions=(98, 1, 1), epsilon: float = 0.05, workers: int = 1,
          chunk_size: int = 1000, fixed_noise: bool = False,
          max_failure_rate: float = 0.15) -> tuple[dict[str, Dataset], DatasetManifest]:
    """Generate, shuffle and split a dataset; returns splits and manifest."""
    grid = default_grid() if grid is None else grid
    ds = generate(n, cfg, grid, seed=seed, workers=workers, chunk_size=chunk_size,
                  max_failure_rate=max_failure_rate)
    sizes = split_sizes(n, proportions)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    parts = split(ds, sizes, rng)
    splits = dict(zip(SPLIT_NAMES, parts))
    manifest = DatasetManifest(sample_count=n, splits={k: len(v) for k, v in splits.items()},
                               grid=grid, prior=cfg, epsilon=epsilon, seed=seed,
                               chunk_size=chunk_size, fixed_noise=fixed_noise)
    return splits, manifest
