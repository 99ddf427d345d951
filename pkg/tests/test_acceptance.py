"""Acceptance suite: one check per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or directly with ``python tests/test_acceptance.py``.

The desk-scale dataset (1e5 samples) and the two trained networks are cached
under ``.cache/`` in the repository root; the first run builds them, which
takes roughly 10 minutes for the data and 15 minutes for training on one core.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from seabed_mdn import dataset as D
from seabed_mdn import posterior_stats as ps
from seabed_mdn.forward_dispersion import DispersionCurve, RootNotFound, dispersion, rayleigh_halfspace_velocity
from seabed_mdn.geo_model import build_layered_model, uniform_model
from seabed_mdn.mdn_core import (
    MdnConfig,
    MixtureParams,
    NetworkParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    loss,
    param_count,
    save_checkpoint,
)
from seabed_mdn.trainer import AdamConfig, TrainConfig, evaluate_loss, train

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("SEABED_MDN_CACHE", ROOT / ".cache"))
DATA_DIR = CACHE / "desk_data"
NET_DIR = CACHE / "desk_nets"
DATA_SEED = 2024
DESK_NET = MdnConfig(21, (128, 128, 128, 128), 12, 9)
EPSILON = 0.05
TEST_NOISE_SEED = 99


def desk_train_config(noisy: bool) -> TrainConfig:
    return TrainConfig(batch_size=256, max_epochs=200, patience=20,
                       noise=D.NoiseModel(EPSILON) if noisy else None,
                       adam=AdamConfig(lr=1e-3), seed=7, dtype="float32")


def desk_data():
    if not (DATA_DIR / "manifest.json").exists():
        splits, manifest = D.build(100_000, seed=DATA_SEED, epsilon=EPSILON)
        D.save(splits, manifest, DATA_DIR)
    return D.load(DATA_DIR)


def desk_net(noisy: bool) -> NetworkParams:
    name = "noisy" if noisy else "noiseless"
    path = NET_DIR / f"{name}.ck"
    if not path.exists():
        splits, manifest = desk_data()
        NET_DIR.mkdir(parents=True, exist_ok=True)
        tc = desk_train_config(noisy)
        params, hist = train(splits["train"], splits["val"], DESK_NET, tc,
                             train_grid=manifest.grid, val_grid=manifest.grid)
        hist.to_csv(NET_DIR / f"{name}.history.csv")
        save_checkpoint(params, path, {
            "frequencies_hz": manifest.grid.freqs.tolist(),
            "prior": manifest.prior.to_dict(),
            "train_config": tc.to_dict(),
            "best_epoch": hist.best_epoch,
            "best_val_loss": hist.best_val_loss,
            "stop_reason": hist.stop_reason,
        })
    params, _ = load_checkpoint(path)
    return params


def _line(num: int, passed: bool, detail: str) -> str:
    return f"CRITERION {num}: {'PASS' if passed else 'FAIL'} - {detail}"


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------

def _central_difference(p, d, m, i, step, fn=None):
    fn = loss if fn is None else fn
    orig = p.flat[i]
    p.flat[i] = orig + step
    up = fn(p, d, m)
    p.flat[i] = orig - step
    down = fn(p, d, m)
    p.flat[i] = orig
    return (up - down) / (2 * step)


def _loss_extended(p, d, m):
    """Single-sample mixture loss written out directly in long double."""
    ld = np.longdouble
    cfg = p.cfg
    x = (d[0].astype(ld) - p.input_shift) / p.input_scale
    names = p.layer_names
    for name in names[:len(cfg.hidden)]:
        w, b = p.layer(name)
        x = np.maximum(x @ w.astype(ld) + b.astype(ld), 0)
    heads = [x @ w.astype(ld) + b.astype(ld) for w, b in map(p.layer, names[len(cfg.hidden):])]
    mu = heads[0].reshape(cfg.n_kernels, cfg.target_dim)
    za = heads[1] - heads[1].max()
    log_alpha = za - np.log(np.sum(np.exp(za)))
    sigma = np.maximum(np.where(heads[2] >= 0, heads[2] + 1, np.exp(np.minimum(heads[2], 0))), 1e-6)
    r2 = np.sum((m[0].astype(ld) - mu) ** 2, axis=1)
    dim = cfg.target_dim
    t = log_alpha - dim * np.log(sigma) - r2 / (2 * sigma**2) - ld(0.5) * dim * np.log(2 * np.pi * ld(1))
    top = t.max()
    return -(top + np.log(np.sum(np.exp(t - top))))


def criterion_1():
    """Analytic vs central-difference gradients on a toy network.

    Pass/fail uses step 1e-4 in float64 only.  Coordinates over tolerance are
    re-checked with step 1e-5 on a long-double loss and the result is reported
    in the detail line, which
    separates finite-difference artifacts (ReLU kinks inside the step, O(h^2)
    truncation, roundoff on tiny gradients) from a wrong analytic gradient.
    """
    t0 = time.perf_counter()
    cfg = MdnConfig(5, (16, 16, 16, 16), 3, 4)
    rng = np.random.default_rng(1)
    worst = 0.0
    step = 1e-4
    n_bad, bad_triples, recheck = 0, 0, 0.0
    for _ in range(50):
        p = init_params(cfg, rng)
        p.flat += 0.1 * rng.standard_normal(p.flat.size)
        d = rng.standard_normal((1, 5))
        m = rng.standard_normal((1, 4))
        _, grad = backward(p, d, m)
        fd = np.array([_central_difference(p, d, m, i, step) for i in range(p.flat.size)])
        rel = np.abs(grad - fd) / (np.abs(fd) + 1e-8)
        worst = max(worst, float(rel.max()))
        bad = np.flatnonzero(rel >= 1e-5)
        n_bad += bad.size
        bad_triples += bool(bad.size)
        for i in bad:
            fine = float(_central_difference(p, d, m, i, 1e-5, _loss_extended))
            recheck = max(recheck, abs(grad[i] - fine) / (abs(fine) + 1e-8))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 60
    detail = f"max relative gradient error {worst:.2e} over 50 triples ({param_count(cfg)} params), {elapsed:.1f} s"
    if n_bad:
        detail += (f"; {n_bad} coordinates in {bad_triples} triples over tolerance, "
                   f"max error {recheck:.1e} when re-checked with step 1e-5 in long double")
    return ok, detail


def _random_mixture(rng, n_kernels=4, dim=9):
    return MixtureParams(rng.dirichlet(np.ones(n_kernels)), rng.uniform(0.05, 0.4, n_kernels),
                         rng.uniform(0.3, 2.5, (n_kernels, dim)))


def criterion_2():
    """Closed-form mean and covariance against 1e6-draw Monte-Carlo moments.

    The detail line also gives the number of comparisons beyond 4 standard
    errors and the mean squared z-score; exact formulas give about 1.0 for the
    latter, a wrong formula gives values orders of magnitude larger.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 1_000_000
    z_all = []
    for _ in range(100):
        mp = _random_mixture(rng, n_kernels=int(rng.integers(1, 6)))
        x = ps.sample_mixture(mp, n, rng)
        mean = x.mean(axis=0)
        xc = x - mean
        cov = xc.T @ xc / (n - 1)
        se_mean = np.sqrt(np.diag(cov) / n)
        z_all.append(np.abs(mean - ps.mean_model(mp)) / se_mean)
        c_exact = ps.covariance(mp)
        for i in range(mp.dim):
            prod = xc[:, i:i + 1] * xc[:, i:]
            se = prod.std(axis=0) / math.sqrt(n)
            z_all.append(np.abs(cov[i, i:] - c_exact[i, i:]) / se)
    z = np.concatenate(z_all)
    worst = float(z.max())
    elapsed = time.perf_counter() - t0
    ok = worst < 4.0 and elapsed < 300
    return ok, (f"largest deviation {worst:.2f} standard errors over 100 mixtures, "
                f"{int(np.sum(z >= 4.0))} of {z.size} comparisons >= 4, mean z^2 {np.mean(z**2):.3f}, "
                f"{elapsed:.0f} s")


def criterion_3():
    """Normalization of the 1D/2D marginals and 2D->1D consistency by trapezoid rule."""
    rng = np.random.default_rng(3)
    err1 = err2 = errc = 0.0
    for _ in range(20):
        mp = _random_mixture(rng, n_kernels=int(rng.integers(1, 5)))
        i, j = rng.choice(9, 2, replace=False)
        smax = mp.sigma.max()

        def axis(k, n):
            return np.linspace(mp.mu[:, k].min() - 8 * smax, mp.mu[:, k].max() + 8 * smax, n)

        err1 = max(err1, abs(ps.marginal_1d(mp, i, axis(i, 10_000)).integral() - 1))
        xi, xj = axis(i, 1500), axis(j, 1500)
        m2 = ps.marginal_2d(mp, i, j, xi, xj)
        err2 = max(err2, abs(m2.integral() - 1))
        from_2d = np.trapezoid(m2.density, xj, axis=1)
        errc = max(errc, float(np.max(np.abs(from_2d - ps.marginal_1d(mp, i, xi).density))))
    ok = err1 < 1e-6 and err2 < 1e-5 and errc < 1e-5
    return ok, f"1D integral error {err1:.1e}, 2D integral error {err2:.1e}, marginalization error {errc:.1e}"


def _log_mixture_density(mp, x):
    dim = mp.dim
    r2 = np.sum((x[:, None, :] - mp.mu[None]) ** 2, axis=-1)
    terms = np.log(mp.alpha) - dim * np.log(mp.sigma) - r2 / (2 * mp.sigma**2) - 0.5 * dim * math.log(2 * math.pi)
    top = terms.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(terms - top).sum(axis=1, keepdims=True)))[:, 0]


def criterion_4():
    """MAP kernel choice against a dense lattice search of the mixture density."""
    rng = np.random.default_rng(4)
    offsets = np.array(np.meshgrid(*[[-1.0, 0.0, 1.0]] * 9, indexing="ij")).reshape(9, -1).T
    matches = 0
    for _ in range(50):
        n_k = int(rng.integers(2, 5))
        sigma = rng.uniform(0.01, 0.05, n_k)
        while True:
            mu = rng.uniform(0.3, 2.5, (n_k, 9))
            dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)[np.triu_indices(n_k, 1)]
            if dist.min() > 8 * sigma.max():
                break
        mp = MixtureParams(rng.dirichlet(np.ones(n_k)), sigma, mu)
        lattice = np.vstack([mu[l] + 0.25 * sigma[l] * offsets for l in range(n_k)])
        best = lattice[np.argmax(_log_mixture_density(mp, lattice))]
        matches += int(np.array_equal(best, ps.map_model(mp)) and any(np.array_equal(best, c) for c in mu))
    return matches == 50, f"{matches}/50 mixtures: map_model equals the lattice argmax centre"


def criterion_5():
    cfg = MdnConfig(21, (500, 500, 500, 500), 36, 9)
    shapes = {name: (a + 1) * b for name, a, b in cfg.layer_shapes()}
    p = NetworkParams.zeros(cfg)
    mp = forward(p, np.ones(21))
    dims = (mp.mu.size, mp.alpha.size, mp.sigma.size)
    ok = (param_count(cfg) == 960_896 and shapes["dense_4"] == 162_324 and dims == (324, 36, 36)
          and cfg.output_dim == 396)
    return ok, f"{param_count(cfg):,} parameters, dense_4 {shapes['dense_4']:,}, heads {dims}, concat {cfg.output_dim}"


def criterion_6():
    worst = 0.0
    for vs in (0.3, 1.0, 2.5):
        for vp in (math.sqrt(3) * vs, 1.16 * vs + 1.36):
            c = dispersion(uniform_model(vs, vp=vp)).phase_vel
            worst = max(worst, float(np.max(np.abs(c / rayleigh_halfspace_velocity(vs, vp) - 1))))
    return worst < 1e-3, f"max relative deviation from the Rayleigh root {worst:.1e}"


def desk_losses():
    splits, _ = desk_data()
    test = splits["test"]
    noise = D.NoiseModel(EPSILON)
    out = {}
    for name, noisy in (("noisy_net", True), ("noiseless_net", False)):
        p = desk_net(noisy)
        _, meta = load_checkpoint(NET_DIR / f"{'noisy' if noisy else 'noiseless'}.ck")
        out[name] = {
            "val": meta["best_val_loss"],
            "best_epoch": meta["best_epoch"],
            "noisy_test": evaluate_loss(p, test, noise, seed=TEST_NOISE_SEED),
            "clean_test": evaluate_loss(p, test, None),
        }
    return out


def criterion_7():
    r = desk_losses()
    nz, cl = r["noisy_net"], r["noiseless_net"]
    rel = abs(nz["noisy_test"] - nz["val"]) / abs(nz["val"])
    gap_noisy = cl["noisy_test"] - nz["noisy_test"]
    gap_clean = cl["clean_test"] - nz["clean_test"]
    ok_a = rel <= 0.25
    ok_b = gap_noisy > 0 and gap_noisy >= 10 * abs(gap_clean)
    detail = (f"(a) noisy net: noisy test {nz['noisy_test']:.3f} vs val {nz['val']:.3f} ({rel:.1%}); "
              f"(b) noisy-test gap {gap_noisy:.2f} vs clean-test gap {gap_clean:.2f} "
              f"(ratio {gap_noisy / max(abs(gap_clean), 1e-12):.1f}); "
              f"noiseless net: noisy test {cl['noisy_test']:.2f}, clean test {cl['clean_test']:.3f}")
    return ok_a and ok_b, detail


def criterion_8(tmp_dir: Path | None = None):
    splits, manifest = desk_data()
    test = splits["test"]
    desk_net(True)
    tmp_dir = Path(tmp_dir or CACHE / "invert_check")
    tmp_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(TEST_NOISE_SEED)
    observed = D.add_noise(test.d[0], D.NoiseModel(EPSILON), rng)
    curve_path = tmp_dir / "curve.csv"
    DispersionCurve(manifest.grid, observed).to_csv(curve_path)
    out_dir = tmp_dir / "report"
    cmd = [sys.executable, "-m", "seabed_mdn", "invert", "--checkpoint", str(NET_DIR / "noisy.ck"),
           "--curve", str(curve_path), "-o", str(out_dir)]
    subprocess.run(cmd, check=True, capture_output=True)          # warm the compiled-code cache
    t0 = time.perf_counter()
    subprocess.run(cmd, check=True, capture_output=True)
    elapsed = time.perf_counter() - t0
    summary = json.loads((out_dir / "summary.json").read_text())
    mean_vs = np.array(summary["mean_model"])
    pred = dispersion(build_layered_model(mean_vs, manifest.prior), manifest.grid).phase_vel
    true = test.d[0]
    rms = float(np.sqrt(np.mean(((pred - true) / true) ** 2)))
    ok = rms < 2 * EPSILON and elapsed < 5.0
    return ok, f"mean-model forward RMS relative error {rms:.4f} (limit {2 * EPSILON}); inversion wall-clock {elapsed:.2f} s"


def criterion_9():
    splits, _ = desk_data()
    test = splits["test"][:100]
    params = desk_net(True)
    d = D.add_noise(test.d, D.NoiseModel(EPSILON), np.random.default_rng(TEST_NOISE_SEED))
    mps = forward(params, d)
    std = np.mean([ps.summarize(mps[b]).std for b in range(len(test))], axis=0)
    ok = bool(std[8] > std[4])
    return ok, f"mean posterior std layer 5 {std[4]:.4f} km/s, layer 9 {std[8]:.4f} km/s; all layers {np.round(std, 3).tolist()}"


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}


@pytest.mark.slow
@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num, acceptance_lines):
    passed, detail = CRITERIA[num]()
    line = _line(num, passed, detail)
    acceptance_lines.append(line)
    print(line)
    assert passed, line


if __name__ == "__main__":
    failures = 0
    for num, func in CRITERIA.items():
        passed, detail = func()
        failures += not passed
        print(_line(num, passed, detail), flush=True)
    sys.exit(1 if failures else 0)
