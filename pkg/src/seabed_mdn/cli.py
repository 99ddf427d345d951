"""Command-line entry point: generate, train, evaluate, invert, stats.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import posterior_stats as ps
from .dataset import GridMismatch, NoiseModel
from .forward_dispersion import DispersionCurve, FrequencyGrid, RootNotFound, dispersion
from .geo_model import PriorConfig, build_layered_model
from .mdn_core import MdnConfig, forward, load_checkpoint, save_checkpoint
from .trainer import AdamConfig, TrainConfig, evaluate_loss, train

log = logging.getLogger("seabed_mdn")


class CliError(RuntimeError):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _hidden(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return widths


# --------------------------------------------------------------------------
# helpers shared by several commands
# --------------------------------------------------------------------------

def _load_model(path):
    params, meta = load_checkpoint(path)
    if "frequencies_hz" not in meta:
        raise CliError(f"{path}: checkpoint carries no frequency grid")
    grid = FrequencyGrid(np.asarray(meta["frequencies_hz"], dtype=float))
    prior = PriorConfig.from_dict(meta["prior"]) if "prior" in meta else PriorConfig()
    return params, meta, grid, prior


def _read_curve(path, grid: FrequencyGrid, resample: str | None) -> DispersionCurve:
    curve = DispersionCurve.from_csv(path)
    if curve.grid.matches(grid):
        return DispersionCurve(grid, curve.phase_vel)
    if resample != "linear":
        raise GridMismatch(
            f"{path}: {len(curve.grid)} frequencies do not match the network's {len(grid)}-point grid; "
            "pass --resample linear to interpolate")
    f = curve.freqs
    if grid.freqs[0] < f.min() * (1 - 1e-9) or grid.freqs[-1] > f.max() * (1 + 1e-9):
        raise GridMismatch(f"{path}: cannot resample without extrapolating")
    order = np.argsort(f)
    return DispersionCurve(grid, np.interp(grid.freqs, f[order], curve.phase_vel[order]))


def _forward_or_none(vs, prior: PriorConfig, grid: FrequencyGrid):
    try:
        return dispersion(build_layered_model(vs, prior), grid).phase_vel
    except (RootNotFound, ValueError) as exc:
        log.warning("forward model failed for predicted profile: %s", exc)
        return None


def _write_forward(path, grid: FrequencyGrid, predicted, observed) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "phase_vel_km_s", "input_phase_vel_km_s", "residual_km_s"])
        for k, f in enumerate(grid.freqs):
            if predicted is None:
                w.writerow([repr(float(f)), "nan", repr(float(observed[k])), "nan"])
            else:
                w.writerow([repr(float(f)), repr(float(predicted[k])), repr(float(observed[k])),
                            repr(float(predicted[k] - observed[k]))])


def _rms_rel(predicted, observed):
    if predicted is None:
        return None
    return float(np.sqrt(np.mean(((predicted - observed) / observed) ** 2)))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    prior = PriorConfig.load(args.config) if args.config else PriorConfig()
    splits, manifest = ds_mod.build(args.n, seed=args.seed, cfg=prior, epsilon=args.epsilon,
                                    workers=args.workers, chunk_size=args.chunk_size,
                                    max_failure_rate=args.max_failure_rate)
    ds_mod.save(splits, manifest, args.out)
    print(json.dumps({"out": str(args.out), "splits": manifest.splits}))
    return 0


def cmd_train(args) -> int:
    splits, manifest = ds_mod.load(args.data, names=("train", "val"))
    noise = NoiseModel(args.epsilon if args.epsilon is not None else manifest.epsilon) if args.noise else None
    tc = TrainConfig(batch_size=args.batch_size, max_epochs=args.max_epochs,
                     checkpoint_every=args.checkpoint_every, patience=args.patience, noise=noise,
                     adam=AdamConfig(lr=args.lr), seed=args.seed, fixed_noise=args.fixed_noise,
                     dtype=args.dtype)
    net_cfg = MdnConfig(manifest.n_obs, args.hidden, args.kernels, manifest.n_params)
    out = Path(args.out)
    state = args.state or out.with_suffix(".state.npz")
    params, hist = train(splits["train"], splits["val"], net_cfg, tc, state_path=state,
                         resume=args.resume)
    meta = {
        "frequencies_hz": manifest.grid.freqs.tolist(),
        "prior": manifest.prior.to_dict(),
        "train_config": tc.to_dict(),
        "dataset": {"path": str(args.data), "seed": manifest.seed,
                    "checksums_sha256": manifest.checksums},
        "best_epoch": hist.best_epoch,
        "best_val_loss": hist.best_val_loss,
        "stop_reason": hist.stop_reason,
    }
    save_checkpoint(params, out, meta)
    hist.to_csv(args.history or out.with_suffix(".history.csv"))
    print(json.dumps({"best_epoch": hist.best_epoch, "best_val_loss": hist.best_val_loss,
                      "epochs": len(hist.epochs), "stop_reason": hist.stop_reason}))
    return 0


def cmd_evaluate(args) -> int:
    params, meta, grid, _ = _load_model(args.checkpoint)
    splits, manifest = ds_mod.load(args.data, grid=grid, names=(args.split,))
    test = splits[args.split]
    noise = NoiseModel(args.epsilon if args.epsilon is not None else manifest.epsilon) if args.noise else None
    mean_loss = evaluate_loss(params, test, noise, seed=args.seed)
    d = test.d if noise is None else ds_mod.add_noise(test.d, noise, np.random.default_rng(args.seed))
    mp = forward(params, d)
    pred = np.einsum("bl,blm->bm", mp.alpha, mp.mu)
    rmse = np.sqrt(np.mean((pred - test.m) ** 2, axis=0))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "layer", "true_vs_km_s", "predicted_mean_vs_km_s"])
            for s in range(len(test)):
                for layer in range(test.m.shape[1]):
                    w.writerow([s, layer + 1, repr(float(test.m[s, layer])), repr(float(pred[s, layer]))])
    print(json.dumps({"mean_loss": mean_loss, "noise": args.noise, "samples": len(test),
                      "rmse_per_layer": rmse.tolist()}))
    return 0


def _posterior(args):
    params, meta, grid, prior = _load_model(args.checkpoint)
    curve = _read_curve(args.curve, grid, getattr(args, "resample", None))
    mp = forward(params, curve.phase_vel)
    return mp, curve, grid, prior, meta


def cmd_invert(args) -> int:
    t0 = time.perf_counter()
    mp, curve, grid, prior, meta = _posterior(args)
    summary = ps.summarize(mp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    marginal_files = []
    for i in range(mp.dim):
        name = f"marginal_layer{i + 1}.csv"
        ps.marginal_1d(mp, i).to_csv(out / name)
        marginal_files.append(name)
    fwd = {}
    for label, vs in (("map", summary.map_model), ("mean", summary.mean_model)):
        pred = _forward_or_none(vs, prior, grid)
        _write_forward(out / f"forward_{label}.csv", grid, pred, curve.phase_vel)
        fwd[label] = {"file": f"forward_{label}.csv", "rms_relative_residual": _rms_rel(pred, curve.phase_vel)}
    extra = {
        "input_curve": {"freq_hz": grid.freqs.tolist(), "phase_vel_km_s": curve.phase_vel.tolist()},
        "mixture": mp.to_dict(),
        "marginal_files": marginal_files,
        "forward": fwd,
        "checkpoint": str(args.checkpoint),
        "elapsed_s": time.perf_counter() - t0,
    }
    summary.to_json(out / "summary.json", extra)
    print(json.dumps({"out": str(out), "elapsed_s": extra["elapsed_s"],
                      "mean_model": summary.mean_model.tolist()}))
    return 0


def cmd_stats(args) -> int:
    mp, _, _, _, _ = _posterior(args)
    summary = ps.summarize(mp)
    sys.stdout.write(summary.to_json(extra={"alpha": mp.alpha.tolist(), "sigma": mp.sigma.tolist(),
                                            "mu": mp.mu.tolist()}) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seabed-mdn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a training dataset")
    g.add_argument("-n", type=_positive_int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True, help="output directory")
    g.add_argument("--config", help="prior configuration file")
    g.add_argument("--workers", type=_positive_int, default=1)
    g.add_argument("--chunk-size", type=_positive_int, default=1000)
    g.add_argument("--epsilon", type=float, default=0.05, help="noise level stored in the manifest")
    g.add_argument("--max-failure-rate", type=float, default=0.15)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("-o", "--out", required=True, help="checkpoint path")
    t.add_argument("--noise", type=_on_off, default=True, help="on/off (default on)")
    t.add_argument("--epsilon", type=float, help="override the manifest noise level")
    t.add_argument("--fixed-noise", action="store_true", help="reuse one noise draw every epoch")
    t.add_argument("--batch-size", type=_positive_int, default=8192)
    t.add_argument("--max-epochs", type=_positive_int, default=1500)
    t.add_argument("--patience", type=_positive_int, default=100)
    t.add_argument("--checkpoint-every", type=_positive_int, default=1)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--hidden", type=_hidden, default=(500, 500, 500, 500))
    t.add_argument("--kernels", type=_positive_int, default=36)
    t.add_argument("--dtype", choices=("float32", "float64"), default="float64")
    t.add_argument("--history", help="history CSV path")
    t.add_argument("--state", help="resume-state path")
    t.add_argument("--resume", action="store_true", help="continue from the resume state")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="loss and per-layer error on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--noise", type=_on_off, default=True)
    e.add_argument("--epsilon", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("-o", "--out", help="scatter CSV path")
    e.set_defaults(func=cmd_evaluate)

    for name, func, hlp in (("invert", cmd_invert, "full inversion report for one curve"),
                            ("stats", cmd_stats, "posterior summary JSON on stdout")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--curve", required=True, help="CSV with header freq_hz,phase_vel_km_s")
        s.add_argument("--resample", choices=("linear",), help="interpolate onto the network grid")
        if name == "invert":
            s.add_argument("-o", "--out", required=True, help="report directory")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"seabed-mdn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
