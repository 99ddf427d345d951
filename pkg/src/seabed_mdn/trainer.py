"""Mini-batch Adam training with noise injection and early stopping."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, GridMismatch, NoiseModel, add_noise
from .forward_dispersion import FrequencyGrid
from .mdn_core import MdnConfig, NetworkParams, backward, init_params, loss

log = logging.getLogger(__name__)

# spawn keys that keep the validation noise and init streams apart from epochs
_VAL_KEY = 2**32 - 1
_INIT_KEY = 2**32 - 2
_FIXED_NOISE_KEY = 2**32 - 3


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """``noise=None`` trains on noiseless inputs.  With ``fixed_noise`` one
    noise realization is reused every epoch instead of a fresh draw."""

    batch_size: int = 8192
    max_epochs: int = 1500
    checkpoint_every: int = 1
    patience: int = 100
    noise: NoiseModel | None = field(default_factory=NoiseModel)
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    fixed_noise: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.checkpoint_every < 1 or self.max_epochs < 1:
            raise ValueError("checkpoint_every and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = None if self.noise is None else self.noise.epsilon
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["noise"] = None if d.get("noise") is None else NoiseModel(float(d["noise"]))
        d["adam"] = AdamConfig(**d.get("adam", {}))
        return cls(**d)


@dataclass
class TrainHistory:
    """One row per epoch; ``val_loss`` is NaN on epochs without a checkpoint."""

    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""

    def record(self, epoch: int, train_loss: float, val_loss: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in zip(self.epochs, self.train_loss, self.val_loss):
                w.writerow([row[0], repr(row[1]), repr(row[2])])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls(**d)


class EarlyStopping:
    """Stop once ``patience`` checkpoints pass without a new best."""

    def __init__(self, patience: int, checkpoint_every: int = 1):
        self.patience = patience
        self.checkpoint_every = checkpoint_every
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.stale = val_loss, epoch, 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


class Adam:
    def __init__(self, n: int, cfg: AdamConfig):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        self.m *= c.beta1
        self.m += (1 - c.beta1) * grad
        self.v *= c.beta2
        self.v += (1 - c.beta2) * grad**2
        lr_t = c.lr * math.sqrt(1 - c.beta2**self.t) / (1 - c.beta1**self.t)
        flat -= (lr_t * self.m / (np.sqrt(self.v) + c.eps)).astype(flat.dtype)


def check_grids(*grids: FrequencyGrid | None) -> None:
    known = [g for g in grids if g is not None]
    for g in known[1:]:
        if not known[0].matches(g):
            raise GridMismatch("datasets were generated on different frequency grids")


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def evaluate_loss(params: NetworkParams, ds: Dataset, noise: NoiseModel | None = None,
                  seed: int = 0, batch_size: int = 8192) -> float:
    """Mean negative log-likelihood over ``ds``, optionally on noisy inputs."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    d = ds.d if noise is None else add_noise(ds.d, noise, np.random.default_rng(seed))
    total = 0.0
    for a in range(0, len(ds), batch_size):
        b = min(a + batch_size, len(ds))
        total += loss(params, d[a:b], ds.m[a:b]) * (b - a)
    return total / len(ds)


def input_scaling(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = d.mean(axis=0)
    scale = d.std(axis=0)
    return shift, np.where(scale > 0, scale, 1.0)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-for-bit."""

    params: NetworkParams
    best_params: NetworkParams
    adam: Adam
    history: TrainHistory
    stopper: EarlyStopping
    epoch: int

    def save(self, path) -> None:
        meta = {
            "cfg": self.params.cfg.to_dict(),
            "history": self.history.to_dict(),
            "stopper": [self.stopper.best, self.stopper.best_epoch, self.stopper.stale],
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "dtype": str(self.params.flat.dtype),
        }
        with open(path, "wb") as fh:
            np.savez(fh, flat=self.params.flat, best=self.best_params.flat,
                     shift=self.params.input_shift, scale=self.params.input_scale,
                     m=self.adam.m, v=self.adam.v, meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path, tc: TrainConfig) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            cfg = MdnConfig.from_dict(meta["cfg"])
            params = NetworkParams(cfg, z["flat"].copy(), z["shift"].copy(), z["scale"].copy())
            best = NetworkParams(cfg, z["best"].copy(), z["shift"].copy(), z["scale"].copy())
            adam = Adam(params.flat.size, tc.adam)
            adam.m, adam.v, adam.t = z["m"].copy(), z["v"].copy(), meta["adam_t"]
        stopper = EarlyStopping(tc.patience, tc.checkpoint_every)
        stopper.best, stopper.best_epoch, stopper.stale = meta["stopper"]
        return cls(params, best, adam, TrainHistory.from_dict(meta["history"]), stopper, meta["epoch"])


def train(train_set: Dataset, val_set: Dataset, net_cfg: MdnConfig, tc: TrainConfig = TrainConfig(),
          train_grid: FrequencyGrid | None = None, val_grid: FrequencyGrid | None = None,
          state_path=None, resume: bool = False) -> tuple[NetworkParams, TrainHistory]:
    """Fit an MDN and return the parameters with the lowest validation loss.

    Epochs are numbered from 1.  All randomness of epoch ``e`` comes from a
    stream keyed on (seed, e), so a run resumed from ``state_path`` continues
    exactly as an uninterrupted one would.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    check_grids(train_grid, val_grid)
    if train_set.d.shape[1] != net_cfg.input_dim or train_set.m.shape[1] != net_cfg.target_dim:
        raise ValueError("dataset dimensions do not match the network configuration")
    dtype = np.dtype(tc.dtype)

    if resume:
        st = TrainState.load(state_path, tc)
        st.params = st.params.astype(dtype)
    else:
        shift, scale = input_scaling(train_set.d)
        params = init_params(net_cfg, _rng(tc.seed, _INIT_KEY), mu_bias=train_set.m.mean(axis=0),
                             input_shift=shift, input_scale=scale, dtype=dtype)
        st = TrainState(params, params.copy(), Adam(params.flat.size, tc.adam), TrainHistory(),
                        EarlyStopping(tc.patience, tc.checkpoint_every), 0)
    st.stopper.patience = tc.patience

    val_d = val_set.d if tc.noise is None else add_noise(val_set.d, tc.noise, _rng(tc.seed, _VAL_KEY))
    fixed_d = None
    if tc.noise is not None and tc.fixed_noise:
        fixed_d = add_noise(train_set.d, tc.noise, _rng(tc.seed, _FIXED_NOISE_KEY))
    val_ds = Dataset(val_d, val_set.m)

    n = len(train_set)
    hist = st.history
    if hist.stop_reason == "early_stopping":
        return st.best_params.astype(np.float64), hist
    hist.stop_reason = ""
    while st.epoch < tc.max_epochs:
        epoch = st.epoch + 1
        rng = _rng(tc.seed, epoch)
        perm = rng.permutation(n)
        if fixed_d is not None:
            d_epoch = fixed_d
        elif tc.noise is not None:
            d_epoch = add_noise(train_set.d, tc.noise, rng)
        else:
            d_epoch = train_set.d
        total = 0.0
        for a in range(0, n, tc.batch_size):
            idx = perm[a:a + tc.batch_size]
            batch_loss, grad = backward(st.params, d_epoch[idx], train_set.m[idx])
            if not (math.isfinite(batch_loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(epoch)
            st.adam.step(st.params.flat, grad)
            total += batch_loss * len(idx)
        train_loss = total / n
        val_loss = math.nan
        stop = False
        if epoch % tc.checkpoint_every == 0:
            val_loss = evaluate_loss(st.params, val_ds)
            if not math.isfinite(val_loss):
                raise NonFiniteLoss(epoch)
            improved, stop = st.stopper.update(epoch, val_loss)
            if improved:
                st.best_params = st.params.copy()
                hist.best_epoch, hist.best_val_loss = epoch, val_loss
        hist.record(epoch, train_loss, val_loss)
        st.epoch = epoch
        log.info("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if stop:
            hist.stop_reason = "early_stopping"
        elif st.epoch >= tc.max_epochs:
            hist.stop_reason = "max_epochs"
        if state_path is not None and (stop or epoch % tc.checkpoint_every == 0 or st.epoch >= tc.max_epochs):
            st.save(state_path)
        if stop:
            break
    if not hist.stop_reason:
        hist.stop_reason = "max_epochs"
    if hist.best_epoch == 0:
        # no checkpoint epoch was reached; fall back to the final parameters
        st.best_params = st.params.copy()
    return st.best_params.astype(np.float64), hist
