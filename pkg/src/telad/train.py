"""Dual-head training loop with early stopping on the validation total loss."""

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import assemble_batches, enumerate_windows
from .errors import DataError
from .model import forward, init_model, predict

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_forecast", "train_recon", "val_forecast", "val_recon", "val_total")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    patience: int = 10
    S: int = 1
    clip_norm: float = 5.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    val_batch_size: int = 256


@dataclass
class TrainRun:
    config: dict
    seed: int
    curves: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val(self):
        return min(r["val_total"] for r in self.curves) if self.curves else float("inf")

    def best_so_far(self):
        return np.minimum.accumulate([r["val_total"] for r in self.curves]).tolist()

    def minima(self):
        """Minimum over epochs of every logged validation metric."""
        keys = ("val_forecast", "val_recon", "val_total")
        return {k: float(min(r[k] for r in self.curves)) for k in keys}

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.curves:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])

    def to_dict(self):
        return asdict(self)


def compute_loss(forecast, recon, batch, gamma=1.0):
    """``(total, l_forecast, l_recon)``; each term is an RMSE over all cells."""
    lf = ad.sqrt(ad.mean(ad.square(forecast - Tensor(batch.targets))))
    lr = ad.sqrt(ad.mean(ad.square(recon - Tensor(batch.inputs))))
    total = lf + lr * gamma if gamma != 0 else lf
    return total, lf, lr


def evaluate_loss(ds, index, state, batch_size=256):
    """Forecast/recon RMSE over a whole window set (not averaged per batch)."""
    sf = sr = 0.0
    nf = nr = 0
    for batch in assemble_batches(ds, index, batch_size):
        f, r = predict(batch, state)
        sf += float(np.square(f - batch.targets).sum())
        sr += float(np.square(r - batch.inputs).sum())
        nf += batch.targets.size
        nr += batch.inputs.size
    lf, lr = np.sqrt(sf / nf), np.sqrt(sr / nr)
    return float(lf + state.config.gamma * lr), float(lf), float(lr)


def train(ds, splits, model_cfg, train_cfg, seed=0, log_path=None, state=None):
    """Fit the backbone; returns the best-validation ``ModelState`` and the run record.

    Stops when the validation total has not improved for ``patience`` epochs
    (``patience=0`` behaves like 1: one non-improving epoch, then stop).
    """
    index = enumerate_windows(ds, splits, model_cfg.L, model_cfg.H, train_cfg.S, blocks=("train", "val"))
    tr, va = index.select("train"), index.select("val")
    if len(tr) == 0 or len(va) == 0:
        raise DataError(f"need train and val windows, got {len(tr)} train / {len(va)} val "
                        f"(L={model_cfg.L}, H={model_cfg.H}, S={train_cfg.S})")
    rng = np.random.default_rng(seed)
    state = state or init_model(model_cfg, seed)
    params = state.parameters()
    opt = ad.Adam(params, lr=model_cfg.lr, betas=tuple(train_cfg.betas), eps=train_cfg.eps)
    run = TrainRun(config={"model": model_cfg.to_dict(), "train": asdict(train_cfg)}, seed=seed)
    best, stale = None, 0
    for epoch in range(train_cfg.epochs):
        shuffle_seed = int(rng.integers(2**31))
        sums, nb = np.zeros(2), 0
        for batch in assemble_batches(ds, tr, train_cfg.batch_size, shuffle_seed):
            f, r = forward(batch, state, train_mode=True, rng=rng)
            total, lf, lr = compute_loss(f, r, batch, model_cfg.gamma)
            ad.backward(total, leaves=params)
            ad.clip_grad_norm(params, train_cfg.clip_norm)
            opt.step()
            sums += (lf.data, lr.data)
            nb += 1
        vt, vf, vr = evaluate_loss(ds, va, state, train_cfg.val_batch_size)
        run.curves.append({
            "epoch": epoch, "train_forecast": float(sums[0] / nb), "train_recon": float(sums[1] / nb),
            "val_forecast": vf, "val_recon": vr, "val_total": vt,
        })
        log.info("epoch %d train %.5f/%.5f val %.5f/%.5f total %.5f",
                 epoch, sums[0] / nb, sums[1] / nb, vf, vr, vt)
        if best is None or vt < run.curves[run.best_epoch]["val_total"]:
            best, stale, run.best_epoch = state.copy(), 0, epoch
        else:
            stale += 1
            if stale >= max(train_cfg.patience, 1):
                run.stopped_early = True
                break
    best.meta.update({"best_epoch": run.best_epoch, "seed": seed})
    best.rng_seed = seed
    if log_path is not None:
        run.write_log(log_path)
    return best, run
