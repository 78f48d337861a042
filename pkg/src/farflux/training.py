"""Mini-batch training for both model arms, plus the uniform-footprint
baseline regressor used for comparison.

Determinism contract: per-epoch sample order and augmentation angles are
pure functions of (seed, epoch index), evaluation subsets are fixed up
front, and gradient accumulation order is fixed, so a (config, seed)
pair reproduces parameters bit-for-bit.

Early stopping watches every available validation split and stops once
none of them has improved for `patience` consecutive epochs; the
returned weights are the snapshot with the lowest val_site loss (ties
resolved toward the earlier epoch). When no sites are withheld the val
split plays that role.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import features, model as far_model, numerics, prep
from .errors import ConfigError, NumericError

_STREAM_ORDER = 100     # rng stream tags, combined with the run seed
_STREAM_AUGMENT = 500
_STREAM_EVALCAP = 700
_STREAM_BASELINE = 900


@dataclass
class TrainConfig:
    lam: float = 0.0
    entropy_sign: str = "prose"
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    augment: bool = True
    augment_right_angles: bool = False
    hidden_width: int = 64
    hidden_layers: int = 3
    samples_per_epoch: int = None   # per-epoch cap on training samples
    eval_sample_cap: int = 2048     # per-split cap for epoch-end losses

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.entropy_sign not in ("prose", "as_typeset"):
            raise ConfigError(f"unknown entropy_sign {self.entropy_sign!r}")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)   # dict per epoch
    best_epoch: dict = field(default_factory=dict)
    stopped_epoch: int = 0

    def to_frame(self):
        return pd.DataFrame(self.epochs)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def _eval_pairs(bundles, splits, which):
    """(bundle, index array) pairs for a named split."""
    out = []
    if which in ("val", "val_future", "test_future"):
        label = {"val": prep.VAL, "val_future": prep.VAL_FUTURE,
                 "test_future": prep.TEST_FUTURE}[which]
        for sid in sorted(bundles):
            b = bundles[sid]
            if b.labels is None:
                continue
            idx = np.flatnonzero((b.labels == label) & b.trainable)
            if idx.size:
                out.append((b, idx))
    elif which in ("val_site", "test_site"):
        for sid in splits.sites_with_role(which):
            b = bundles[sid]
            idx = np.flatnonzero(b.trainable)
            if idx.size:
                out.append((b, idx))
    else:
        raise ConfigError(f"unknown split {which!r}")
    return out


def _cap_pairs(pairs, cap, rng):
    if cap is None:
        return pairs
    total = sum(len(idx) for _, idx in pairs)
    if total <= cap:
        return pairs
    keep = rng.choice(total, size=cap, replace=False)
    keep.sort()
    out = []
    offset = 0
    for b, idx in pairs:
        sel = keep[(keep >= offset) & (keep < offset + len(idx))] - offset
        if sel.size:
            out.append((b, idx[sel]))
        offset += len(idx)
    return out


def evaluate_loss(model, pairs, lam=None, block=256, ws=None, bufs=None):
    """Mean Eq-style loss (squared error + entropy term) over the pairs,
    without gradients."""
    lam = model.lam if lam is None else lam
    sgn = 1.0 if model.entropy_sign == "prose" else -1.0
    if ws is None:
        ws = far_model.FarWorkspace(model)
    total = 0.0
    count = 0
    for b, idx in pairs:
        if bufs is None:
            bufs = features.AssemblyBuffers(block, model.grid_dims,
                                            b.bands_n.shape[2])
        for c0 in range(0, len(idx), block):
            sub = idx[c0:c0 + block]
            xf, xp, y_n = features.assemble_far(b, sub, model.grid_dims,
                                                model.norm, bufs=bufs)
            yhat, ent = far_model.far_batch_predict(model, xf, xp, ws=ws)
            total += float(((yhat - y_n) ** 2).sum() + sgn * lam * ent.sum())
            count += len(sub)
    if count == 0:
        raise ConfigError("empty evaluation split")
    return total / count


def _training_pool(bundles):
    sids, idxs = [], []
    for sid in sorted(bundles):
        b = bundles[sid]
        if b.labels is None:
            continue
        sel = np.flatnonzero((b.labels == prep.TRAIN) & b.trainable)
        sids.append(np.full(sel.size, len(sids)))
        idxs.append(sel)
    order = sorted(sid for sid in bundles if bundles[sid].labels is not None)
    if not idxs or not sum(len(i) for i in idxs):
        raise ConfigError("no training samples")
    return order, np.concatenate(sids), np.concatenate(idxs)


class _EarlyStop:
    def __init__(self, patience):
        self.patience = patience
        self.best = {}
        self.stall = 0

    def update(self, losses):
        improved = False
        for k, v in losses.items():
            if v is None:
                continue
            if k not in self.best or v < self.best[k]:
                self.best[k] = v
                improved = True
        self.stall = 0 if improved else self.stall + 1
        return self.stall >= self.patience


def train(dataset, splits, cfg, log_stream=None):
    """Train the two-arm model; returns (FarModel, TrainLog)."""
    cfg.validate()
    log_stream = sys.stderr if log_stream is None else log_stream
    norm = features.fit_norm_stats(dataset, splits)
    bundles = features.build_bundles(dataset, norm, splits)
    model = far_model.build_far_model(
        dataset.band_names, dataset.grid_dims, dataset.pixel_size_m,
        dataset.tower_rc, norm, cfg.lam, cfg.seed,
        hidden_width=cfg.hidden_width, hidden_layers=cfg.hidden_layers,
        entropy_sign=cfg.entropy_sign)

    site_order, pool_site, pool_idx = _training_pool(bundles)
    site_bundles = [bundles[sid] for sid in site_order]
    monitored = {}
    for name in ("val", "val_site", "val_future"):
        pairs = _eval_pairs(bundles, splits, name)
        if pairs:
            rng = np.random.default_rng([cfg.seed, _STREAM_EVALCAP,
                                         len(monitored)])
            monitored[name] = _cap_pairs(pairs, cfg.eval_sample_cap, rng)
    if not monitored:
        raise ConfigError("no validation samples for early stopping")
    select_on = "val_site" if "val_site" in monitored else "val"

    params = far_model.model_parameters(model)
    state = numerics.adam_init(params, lr=cfg.learning_rate)
    stopper = _EarlyStop(cfg.patience)
    log = TrainLog()
    best_select = np.inf
    best_snapshot = far_model.snapshot_parameters(model)
    log.best_epoch[select_on] = 0

    ws = far_model.FarWorkspace(model)
    d_bands = len(dataset.band_names)
    bufs = features.AssemblyBuffers(cfg.batch_size, model.grid_dims, d_bands)
    eval_bufs = features.AssemblyBuffers(256, model.grid_dims, d_bands)

    n_pool = len(pool_idx)
    for epoch in range(1, cfg.max_epochs + 1):
        rng_o = np.random.default_rng([cfg.seed, _STREAM_ORDER, epoch])
        if cfg.samples_per_epoch and cfg.samples_per_epoch < n_pool:
            take = rng_o.choice(n_pool, size=cfg.samples_per_epoch,
                                replace=False)
        else:
            take = rng_o.permutation(n_pool)
        if cfg.augment:
            rng_a = np.random.default_rng([cfg.seed, _STREAM_AUGMENT, epoch])
            if cfg.augment_right_angles:
                angles = rng_a.integers(0, 4, size=take.size) * 90.0
            else:
                angles = rng_a.uniform(0.0, 360.0, size=take.size)
        loss_sum = 0.0
        for b0 in range(0, take.size, cfg.batch_size):
            sel = take[b0:b0 + cfg.batch_size]
            # fill one site at a time; batches stay mixed across sites
            pos = 0
            for s in np.unique(pool_site[sel]):
                mask = pool_site[sel] == s
                ang = angles[b0:b0 + cfg.batch_size][mask] \
                    if cfg.augment else None
                pos = features.fill_far_batch(
                    bufs, pos, site_bundles[s], pool_idx[sel[mask]],
                    model.grid_dims, norm, angles_deg=ang,
                    exact_right_angles=cfg.augment_right_angles)
            loss, grads = far_model.far_loss_gradients(
                model, bufs.xf[:pos], bufs.xp[:pos], bufs.y[:pos], ws=ws)
            numerics.adam_step(params, grads, state)
            loss_sum += loss * len(sel)
        train_loss = loss_sum / take.size

        row = {"epoch": epoch, "train": train_loss}
        for name in ("val", "val_site", "val_future"):
            row[name] = evaluate_loss(model, monitored[name], ws=ws,
                                      bufs=eval_bufs) \
                if name in monitored else None
        log.epochs.append(row)
        print(f"epoch {epoch}: " + " ".join(
            f"{k}={v:.6f}" for k, v in row.items()
            if k != "epoch" and v is not None), file=log_stream)

        if row[select_on] < best_select:
            best_select = row[select_on]
            best_snapshot = far_model.snapshot_parameters(model)
            log.best_epoch[select_on] = epoch
        if stopper.update({k: row[k] for k in monitored}):
            break
    log.stopped_epoch = len(log.epochs)
    far_model.restore_parameters(model, best_snapshot)
    return model, log


def train_baseline(dataset, splits, cfg, norm=None, log_stream=None):
    """Plain MLP on 5x5-window band means + angles + drivers (the
    tree-model stand-in). Shares the split/early-stop protocol."""
    from .evaluation import BaselineModel

    cfg.validate()
    log_stream = sys.stderr if log_stream is None else log_stream
    if norm is None:
        norm = features.fit_norm_stats(dataset, splits)
    bundles = features.build_bundles(dataset, norm, splits)
    site_order, pool_site, pool_idx = _training_pool(bundles)
    site_bundles = [bundles[sid] for sid in site_order]

    d_in = len(dataset.band_names) + 7
    rng = np.random.default_rng([cfg.seed, _STREAM_BASELINE])
    mlp = numerics.init_mlp((d_in,) + (cfg.hidden_width,) * cfg.hidden_layers
                            + (1,), rng)
    bmodel = BaselineModel(mlp, norm, tuple(dataset.band_names),
                           dataset.grid_dims, dataset.pixel_size_m,
                           dataset.tower_rc, cfg.seed)

    monitored = {}
    for name in ("val", "val_site", "val_future"):
        pairs = _eval_pairs(bundles, splits, name)
        if pairs:
            rng_c = np.random.default_rng([cfg.seed, _STREAM_EVALCAP,
                                           10 + len(monitored)])
            monitored[name] = _cap_pairs(pairs, cfg.eval_sample_cap, rng_c)
    select_on = "val_site" if "val_site" in monitored else "val"

    def mse_on(pairs):
        tot, cnt = 0.0, 0
        for b, idx in pairs:
            x, y_n = features.assemble_baseline(b, idx)
            pred = numerics.mlp_forward_batch(mlp, x)[:, 0]
            tot += float(((pred - y_n) ** 2).sum())
            cnt += len(idx)
        return tot / cnt

    params = []
    for w_arr, b_arr in zip(mlp.weights, mlp.biases):
        params.extend((w_arr, b_arr))
    state = numerics.adam_init(params, lr=cfg.learning_rate)
    stopper = _EarlyStop(cfg.patience)
    log = TrainLog()
    best_select = np.inf
    best_snapshot = [p.copy() for p in params]
    log.best_epoch[select_on] = 0

    n_pool = len(pool_idx)
    for epoch in range(1, cfg.max_epochs + 1):
        rng_o = np.random.default_rng([cfg.seed, _STREAM_BASELINE,
                                       _STREAM_ORDER, epoch])
        if cfg.samples_per_epoch and cfg.samples_per_epoch < n_pool:
            take = rng_o.choice(n_pool, size=cfg.samples_per_epoch,
                                replace=False)
        else:
            take = rng_o.permutation(n_pool)
        loss_sum = 0.0
        for b0 in range(0, take.size, cfg.batch_size):
            sel = take[b0:b0 + cfg.batch_size]
            xs, ys = [], []
            for s in np.unique(pool_site[sel]):
                rows = sel[pool_site[sel] == s]
                x, y_n = features.assemble_baseline(site_bundles[s],
                                                    pool_idx[rows])
                xs.append(x)
                ys.append(y_n)
            x = np.concatenate(xs) if len(xs) > 1 else xs[0]
            y_n = np.concatenate(ys) if len(ys) > 1 else ys[0]
            pred, acts = numerics.mlp_forward_batch(mlp, x,
                                                    keep_activations=True)
            err = pred[:, 0] - y_n
            loss = float((err ** 2).mean())
            grads_pairs, _ = numerics._backward_from_acts(
                mlp, acts, (2.0 / len(sel)) * err[:, None])
            grads = []
            for dw, db in grads_pairs:
                grads.extend((dw, db))
            numerics.adam_step(params, grads, state)
            loss_sum += loss * len(sel)
        row = {"epoch": epoch, "train": loss_sum / take.size}
        for name in ("val", "val_site", "val_future"):
            row[name] = mse_on(monitored[name]) if name in monitored else None
        log.epochs.append(row)
        print(f"baseline epoch {epoch}: " + " ".join(
            f"{k}={v:.6f}" for k, v in row.items()
            if k != "epoch" and v is not None), file=log_stream)
        if row[select_on] < best_select:
            best_select = row[select_on]
            best_snapshot = [p.copy() for p in params]
            log.best_epoch[select_on] = epoch
        if stopper.update({k: row[k] for k in monitored}):
            break
    log.stopped_epoch = len(log.epochs)
    for p, s in zip(params, best_snapshot):
        p[...] = s
    return bmodel, log
