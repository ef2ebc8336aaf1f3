"""AdamW with cosine annealing, and the epoch loop with best-val selection."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from .corpus import EmbeddingStore
from .errors import DivergedLoss, NonFiniteGradient
from .loss import Batch, Head, LossConfig, batch_loss
from .pairing import TupleSet, sample_all
from .rng import stream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 1024
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 42
    lr_min: float = 0.0
    k_mine: int = 8
    ood_batch: int = 32
    resample_per_epoch: bool = True

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def cosine_lr(t: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimState:
    m: M.Params
    v: M.Params
    step: int = 0

    @classmethod
    def zeros_like(cls, params: M.Params, names) -> "OptimState":
        return cls({k: np.zeros_like(params[k]) for k in names}, {k: np.zeros_like(params[k]) for k in names})


def adamw_step(params: M.Params, grads: M.Params, state: OptimState, lr: float, cfg: TrainConfig) -> None:
    """One in-place AdamW update of the parameters tracked by ``state``.

    The global gradient norm is clipped to ``cfg.grad_clip`` first; weight
    decay is decoupled (``theta *= 1 - lr * wd``) from the adaptive step.
    """
    names = list(state.m)
    for k in names:
        if not np.all(np.isfinite(grads[k])):
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in names))
    clip = 1.0
    if cfg.grad_clip > 0 and norm > cfg.grad_clip:
        clip = cfg.grad_clip / norm
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k in names:
        g = grads[k] * clip
        state.m[k] *= b1
        state.m[k] += (1.0 - b1) * g
        state.v[k] *= b2
        state.v[k] += (1.0 - b2) * g * g
        p = params[k]
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + cfg.eps_adam)


def trained_names(params: M.Params, head: Head) -> list[str]:
    prefix = ("proj.", "energy." if head is Head.EBM else "softmax.")
    return [k for k in params if k.startswith(prefix)]


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in w.fieldnames})

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"epochs": self.rows, "lr_trace": self.lr_trace}, indent=1))


def _loss_value(out) -> float:
    return float(out) if isinstance(out, float) else out.total


def _ood_rows(tset: TupleSet, n: int, seed: int, *keys) -> np.ndarray:
    pool = tset.ood_pool
    if pool.size == 0 or n <= 0:
        return np.zeros(0, dtype=np.int64)
    pick = stream(seed, "ood", *keys).choice(pool.size, size=min(n, pool.size), replace=False)
    return pool[np.sort(pick)]


def _batches(tset: TupleSet, order, mined, mask, size: int):
    a, p, h, hv = tset.arrays()
    for lo in range(0, len(order), size):
        idx = order[lo : lo + size]
        yield Batch(a[idx], p[idx], h[idx], hv[idx], mined[idx], mask[idx], np.zeros(0, dtype=np.int64))


def evaluate_loss(params, X, tset: TupleSet, loss_cfg: LossConfig, cfg: TrainConfig, key: str = "val") -> float:
    """Mean loss over ``tset`` with frozen params and fixed-seed negatives."""
    mined, mask = sample_all(tset, cfg.k_mine, cfg.seed ^ 0x5A5A, 0)
    total, count = 0.0, 0
    for b_i, batch in enumerate(_batches(tset, np.arange(len(tset)), mined, mask, cfg.batch_size)):
        batch.ood = _ood_rows(tset, cfg.ood_batch, cfg.seed, key, b_i)
        out, _ = batch_loss(params, X, batch, loss_cfg, need_grad=False)
        n = len(batch.anchors)
        total += _loss_value(out) * n
        count += n
    return total / count


@dataclass
class FitResult:
    best: M.Checkpoint
    history: History
    final_params: M.Params


def fit(
    store: EmbeddingStore,
    train_set: TupleSet,
    val_set: TupleSet,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    init: M.Params | None = None,
    config_hash: str = "",
    on_batch: Callable[[int, int, object], None] | None = None,
) -> FitResult:
    """Train ``loss_cfg.head`` and keep the checkpoint with the lowest val loss.

    History row 0 is the untrained model; rows 1..epochs follow each epoch.
    ``on_batch(epoch, batch_index, loss_output)`` sees every training batch
    before its update is applied.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("fit needs non-empty train and val tuple sets")
    X = store.vectors.astype(np.float64)
    params = M.copy_params(init) if init is not None else M.init_params(store.dim, cfg.seed)
    names = trained_names(params, loss_cfg.head)
    state = OptimState.zeros_like(params, names)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    history = History()
    train0 = evaluate_loss(params, X, train_set, loss_cfg, cfg, key="train-init")
    val0 = evaluate_loss(params, X, val_set, loss_cfg, cfg)
    history.rows.append({"epoch": 0, "train_loss": train0, "val_loss": val0, "lr": cosine_lr(0, total_steps, cfg.lr0, cfg.lr_min)})
    meta = {"head": loss_cfg.head.value}
    best = M.Checkpoint(M.copy_params(params), {}, {}, 0, 0, val0, config_hash, cfg.seed, meta)
    log.info("epoch 0: train %.5f val %.5f", train0, val0)

    for epoch in range(1, cfg.epochs + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        mined, mask = sample_all(train_set, cfg.k_mine, cfg.seed, epoch if cfg.resample_per_epoch else 0)
        total, lr = 0.0, cfg.lr0
        for b_i, batch in enumerate(_batches(train_set, order, mined, mask, cfg.batch_size)):
            batch.ood = _ood_rows(train_set, cfg.ood_batch, cfg.seed, "train", epoch, b_i)
            out, grads = batch_loss(params, X, batch, loss_cfg)
            value = _loss_value(out)
            if on_batch is not None:
                on_batch(epoch, b_i, out)
            if not np.isfinite(value):
                raise DivergedLoss(f"training loss became {value} in epoch {epoch}")
            lr = cosine_lr(state.step, total_steps, cfg.lr0, cfg.lr_min)
            history.lr_trace.append(lr)
            adamw_step(params, grads, state, lr, cfg)
            total += value * len(batch.anchors)
        train_loss = total / n
        val_loss = evaluate_loss(params, X, val_set, loss_cfg, cfg)
        history.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.info("epoch %d: train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr)
        if val_loss < best.val_loss:
            best = M.Checkpoint(
                M.copy_params(params),
                {k: v.copy() for k, v in state.m.items()},
                {k: v.copy() for k, v in state.v.items()},
                state.step,
                epoch,
                val_loss,
                config_hash,
                cfg.seed,
                meta,
            )
    return FitResult(best, history, params)
