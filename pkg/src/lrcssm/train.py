"""Cross-entropy training with Adam, early stopping and grid search."""

from __future__ import annotations

import copy
import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .backward import model_backward
from .data import Dataset, normalize_splits, split
from .errors import ConfigurationError
from .model import (ModelConfig, count_params, forward, init_params,
                    iter_named_arrays, map_arrays)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Search grid for the tuning protocol.
DEFAULT_GRID = {
    "lr": (1e-5, 1e-4, 1e-3),
    "hidden": (16, 64, 128),
    "state": (16, 64, 256),
    "blocks": (2, 4, 6),
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    grid: dict = field(default_factory=lambda: dict(DEFAULT_GRID))
    target_val_acc: float | None = None  # optional early exit for smoke runs
    shards: int = 1                      # data-parallel gradient shards

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("lr, batch_size, max_epochs must be positive")
        if self.patience < 0:
            raise ConfigurationError("patience must be >= 0")
        if self.shards < 1:
            raise ConfigurationError("shards must be >= 1")


@dataclass
class OptimState:
    m: object        # ModelParams-shaped first moments
    v: object        # ModelParams-shaped second moments
    step: int = 0


def init_optim(params) -> OptimState:
    return OptimState(m=map_arrays(np.zeros_like, params),
                      v=map_arrays(np.zeros_like, params), step=0)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-softmax at the true class; returns (loss, d_logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    d_logits = np.exp(log_probs)
    d_logits[rows, labels] -= 1.0
    d_logits /= n
    return loss, d_logits


def adam_step(params, grads, opt: OptimState, lr: float):
    """Standard Adam update with bias correction; mutates params in place."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    g_by_name = dict(iter_named_arrays(grads))
    m_by_name = dict(iter_named_arrays(opt.m))
    v_by_name = dict(iter_named_arrays(opt.v))
    for name, p_arr in iter_named_arrays(params):
        g = g_by_name[name]
        m = m_by_name[name]
        v = v_by_name[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p_arr -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params


def _add_grads(total, part, weight):
    for (_, dst), (_, src) in zip(iter_named_arrays(total), iter_named_arrays(part)):
        dst += weight * src
    return total


def batch_loss_and_grads(params, cfg, xs, ys, shards=1, pool=None):
    """Loss and parameter gradients for one minibatch.

    With shards > 1 the batch is cut into contiguous shards whose gradients
    are computed concurrently and reduced in shard order, so the reduction is
    deterministic for a fixed shard count.
    """
    n = xs.shape[0]
    if shards <= 1 or n < 2 * shards:
        logits, cache = forward(params, xs, cfg)
        loss, d_logits = cross_entropy(logits, ys)
        gs = model_backward(cache, d_logits)
        iters = [r.iterations for r in cache.solve_reports]
        return loss, gs.params, iters

    bounds = np.linspace(0, n, shards + 1).astype(int)
    pieces = [(xs[a:b], ys[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def one(piece):
        px, py = piece
        logits, cache = forward(params, px, cfg)
        loss, d_logits = cross_entropy(logits, py)
        gs = model_backward(cache, d_logits)
        iters = [r.iterations for r in cache.solve_reports]
        return loss, gs.params, len(px), iters

    if pool is None:
        results = [one(p) for p in pieces]
    else:
        results = list(pool.map(one, pieces))
    total = map_arrays(np.zeros_like, params)
    loss = 0.0
    iters = []
    for part_loss, part_grads, size, part_iters in results:
        w = size / n
        loss += w * part_loss
        _add_grads(total, part_grads, w)
        iters.extend(part_iters)
    return loss, total, iters


def accuracy(params, cfg: ModelConfig, ds: Dataset, batch_size=64) -> float:
    if ds.n_samples == 0:
        return float("nan")
    correct = 0
    for start in range(0, ds.n_samples, batch_size):
        xs = ds.sequences[start:start + batch_size]
        ys = ds.labels[start:start + batch_size]
        logits, _ = forward(params, xs, cfg)
        correct += int((logits.argmax(axis=1) == ys).sum())
    return correct / ds.n_samples


def train(model_cfg: ModelConfig, data, train_cfg: TrainConfig):
    """Epoch loop with early stopping on validation accuracy.

    data is (train_ds, val_ds).  Returns (best_params, history) where history
    is a list of per-epoch records {epoch, train_loss, val_acc,
    mean_solver_iters, wall_ms}.  A NaN loss aborts and returns the best
    checkpoint seen so far.
    """
    train_cfg.validate()
    train_ds, val_ds = data
    params = init_params(model_cfg)
    opt = init_optim(params)
    rng = np.random.default_rng(train_cfg.seed)
    pool = (ThreadPoolExecutor(max_workers=train_cfg.shards)
            if train_cfg.shards > 1 else None)

    best_params = copy.deepcopy(params)
    best_val = -np.inf
    stale = 0
    history = []
    try:
        for epoch in range(train_cfg.max_epochs):
            t0 = time.monotonic()
            order = rng.permutation(train_ds.n_samples)
            losses = []
            iter_counts = []
            diverged = False
            for start in range(0, len(order), train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                xs = train_ds.sequences[idx]
                ys = train_ds.labels[idx]
                loss, grads, iters = batch_loss_and_grads(
                    params, model_cfg, xs, ys, train_cfg.shards, pool)
                if not np.isfinite(loss):
                    diverged = True
                    break
                adam_step(params, grads, opt, train_cfg.lr)
                losses.append(loss)
                iter_counts.extend(iters)
            if diverged:
                history.append({"epoch": epoch, "train_loss": float("nan"),
                                "val_acc": float("nan"), "mean_solver_iters": 0.0,
                                "wall_ms": (time.monotonic() - t0) * 1e3,
                                "note": "diverged"})
                break
            val_acc = accuracy(params, model_cfg, val_ds)
            history.append({
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_acc": val_acc,
                "mean_solver_iters": float(np.mean(iter_counts)) if iter_counts else 0.0,
                "wall_ms": (time.monotonic() - t0) * 1e3,
            })
            if val_acc > best_val:
                best_val = val_acc
                best_params = copy.deepcopy(params)
                stale = 0
            else:
                stale += 1
                if stale > train_cfg.patience:
                    break
            if (train_cfg.target_val_acc is not None
                    and best_val >= train_cfg.target_val_acc):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return best_params, history


def grid_search(ds: Dataset, base_cfg: ModelConfig, train_cfg: TrainConfig,
                grid=None, split_seeds=(0, 1, 2, 3, 4),
                fractions=(0.7, 0.15, 0.15)):
    """Mean-validation-accuracy grid search over several random splits.

    Ties break toward smaller parameter count, then lower learning rate.
    Returns (best_point, table); each table row records the grid point, the
    per-seed validation accuracies and their mean/std.
    """
    grid = dict(DEFAULT_GRID) if grid is None else grid
    unknown = set(grid) - set(DEFAULT_GRID)
    if unknown:
        raise ConfigurationError(f"unknown grid keys {sorted(unknown)}")
    axes = {k: tuple(grid.get(k, DEFAULT_GRID[k])) for k in DEFAULT_GRID}
    table = []
    for lr, hidden, state, blocks in itertools.product(
            axes["lr"], axes["hidden"], axes["state"], axes["blocks"]):
        cfg = replace(base_cfg, hidden_dim=hidden, state_dim=state,
                      num_blocks=blocks)
        n_params = count_params(init_params(cfg))
        accs = []
        for seed in split_seeds:
            tr, va, te = split(ds, seed, fractions)
            tr, va = normalize_splits(tr, va)
            run_cfg = replace(train_cfg, lr=lr)
            best, history = train(replace(cfg, seed=seed), (tr, va), run_cfg)
            accs.append(max(h["val_acc"] for h in history))
        row = {"lr": lr, "hidden": hidden, "state": state, "blocks": blocks,
               "val_accs": accs, "mean_val_acc": float(np.mean(accs)),
               "std_val_acc": float(np.std(accs)), "param_count": n_params}
        table.append(row)
    best = max(table, key=lambda r: (r["mean_val_acc"], -r["param_count"], -r["lr"]))
    return best, table
