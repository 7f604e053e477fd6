"""Delimited outputs and figures for the verify/bench/train report paths.

Every report lands as line-delimited JSON plus CSV, with a rendered PNG next
to them.  matplotlib uses the Agg backend so reports work headless.
"""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _json_default(value):
    # numpy scalars slip into witness dicts; store them as plain numbers
    if hasattr(value, "item"):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value)}")


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def write_csv(path, records) -> None:
    records = list(records)
    if not records:
        with open(path, "w", encoding="utf-8"):
            pass
        return
    keys = []
    for rec in records:
        for k in rec:
            if k not in keys:
                keys.append(k)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: _flat(rec.get(k)) for k in keys})


def _flat(value):
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return value


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def save_training_curves(history, path) -> None:
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(epochs, [h["train_loss"] for h in history], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [h["val_acc"] for h in history], marker=".", color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_decay_curve(norms, bound, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    taus = range(len(norms))
    ax.semilogy(taus, [max(n, 1e-300) for n in norms], label="adjoint norm")
    ax.semilogy(taus, [max(b, 1e-300) for b in bound], "--",
                label="geometric bound")
    ax.set_xlabel("step")
    ax.set_ylabel("L2 norm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_runtime_scaling(rows, path) -> None:
    by_threads = {}
    for r in rows:
        by_threads.setdefault(r["threads"], []).append(r)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    first = sorted(by_threads)[0]
    base = by_threads[first]
    ax.loglog([r["t_len"] for r in base], [r["seq_wall_s"] for r in base],
              "o-", label="sequential rollout")
    for threads, rws in sorted(by_threads.items()):
        label = "parallel solve" if threads == 1 else f"parallel, {threads} workers"
        ax.loglog([r["t_len"] for r in rws], [r["par_wall_s"] for r in rws],
                  "s--", label=label)
    ax.set_xlabel("sequence length T")
    ax.set_ylabel("wall seconds per solve")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
