"""Command-line interface.

Subcommands: train, eval, gridsearch, bench, verify, synth-gen.  Reports land
in the --out directory as line-delimited JSON and CSV with rendered PNG
figures next to them.

Exit codes: 0 success, 1 runtime failure (including failed verification),
2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench, verify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import (SYNTH_KINDS, load_dataset, normalize_splits, save_ts,
                   split, synth_task)
from .errors import (ConfigurationError, LrcError, NumericError, ParseError,
                     UsageError, ValidationError)
from .model import ModelConfig, init_params
from .reports import (ensure_dir, save_decay_curve, save_runtime_scaling,
                      save_training_curves, write_csv, write_jsonl)
from .solver import SolverConfig
from .train import accuracy, grid_search, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("LRC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"LRC_THREADS={env!r} is not an integer")
    return 1


def _load_run_data(cfg):
    """Dataset from data.path or a synthetic generator, per the config."""
    if cfg["data.path"]:
        return load_dataset(cfg["data.path"])
    if cfg["data.synth_kind"]:
        return synth_task(cfg["data.synth_kind"], cfg["data.synth_t"],
                          cfg["data.synth_p"], cfg["data.synth_n"],
                          cfg["data.synth_seed"])
    raise ConfigurationError("config needs data.path or data.synth_kind")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = ensure_dir(args.out)
    ds = _load_run_data(cfg)
    tr, va, te = split(ds, cfg["data.split_seed"], cfg["data.fractions"])
    if cfg["data.normalize"]:
        tr, va, te = normalize_splits(tr, va, te)
    model_cfg = cfg.model_config(input_dim=ds.n_channels,
                                 num_classes=ds.class_count)
    train_cfg = cfg.train_config()
    train_cfg.shards = max(train_cfg.shards, _threads(args))
    best, history = train(model_cfg, (tr, va), train_cfg)

    save_checkpoint(os.path.join(out, "checkpoint.bin"), model_cfg, best)
    write_jsonl(os.path.join(out, "metrics.jsonl"), history)
    write_csv(os.path.join(out, "metrics.csv"), history)
    save_training_curves(history, os.path.join(out, "training_curves.png"))
    with open(os.path.join(out, "config_resolved.txt"), "w") as fh:
        fh.write("\n".join(cfg.resolved_lines()) + "\n")
    test_acc = accuracy(best, model_cfg, te) if te.n_samples else float("nan")
    print(f"trained {len(history)} epochs; "
          f"best val acc {max(h['val_acc'] for h in history):.4f}; "
          f"test acc {test_acc:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model_cfg, params = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]
    fractions = tuple(float(f) for f in args.fractions.split(","))
    accs = []
    for seed in seeds:
        tr, va, te = split(ds, seed, fractions)
        if not args.no_normalize:
            tr, va, te = normalize_splits(tr, va, te)
        accs.append(accuracy(params, model_cfg, te))
    mean = float(np.mean(accs))
    std = float(np.std(accs))
    print(f"test accuracy over {len(seeds)} split seed(s): "
          f"{mean:.4f} +- {std:.4f}")
    for seed, acc in zip(seeds, accs):
        print(f"  seed {seed}: {acc:.4f}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    cfg = load_config(args.config)
    out = ensure_dir(args.out)
    ds = _load_run_data(cfg)
    model_cfg = cfg.model_config(input_dim=ds.n_channels,
                                 num_classes=ds.class_count)
    train_cfg = cfg.train_config()
    train_cfg.shards = max(train_cfg.shards, _threads(args))
    seeds = cfg["data.seeds"]
    best, table = grid_search(ds, model_cfg, train_cfg, grid=train_cfg.grid,
                              split_seeds=seeds, fractions=cfg["data.fractions"])
    write_jsonl(os.path.join(out, "grid.jsonl"), table)
    write_csv(os.path.join(out, "grid.csv"), table)
    with open(os.path.join(out, "best.json"), "w") as fh:
        json.dump(best, fh, indent=2, sort_keys=True)
    print("best grid point: "
          f"lr={best['lr']} hidden={best['hidden']} state={best['state']} "
          f"blocks={best['blocks']} mean val acc {best['mean_val_acc']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = ensure_dir(args.out)
    t_lens = [int(t) for t in args.t_lens.split(",")]
    threads_list = sorted({1, _threads(args)})
    rows = [c.as_record() for c in bench.runtime_scaling(
        t_lens, threads_list, state_dim=args.state_dim, seed=args.seed)]
    depth = bench.scan_depth_table(t_lens, seed=args.seed)

    cfg = ModelConfig(input_dim=4, hidden_dim=args.state_dim,
                      state_dim=args.state_dim, num_blocks=2, num_classes=2,
                      solver=SolverConfig(tol=1e-6))
    params = init_params(cfg)
    batch = np.random.default_rng(args.seed).standard_normal((2, 64, 4))
    measured, iters = bench.measured_flops(params, cfg, batch)
    estimate = bench.flop_estimate(cfg, 64, 2, newton_iters=max(int(round(iters)), 1))
    flop_rows = [{"measured_mults": measured, "estimate_mults": estimate,
                  "ratio": measured / estimate if estimate else float("inf"),
                  "mean_newton_iters": iters}]

    write_jsonl(os.path.join(out, "runtime.jsonl"), rows)
    write_csv(os.path.join(out, "runtime.csv"), rows)
    write_jsonl(os.path.join(out, "scan_depth.jsonl"), depth)
    write_csv(os.path.join(out, "scan_depth.csv"), depth)
    write_jsonl(os.path.join(out, "flops.jsonl"), flop_rows)
    write_csv(os.path.join(out, "flops.csv"), flop_rows)
    save_runtime_scaling(rows, os.path.join(out, "runtime_scaling.png"))
    print(f"bench outputs in {out}")
    for r in rows:
        print(f"  T={r['t_len']:>6} threads={r['threads']} "
              f"seq {r['seq_wall_s']*1e3:8.2f} ms  par {r['par_wall_s']*1e3:8.2f} ms "
              f"speedup {r['speedup']:.2f}x  iters {r['newton_iters']}")
    return EXIT_OK


SUITES = ("all", "stability", "solver", "gradients")


def cmd_verify(args) -> int:
    results = []
    if args.suite in ("all", "stability"):
        results.extend(verify.stability_suite(trials=args.trials, seed=args.seed))
    if args.suite in ("all", "solver"):
        results.extend(verify.solver_suite(seed=args.seed))
    if args.suite in ("all", "gradients"):
        results.extend(verify.gradients_suite(seed=args.seed))
    records = [r.as_record() for r in results]
    for rec in records:
        status = "PASS" if rec["passed"] else "FAIL"
        detail = {k: v for k, v in rec.items()
                  if k not in ("check", "passed", "curve_norms", "curve_bound")}
        print(f"[{status}] {rec['check']}: {json.dumps(detail, sort_keys=True)}")
    if args.out:
        out = ensure_dir(args.out)
        slim = [{k: v for k, v in rec.items()
                 if k not in ("curve_norms", "curve_bound")} for rec in records]
        write_jsonl(os.path.join(out, "verify.jsonl"), slim)
        write_csv(os.path.join(out, "verify.csv"), slim)
        for rec in records:
            if rec["check"] == "gradient_decay" and "curve_norms" in rec:
                save_decay_curve(rec["curve_norms"], rec["curve_bound"],
                                 os.path.join(out, "gradient_decay.png"))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_synth(args) -> int:
    ds = synth_task(args.kind, args.length, args.channels, args.samples,
                    args.seed, signal=args.signal)
    save_ts(ds, args.out, problem_name=args.kind)
    print(f"wrote {ds.n_samples} sequences (T={ds.seq_len}, p={ds.n_channels}) "
          f"to {args.out}")
    return EXIT_OK


def _config_key_epilog() -> str:
    from .config import KEY_TABLE
    lines = ["config file keys (key=value, unknown keys rejected):"]
    for key, (_, default) in KEY_TABLE.items():
        shown = "unset" if default is None else default
        if isinstance(shown, tuple):
            shown = ",".join(str(v) for v in shown)
        lines.append(f"  {key:24s} default: {shown}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lrcssm",
        description="Nonlinear diagonal state-space sequence classifier with a "
                    "parallel-in-time solver",
        epilog=_config_key_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help="worker pool cap (env LRC_THREADS)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="test accuracy of a checkpoint, mean +- std over seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help=".ts or .csv dataset")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma list of split seeds")
    p.add_argument("--fractions", default="0.7,0.15,0.15")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gridsearch", help="grid search over validation accuracy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_gridsearch)

    p = sub.add_parser("bench", help="runtime scaling, scan depth and cost-model check")
    p.add_argument("--out", required=True)
    p.add_argument("--t-lens", default="256,1024,4096,16384", dest="t_lens")
    p.add_argument("--state-dim", type=int, default=16, dest="state_dim")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run stability/solver/gradient checks")
    p.add_argument("--suite", choices=SUITES, default="all")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional report directory")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("synth-gen", help="generate a synthetic .ts dataset")
    p.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    p.add_argument("--length", type=int, required=True, help="sequence length T")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--signal", type=float, default=0.5,
                   help="early-window level shift for sign_of_sum")
    p.add_argument("--out", required=True, help="output .ts path")
    p.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, ValidationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, UsageError, LrcError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
