"""Command line interface: ``nfp <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error, 2 internal error (including a
fast/naive disagreement detected by ``bench``).
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as M
from .errors import NfpError
from .gradcheck import check_metric_gradient, check_nfp_backward
from .layer import NfpConfig, affinity_forward, affinity_forward_naive, neighbor_offsets, nfp_pool
from .npy import read_npy, write_array_npy, write_npy
from .reporting import meta, write_json
from .synth import default_texture_specs, export_dataset, load_dataset, synth_dataset
from .tensor import load_image, write_gray_png

EXIT_OK, EXIT_VALIDATION, EXIT_INTERNAL = 0, 1, 2
EQUIVALENCE_TOL = 1e-5


class UsageError(Exception):
    pass


class CorrectnessAlarm(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _csv(kind=str):
    def parse(text):
        return [kind(v) for v in text.split(",") if v.strip()]
    return parse


def _size(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use BxCxHxW") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use BxCxHxW")
    return dims


def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of flag defaults (keys are flag names with underscores)")
    p.add_argument("--out", type=Path, required=out_required, default=None, help="output directory")


def _layer_flags(p, metric="cosine", dilation=1):
    p.add_argument("--metric", default=metric, help="similarity metric id")
    p.add_argument("--radius", type=int, default=1, help="neighborhood radius r")
    p.add_argument("--dilation", type=int, default=dilation, help="neighbor offset dilation D")


def _input_flags(p):
    p.add_argument("--input", type=Path, required=True, help=".npy tensor or 8-bit PNG")
    p.add_argument("--mean", type=_csv(float), default=[0.0], help="PNG normalization mean(s)")
    p.add_argument("--std", type=_csv(float), default=[1.0], help="PNG normalization std(s)")


def _train_flags(p):
    p.add_argument("--data", type=Path, default=None, help="exported dataset dir (default: synthesize)")
    p.add_argument("--data-seed", type=int, default=0, help="master seed for the synthetic dataset")
    p.add_argument("--metric", default="cosine", help="similarity metric id")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--lr", dest="learning_rate", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=100, help="maximum epochs")
    p.add_argument("--patience", type=int, default=10, help="early-stopping patience (epochs)")
    p.add_argument("--taps", type=_csv(int), default=[1], help="filter-bank stages carrying NFP")
    p.add_argument("--backbone-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="nfp", description="Neighborhood feature pooling toolkit", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compute", help="affinity stack and pooled vector for one input", formatter_class=fmt)
    _input_flags(p)
    _layer_flags(p)
    _common(p)

    p = sub.add_parser("maps", help="per-neighbor similarity maps as grayscale PNGs", formatter_class=fmt)
    _input_flags(p)
    _layer_flags(p, dilation=15)
    p.add_argument("--batch-index", type=int, default=0, help="which batch element to render")
    _common(p)

    p = sub.add_parser("bench", help="time fast vs naive affinity paths", formatter_class=fmt)
    p.add_argument("--sizes", type=_csv(_size), default=[(1, 64, 64, 64)], help="comma list of BxCxHxW")
    p.add_argument("--metrics", type=_csv(), default=["cosine"], help="comma list of metric ids")
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions per cell")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--dilation", type=int, default=1)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", formatter_class=fmt)
    p.add_argument("--metric", action="append", default=None,
                   help="metric id (repeatable; 'all' for every metric); default: analytic-gradient metrics")
    p.add_argument("--trials", type=int, default=100, help="random vector pairs per metric")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error, metric gradients")
    p.add_argument("--layer-trials", type=int, default=20, help="random tensors for the nfp_backward check")
    p.add_argument("--layer-tolerance", type=float, default=1e-3, help="max relative error, nfp_backward")
    _common(p)

    p = sub.add_parser("sweep", help="train once per similarity metric", formatter_class=fmt)
    _train_flags(p)
    p.add_argument("--metrics", type=_csv(), default=None, help="comma list (default: analytic-gradient metrics)")
    p.add_argument("--all-metrics", action="store_true", help="sweep all 18 metrics")
    _common(p)

    p = sub.add_parser("placement", help="train with NFP at each stage and at all stages", formatter_class=fmt)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("dataset", help="synthetic texture dataset tools", formatter_class=fmt)
    p.add_argument("action", choices=["export"])
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--train", type=int, default=128, help="train samples per class")
    p.add_argument("--val", type=int, default=32, help="validation samples per class")
    p.add_argument("--test", type=int, default=32, help="test samples per class")
    _common(p)

    p = sub.add_parser("train-demo", help="train GAP-only and/or NFP+GAP models", formatter_class=fmt)
    _train_flags(p)
    p.add_argument("--baseline", action="store_true", help="run the GAP-only model")
    p.add_argument("--nfp", action="store_true", help="run the NFP+GAP model (both run if neither flag is given)")
    p.add_argument("--export-embeddings", action="store_true", help="write test embeddings as NPY")
    _common(p)

    p = sub.add_parser("list-metrics", help="print the metric registry", formatter_class=fmt)
    _common(p, out_required=False)
    parser.subcommands = dict(sub.choices)
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read --config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
        unknown = set(cfg) - set(vars(args)) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        # config supplies defaults; explicit flags still win
        parser.subcommands[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _load_input(args):
    path = Path(args.input)
    if path.suffix.lower() == ".npy":
        return read_npy(path)
    return load_image(path, mean=args.mean, std=args.std)


def _out(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_compute(args) -> int:
    x = _load_input(args)
    cfg = NfpConfig(args.radius, args.dilation, args.metric)
    stack = affinity_forward(x, cfg)
    pooled = nfp_pool(stack)
    out = _out(args)
    write_npy(stack, out / "affinity.npy")
    write_npy(pooled.astype(np.float32), out / "pooled.npy")
    s = np.asarray(stack, dtype=np.float64)
    per_neighbor = [
        {"index": n, "offset": [dy, dx], "min": float(s[:, n].min()), "max": float(s[:, n].max())}
        for n, (dy, dx) in enumerate(neighbor_offsets(cfg.radius, cfg.dilation))
    ]
    write_json({
        "input": str(args.input),
        "input_shape": list(x.shape),
        "config": cfg.to_dict(),
        "stack_shape": list(stack.shape),
        "pooled_shape": list(pooled.shape),
        "per_neighbor": per_neighbor,
        "meta": meta(),
    }, out / "summary.json")
    return EXIT_OK


def cmd_maps(args) -> int:
    x = _load_input(args)
    cfg = NfpConfig(args.radius, args.dilation, args.metric)
    _, _, h, w = x.shape
    if min(h, w) < cfg.span:
        raise NfpError(
            f"input {h}x{w} too small for r={cfg.radius}, D={cfg.dilation}: "
            f"needs at least {cfg.span}x{cfg.span}"
        )
    if not 0 <= args.batch_index < x.shape[0]:
        raise NfpError(f"--batch-index {args.batch_index} outside batch of {x.shape[0]}")
    stack = np.asarray(affinity_forward(x, cfg), dtype=np.float64)[args.batch_index]
    out = _out(args)
    entries = []
    for n, (dy, dx) in enumerate(neighbor_offsets(cfg.radius)):
        m = stack[n]
        lo, hi = float(m.min()), float(m.max())
        degenerate = hi <= lo
        if degenerate:
            print(f"warning: map {n} ({dy},{dx}) is constant; writing mid-gray", file=sys.stderr)
            norm = np.full_like(m, 0.5)
        else:
            norm = (m - lo) / (hi - lo)
        name = f"n_{dy}_{dx}.png"
        write_gray_png(norm, out / name)
        entries.append({"file": name, "offset": [dy * cfg.dilation, dx * cfg.dilation],
                        "min": lo, "max": hi, "degenerate": degenerate})
    write_json({"input": str(args.input), "config": cfg.to_dict(), "maps": entries, "meta": meta()},
               out / "maps.json")
    return EXIT_OK


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cmd_bench(args) -> int:
    if args.repeat < 1:
        raise NfpError("--repeat must be >= 1")
    rng = np.random.default_rng(args.seed)
    cells = []
    for size in args.sizes:
        x = rng.normal(size=size).astype(np.float32)
        for metric in args.metrics:
            cfg = NfpConfig(args.radius, args.dilation, metric)
            fast = np.asarray(affinity_forward(x, cfg), dtype=np.float64)
            naive = np.asarray(affinity_forward_naive(x, cfg), dtype=np.float64)
            diff = float(np.max(np.abs(fast - naive))) if fast.shape == naive.shape else float("inf")
            if not diff <= EQUIVALENCE_TOL:
                raise CorrectnessAlarm(
                    f"fast and naive paths disagree for size {size}, metric {metric}: max |diff| = {diff}"
                )
            cells.append({
                "size": list(size),
                "metric": metric,
                "max_abs_diff": diff,
                "fast_median_s": _median_time(lambda: affinity_forward(x, cfg), args.repeat),
                "naive_median_s": _median_time(lambda: affinity_forward_naive(x, cfg), args.repeat),
            })
    write_json({"radius": args.radius, "dilation": args.dilation, "repeat": args.repeat,
                "cells": cells, "meta": meta()}, _out(args) / "bench.json")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    requested = args.metric or list(M.ANALYTIC_METRIC_IDS)
    ids = list(M.METRIC_IDS) if "all" in requested else [M.get_metric(m).id for m in requested]
    out = _out(args)
    results, failed = [], []
    for i, metric in enumerate(ids):
        checks = [check_metric_gradient(metric, args.trials, args.tolerance, seed=args.seed + i)]
        if args.layer_trials > 0:
            checks.append(check_nfp_backward(metric, args.layer_trials, args.layer_tolerance, seed=args.seed + i))
        for c in checks:
            results.append(c.to_dict())
            if not c.passed:
                failed.append(c)
                stem = c.name.replace("[", "_").replace("]", "")
                for key, arr in c.worst.items():
                    write_npy(np.asarray(arr, dtype=np.float32).reshape(1, 1, 1, -1)
                              if np.ndim(arr) == 1 else np.asarray(arr, dtype=np.float32),
                              out / f"worst_{stem}_{key}.npy")
    write_json({"results": results, "passed": not failed, "meta": meta()}, out / "gradcheck.json")
    for c in failed:
        print(f"FAIL {c.name}: max relative error {c.max_error:.3e} >= {c.tolerance:.1e}", file=sys.stderr)
    return EXIT_VALIDATION if failed else EXIT_OK


def _train_config(args, **overrides):
    from .training import TrainConfig

    fields = dict(
        learning_rate=args.learning_rate, batch_size=args.batch_size, max_epochs=args.max_epochs,
        patience=args.patience, seed=args.seed, metric=M.get_metric(args.metric).id,
        taps=tuple(args.taps), radius=args.radius, dilation=args.dilation,
        backbone_seed=args.backbone_seed,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def _data(args):
    if args.data is not None:
        return load_dataset(args.data)
    return synth_dataset(default_texture_specs(), (128, 32, 32), master_seed=args.data_seed)


def cmd_train_demo(args) -> int:
    from .training import train

    run_baseline = args.baseline or not args.nfp
    run_nfp = args.nfp or not args.baseline
    data = _data(args)
    out = _out(args)
    summary = {}
    for name, flag, enabled in (("baseline", True, run_baseline), ("nfp", False, run_nfp)):
        if not enabled:
            continue
        model, report = train(_train_config(args, baseline=flag), data)
        write_json(report.to_dict(), out / f"report_{name}.json")
        if args.export_embeddings:
            emb = model.embed(model.features_for(data[2].images))
            write_array_npy(emb.astype(np.float32), out / f"embeddings_{name}.npy")
        summary[name] = {"test_accuracy": report.test_accuracy, "parameter_count": report.parameter_count,
                         "silhouette": report.silhouette}
    write_json({"runs": summary, "meta": meta()}, out / "summary.json")
    return EXIT_OK


def _write_sweep(result, out: Path):
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    for key, rep in result.reports.items():
        write_json(rep.to_dict(), reports / f"{key}.json")
    write_json({"summary": result.summary, "meta": meta()}, out / "summary.json")


def cmd_sweep(args) -> int:
    from .sweeps import metric_sweep

    metrics = None if args.metrics is None else [M.get_metric(m).id for m in args.metrics]
    result = metric_sweep(_train_config(args), _data(args), metrics=metrics, include_all=args.all_metrics)
    _write_sweep(result, _out(args))
    return EXIT_OK


def cmd_placement(args) -> int:
    from .sweeps import placement_sweep

    result = placement_sweep(_train_config(args), _data(args))
    _write_sweep(result, _out(args))
    return EXIT_OK


def cmd_dataset(args) -> int:
    specs = default_texture_specs(args.size)
    sets = synth_dataset(specs, (args.train, args.val, args.test), master_seed=args.seed)
    export_dataset(sets, _out(args), specs=specs, master_seed=args.seed)
    return EXIT_OK


def cmd_list_metrics(args) -> int:
    rows = [{
        "id": m.id, "name": m.name, "category": m.category, "negated_distance": m.negated_distance,
        "has_analytic_gradient": m.has_analytic_gradient, "epsilon": m.epsilon,
        "uses_distribution": m.uses_distribution, "provisional": m.provisional,
    } for m in M.list_metrics()]
    if args.out is not None:
        write_json({"metrics": rows}, _out(args) / "metrics.json")
    else:
        for r in rows:
            flags = " ".join(k for k in ("negated_distance", "has_analytic_gradient", "provisional") if r[k])
            print(f"{r['id']:<14} cat{r['category']}  {flags}")
    return EXIT_OK


COMMANDS = {
    "compute": cmd_compute,
    "maps": cmd_maps,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "placement": cmd_placement,
    "dataset": cmd_dataset,
    "train-demo": cmd_train_demo,
    "list-metrics": cmd_list_metrics,
}


def main(argv=None) -> int:
    try:
        args = _parse(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except CorrectnessAlarm as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (NfpError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
