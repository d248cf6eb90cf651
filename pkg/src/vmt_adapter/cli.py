"""Command-line entry point: ``vmt-adapter {params,train,grad-conflict,bench}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .analysis import BIN_EDGES, budget_report, conflict_histogram, efficiency_probe
from .archive import atomic_write_text, save_archive
from .autodiff import NumericError
from .config import VARIANTS, ConfigError, ExperimentConfig, dump_config, load_config
from .training import TrainingAborted, run_delta_up, run_training, smoothed

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
VMT_RATIO_LIMIT = 1.3

log = logging.getLogger("vmt_adapter")


def _csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _task_list(value: str) -> list[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    model_changes = {}
    training_changes = {}
    if args.variant is not None:
        model_changes["variant"] = args.variant
    if args.seed is not None:
        training_changes["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        training_changes["iterations"] = args.iterations
    if args.precision is not None:
        training_changes["precision"] = args.precision
    changes = {}
    if model_changes:
        changes["model"] = cfg.model.replace(**model_changes)
    if training_changes:
        changes["training"] = cfg.training.__class__(**{**cfg.training.__dict__, **training_changes})
    if getattr(args, "tasks", None) and args.command != "bench":
        tasks = _task_list(args.tasks)
        changes["tasks"] = tasks
        if cfg.task_weights is not None and len(cfg.task_weights) != len(tasks):
            changes["task_weights"] = None
    if args.out is not None:
        changes["output_dir"] = args.out
    if changes:
        cfg = cfg.replace(**changes)
    return cfg.validate()


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    report = budget_report(cfg.model)
    rows = report.rows()
    print(f"variant={report.variant} T={cfg.model.num_tasks} rho={cfg.model.rho} m={cfg.model.m}")
    print(f"{'part':<8} {'closed_form':>12} {'enumerated':>12}")
    for part, closed, enum in rows:
        print(f"{part:<8} {closed:>12,} {enum:>12,}")
    print(f"match={str(report.match).lower()}")
    if args.out is not None:
        out = Path(args.out)
        atomic_write_text(out / "budget.csv", _csv(rows, ["part", "closed_form", "enumerated"]))
        atomic_write_text(
            out / "budget.json",
            _json({"config": cfg.to_dict(), "variant": report.variant, "closed_form": report.closed_form_total, "enumerated": report.enumerated_total, "match": report.match}),
        )
    return EXIT_OK if report.match else EXIT_NUMERIC


def _load_baseline(path: str, tasks: list[str]) -> list[float]:
    data = json.loads(Path(path).read_text())
    metrics = data["metrics"]
    if [m["task"] for m in metrics] != tasks:
        raise ConfigError(f"--baseline: report tasks {[m['task'] for m in metrics]} differ from {tasks}")
    return [m["value"] for m in metrics]


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    tasks = list(cfg.tasks)
    result = run_training(cfg)
    if cfg.model.variant == "none":
        baseline, source = result.metrics, "self"
    elif args.baseline:
        baseline, source = _load_baseline(args.baseline, tasks), args.baseline
    else:
        log.info("training decoders-only baseline for delta_up")
        baseline, source = run_training(cfg, variant="none").metrics, "decoders-only (fresh)"
    history = result.total_history
    smooth = smoothed(history)
    report = {
        "config": cfg.to_dict(),
        "trainable_parameters": {"adapter": result.model.bank.num_trainable(), "decoders": sum(p.size for p in result.model.decoder_params().values())},
        "epochs": result.epochs,
        "smoothed_total_loss": {"start": float(smooth[0]), "end": float(smooth[-1])} if len(smooth) else None,
        "metrics": [{"task": t, "value": v} for t, v in zip(tasks, result.metrics)],
        "baseline": {"source": source, "metrics": [{"task": t, "value": v} for t, v in zip(tasks, baseline)]},
        "delta_up_percent": run_delta_up(tasks, result.metrics, baseline),
    }
    atomic_write_text(out / "config.json", dump_config(cfg) + "\n")
    atomic_write_text(out / "report.json", _json(report))
    atomic_write_text(out / "metrics.csv", _csv([(t, repr(v)) for t, v in zip(tasks, result.metrics)], ["task", "value"]))
    atomic_write_text(
        out / "losses.csv",
        _csv([(i + 1, *map(repr, row)) for i, row in enumerate(result.loss_history)], ["iteration", *tasks]),
    )
    save_archive(out / "checkpoint", result.model.state_dict())
    for t, v in zip(tasks, result.metrics):
        print(f"{t}: {v:.4f}")
    print(f"delta_up: {report['delta_up_percent']:+.2f}% vs {source}")
    return EXIT_OK


def cmd_grad_conflict(args) -> int:
    cfg = _resolve_config(args)
    report = conflict_histogram(cfg)
    out = Path(cfg.output_dir)
    rows = []
    summary = {"config": cfg.to_dict(), "variant": report.variant, "iterations": report.iterations, "bin_width": float(BIN_EDGES[1] - BIN_EDGES[0]), "pairs": []}
    for pair in report.pairs():
        counts = report.histogram(pair)
        name = f"{cfg.tasks[pair[0]]}-{cfg.tasks[pair[1]]}"
        for lo, hi, c in zip(BIN_EDGES[:-1], BIN_EDGES[1:], counts):
            rows.append((pair[0], pair[1], name, f"{lo:.2f}", f"{hi:.2f}", int(c)))
        summary["pairs"].append({"pair": list(pair), "name": name, "count": int(counts.sum()), "positive_fraction": report.positive_fraction(pair)})
        print(f"{name}: P(cos>0)={report.positive_fraction(pair):.3f} n={int(counts.sum())}")
    summary["positive_fraction"] = report.positive_fraction()
    summary["null_records"] = report.null_records()
    atomic_write_text(out / "conflict_histograms.csv", _csv(rows, ["task_i", "task_j", "pair", "bin_lo", "bin_hi", "count"]))
    atomic_write_text(
        out / "conflict_records.csv",
        _csv([(r.iteration, *r.pair, "" if r.cos_phi is None else repr(r.cos_phi), repr(r.taylor_delta), repr(r.eta)) for r in report.records], ["iteration", "task_i", "task_j", "cos_phi", "taylor_delta", "eta"]),
    )
    atomic_write_text(out / "conflict_summary.json", _json(summary))
    print(f"overall P(cos>0)={summary['positive_fraction']:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    try:
        counts = [int(t) for t in _task_list(args.tasks or "1,2,4,8")]
    except ValueError:
        raise ConfigError(f"--tasks: bench expects task counts like 1,2,4,8, got {args.tasks!r}") from None
    if not counts or min(counts) < 1:
        raise ConfigError("--tasks: task counts must be >= 1")
    variants = [args.variant] if args.variant and args.variant != "none" else ["multiple", "shared", "vmt", "lite"]
    rows = efficiency_probe(cfg.model, counts, variants, batch_size=cfg.training.batch_size, repeats=args.repeats)
    print(f"{'variant':<9} {'T':>3} {'invocations':>11} {'wall_ms':>9} {'overhead_ms':>11}")
    for r in rows:
        print(f"{r.variant:<9} {r.num_tasks:>3} {r.invocations:>11} {1e3 * r.wall_time:>9.2f} {1e3 * r.adapter_overhead:>11.2f}")
    table = [(r.variant, r.num_tasks, r.invocations, repr(r.wall_time), repr(r.adapter_overhead)) for r in rows]
    summary = {"rows": [r.__dict__ for r in rows]}
    vmt = {r.num_tasks: r.wall_time for r in rows if r.variant == "vmt"}
    if len(vmt) > 1:
        ratio = vmt[max(vmt)] / vmt[min(vmt)]
        summary["vmt_ratio"] = {"t_max": max(vmt), "t_min": min(vmt), "ratio": ratio, "limit": VMT_RATIO_LIMIT, "pass": ratio <= VMT_RATIO_LIMIT}
        print(f"vmt wall ratio T={max(vmt)}/T={min(vmt)}: {ratio:.3f} pass={str(ratio <= VMT_RATIO_LIMIT).lower()}")
    out = Path(cfg.output_dir)
    atomic_write_text(out / "efficiency.csv", _csv(table, ["variant", "T", "invocations", "wall_time_s", "adapter_overhead_s"]))
    atomic_write_text(out / "efficiency.json", _json(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config (defaults to the built-in desk config)")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--seed", type=int)
    common.add_argument("--tasks", help="comma-separated task names (bench: task counts)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))

    parser = argparse.ArgumentParser(prog="vmt-adapter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("params", parents=[common], help="closed-form vs enumerated trainable parameter counts")
    train = sub.add_parser("train", parents=[common], help="multi-task training run")
    train.add_argument("--iterations", type=int)
    train.add_argument("--baseline", help="report.json of a baseline run used for delta_up")
    gc = sub.add_parser("grad-conflict", parents=[common], help="gradient conflict histograms")
    gc.add_argument("--iterations", type=int)
    bench = sub.add_parser("bench", parents=[common], help="encoder invocations and wall time versus task count")
    bench.add_argument("--repeats", type=int, default=20)
    return parser


COMMANDS = {"params": cmd_params, "train": cmd_train, "grad-conflict": cmd_grad_conflict, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numeric failure at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
