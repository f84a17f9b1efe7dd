"""Command-line entry point: ``stum {train,eval,ablate,bench,synth,gradcheck}``."""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

from .checkpoint import load_into, save_checkpoint
from .config import RunConfig, load_config, write_resolved
from .data import FrameSeries, TrafficGraph, load_dataset, prepare, synth_generate, write_edges, write_flatbin, write_flow_csv
from .errors import MissingGraph, StumError
from .evaluation import benchmark, evaluate, export_artifacts
from .gradcheck import run_suite
from .model import build_model, param_report
from .trainer import train, write_history

log = logging.getLogger("stum")

ABLATION_AXES = {"mlrf": "num_mlrf", "astuc": "astucs_per_block", "embed": "embed_dim"}
GRADCHECK_TOL = 1e-4


def thread_limit(threads: int):
    """Cap BLAS threads; 0 leaves the library default."""
    if threads <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def load_data(cfg: RunConfig) -> tuple[FrameSeries, TrafficGraph | None]:
    if cfg.data.synthetic:
        return synth_generate(cfg.synth)
    expected = None
    if cfg.data.expected_nodes > 0:
        expected = (cfg.data.expected_nodes, cfg.data.expected_frames)
    return load_dataset(cfg.data.path, cfg.data.graph or None, cfg.data.format, expected)


def _require_graph(cfg: RunConfig, graph) -> None:
    if cfg.model.backbone.uses_adjacency and graph is None:
        raise MissingGraph(f"backbone {cfg.model.backbone.kind!r} needs data.graph (an edges file)")


def _horizons(text: str | None, cfg: RunConfig) -> None:
    if text:
        cfg.run.horizons = [int(k) for k in text.split(",") if k.strip()]


def _prepare_run(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "out", None):
        cfg.run.out = args.out
    _horizons(getattr(args, "horizons", None), cfg)
    cfg = cfg.resolved()
    cfg.validate()
    return cfg


def _train_one(cfg: RunConfig, series, graph):
    data = prepare(series)
    model = build_model(cfg.model, data.nodes, data.channels)
    result = train(model, data, graph, cfg.train)
    return model, data, result


def cmd_train(args) -> int:
    cfg = _prepare_run(args)
    series, graph = load_data(cfg)
    _require_graph(cfg, graph)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    with thread_limit(cfg.run.threads):
        model, data, result = _train_one(cfg, series, graph)
    write_resolved(cfg, out)
    write_history(out / "history.csv", result.history)
    save_checkpoint(model, out / "checkpoint", {
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
        "stop_reason": result.stop_reason,
        "norm_mean": data.stats.mean.tolist(),
        "norm_std": data.stats.std.tolist(),
    })
    print(f"trained {result.steps} steps, best epoch {result.best_epoch}, "
          f"val MAE {result.best_val_mae:.4f} ({result.stop_reason}); outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _prepare_run(args)
    series, graph = load_data(cfg)
    _require_graph(cfg, graph)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare(series)
    model = build_model(cfg.model, data.nodes, data.channels)
    load_into(model, args.checkpoint or out / "checkpoint")
    model.eval()
    with thread_limit(cfg.run.threads):
        val = evaluate(model, data.val, data.stats, cfg.run.horizons, graph, cfg.train.batch_size)
        test = evaluate(model, data.test, data.stats, cfg.run.horizons, graph, cfg.train.batch_size)
        export_artifacts(model, data.test, data.stats, out, graph, cfg.run.horizons,
                         cfg.train.batch_size, report=False)
    write_resolved(cfg, out)
    test.write(out, "report")
    val.write(out, "val_report")
    print(f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE%':>8}")
    for row in test.rows:
        print(f"{row.horizon:>8} {row.mae:10.4f} {row.rmse:10.4f} {100 * row.mape:8.2f}")
    return 0


def _sweep_configs(cfg: RunConfig, axis: str | None, values: list[int]):
    if axis is None:
        return [("configured", cfg)]
    field_name = ABLATION_AXES[axis]
    runs = []
    for value in sorted(values):
        run = copy.deepcopy(cfg)
        setattr(run.model, field_name, value)
        run.validate()
        runs.append((f"{axis}={value}", run))
    return runs


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_ablate(args) -> int:
    cfg = _prepare_run(args)
    series, graph = load_data(cfg)
    _require_graph(cfg, graph)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("--values is empty")
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    header = ["value", "mae", "rmse", "mape", "trainable_params", "seconds_per_step"]
    rows = []
    with thread_limit(cfg.run.threads):
        for label, run in _sweep_configs(cfg, args.axis, values):
            model, data, result = _train_one(run, series, graph)
            avg = evaluate(model, data.test, data.stats, run.run.horizons, graph, run.train.batch_size).row("avg")
            value = getattr(run.model, ABLATION_AXES[args.axis])
            rows.append([value, repr(avg.mae), repr(avg.rmse), repr(avg.mape),
                         param_report(model)["trainable_count"], f"{result.seconds_per_step:.6f}"])
            log.info("%s: MAE %.4f", label, avg.mae)
    _write_table(out / f"ablate_{args.axis}.csv", header, rows)
    print(" ".join(f"{h:>16}" for h in header))
    for r in rows:
        print(" ".join(f"{str(v)[:16]:>16}" for v in r))
    return 0


def cmd_bench(args) -> int:
    cfg = _prepare_run(args)
    series, graph = load_data(cfg)
    _require_graph(cfg, graph)
    values = [int(v) for v in (args.values or "").split(",") if v.strip()]
    if args.axis and not values:
        raise ValueError("--axis needs --values")
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    data = prepare(series)
    configs = [(label, run.model) for label, run in _sweep_configs(cfg, args.axis, values)]
    with thread_limit(cfg.run.threads):
        rows = benchmark(configs, data, graph, cfg.train, steps=args.steps)
    header = ["label", "trainable_params", "dense_equivalent", "median_step_seconds", "steps"]
    table = [[r.label, r.trainable_params, r.dense_equivalent, f"{r.median_step_seconds:.6f}", r.steps] for r in rows]
    _write_table(out / "bench.csv", header, table)
    for r in table:
        print(f"{r[0]:>14}  params {r[1]:>9}  dense {r[2]:>10}  {float(r[3]) * 1000:8.1f} ms/step")
    return 0


def cmd_synth(args) -> int:
    cfg = _prepare_run(args)
    series, graph = synth_generate(cfg.synth)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        data_path = out / "flow.csv"
        write_flow_csv(data_path, series)
    else:
        data_path = out / "flow.bin"
        write_flatbin(data_path, series)
    write_edges(out / "edges.csv", graph)
    write_resolved(cfg, out)
    print(f"wrote {data_path} (T={series.frames}, N={series.nodes}, C={series.channels}) and {out / 'edges.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed)
    worst = max(results.values())
    for name, err in results.items():
        flag = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{name:32s} {err:.3e}  {flag}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return 0 if worst < GRADCHECK_TOL else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stum", description="Spatio-temporal unitized traffic forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, horizons=False):
        p.add_argument("--config", help="flat 'section.key = value' file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", help="run directory (overrides run.out)")
        if horizons:
            p.add_argument("--horizons", help="comma-separated horizon steps, e.g. 3,6,12")
        return p

    common(sub.add_parser("train", help="train a model and write a checkpoint")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"), horizons=True)
    p.add_argument("--checkpoint", help="checkpoint prefix (default: <out>/checkpoint)")
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("ablate", help="train once per value along one axis"), horizons=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 8,12,16")
    p.set_defaults(func=cmd_ablate)
    p = common(sub.add_parser("bench", help="median training-step time and parameter counts"))
    p.add_argument("--axis", choices=sorted(ABLATION_AXES))
    p.add_argument("--values", help="comma-separated values along --axis")
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_bench)
    p = common(sub.add_parser("synth", help="write a synthetic dataset"))
    p.add_argument("--format", choices=("flatbin", "csv"), default="flatbin")
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (StumError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
