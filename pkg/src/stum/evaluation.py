"""Forecast metrics, per-horizon evaluation, artifact export and step timing."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import FrameSeries, NormStats, PreparedData, TrafficGraph, make_windows
from .errors import EmptyObservationSet
from .model import StumModel, param_report
from .trainer import TrainConfig, make_optimizer, mae_loss, predict_split


@dataclass
class Metrics:
    mae: float
    rmse: float
    mape: float  # a fraction, not percent


def metrics(truth, pred, observed=None, mape_eps: float = 1e-3) -> Metrics:
    """MAE, RMSE and MAPE over the observed entries.

    ``observed`` is an optional boolean mask; MAPE further drops entries whose
    truth is smaller than ``mape_eps`` in magnitude.
    """
    x = np.asarray(truth, dtype=np.float64).reshape(-1)
    x_hat = np.asarray(pred, dtype=np.float64).reshape(-1)
    if x.shape != x_hat.shape:
        raise ValueError(f"truth has {x.size} entries, prediction {x_hat.size}")
    omega = np.ones(x.size, dtype=bool) if observed is None else np.asarray(observed, bool).reshape(-1)
    if not omega.any():
        raise EmptyObservationSet("no observed entries")
    err = x[omega] - x_hat[omega]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = omega & (np.abs(x) >= mape_eps)
    if not keep.any():
        raise EmptyObservationSet("every observed truth is below mape_eps")
    mape = float(np.mean(np.abs((x[keep] - x_hat[keep]) / x[keep])))
    return Metrics(mae, rmse, mape)


@dataclass
class HorizonRow:
    horizon: str  # "1".."h" or "avg"
    mae: float
    rmse: float
    mape: float


@dataclass
class EvalReport:
    rows: list[HorizonRow]
    windows: int
    seconds: float
    params: dict = field(default_factory=dict)

    def row(self, horizon) -> HorizonRow:
        for r in self.rows:
            if r.horizon == str(horizon):
                return r
        raise KeyError(horizon)

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "windows": self.windows,
            "seconds": self.seconds,
            "params": self.params,
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> None:
        out = Path(out_dir)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "mae", "rmse", "mape"])
            for r in self.rows:
                w.writerow([r.horizon, repr(r.mae), repr(r.rmse), repr(r.mape)])


def collect_predictions(
    model: StumModel,
    split: FrameSeries,
    stats: NormStats,
    graph: TrafficGraph | None,
    batch_size: int = 64,
):
    """De-normalized (origins, truth, prediction) for every window; arrays are (W, h, N, C)."""
    origins, truths, preds = [], [], []
    for batch, pred in predict_split(model, split, graph, batch_size):
        origins.append(batch.origin_indices)
        truths.append(stats.invert(batch.targets))
        preds.append(stats.invert(pred.astype(np.float64)))
    return np.concatenate(origins), np.concatenate(truths), np.concatenate(preds)


def evaluate(
    model: StumModel,
    split: FrameSeries,
    stats: NormStats,
    horizons=(3, 6, 12),
    graph: TrafficGraph | None = None,
    batch_size: int = 64,
    mape_eps: float = 1e-3,
) -> EvalReport:
    """Metrics at each requested horizon step plus an ``avg`` row.

    The ``avg`` row is the mean of the per-step metrics over steps 1..h.
    """
    started = time.perf_counter()
    h = model.config.horizon
    for k in horizons:
        if not 1 <= k <= h:
            raise ValueError(f"horizon {k} outside 1..{h}")
    _, truth, pred = collect_predictions(model, split, stats, graph, batch_size)
    per_step = [metrics(truth[:, k], pred[:, k], mape_eps=mape_eps) for k in range(h)]
    rows = [HorizonRow(str(k), **asdict(per_step[k - 1])) for k in horizons]
    rows.append(
        HorizonRow(
            "avg",
            float(np.mean([m.mae for m in per_step])),
            float(np.mean([m.rmse for m in per_step])),
            float(np.mean([m.mape for m in per_step])),
        )
    )
    return EvalReport(rows, int(truth.shape[0]), time.perf_counter() - started, param_report(model))


def _fmt(v: float) -> str:
    return repr(float(v))


def export_artifacts(
    model: StumModel,
    split: FrameSeries,
    stats: NormStats,
    out_dir: str | Path,
    graph: TrafficGraph | None = None,
    horizons=(3, 6, 12),
    batch_size: int = 64,
    report: bool = True,
) -> list[Path]:
    """Write predictions.csv, embeddings.csv and (unless ``report=False``) report.json into ``out_dir``.

    ``t`` in predictions.csv is the absolute frame index of the forecast origin
    (the last input frame). A ``channel`` column appears only when C > 1.
    Embeddings are the final MLRF state averaged over windows and time steps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    origins, truth, pred = collect_predictions(model, split, stats, graph, batch_size)
    channels = truth.shape[-1]
    pred_path = out / "predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "node", "channel", "horizon", "truth", "pred"] if channels > 1
                   else ["t", "node", "horizon", "truth", "pred"])
        for i, t in enumerate(origins):
            t_abs = int(t) + split.start
            for node in range(truth.shape[2]):
                for k in range(truth.shape[1]):
                    for c in range(channels):
                        lead = [t_abs, node, c, k + 1] if channels > 1 else [t_abs, node, k + 1]
                        w.writerow(lead + [_fmt(truth[i, k, node, c]), _fmt(pred[i, k, node, c])])

    paths = [pred_path]
    if model.config.use_mlrf:
        total = None
        count = 0
        with T.no_grad():
            for batch in make_windows(split, model.config.input_len, model.config.horizon, batch_size):
                hidden = model.run(batch.inputs.astype(model.dtype), graph, training=False).hidden.data
                part = hidden.astype(np.float64).sum(axis=(0, 1))  # (N, d)
                total = part if total is None else total + part
                count += hidden.shape[0] * hidden.shape[1]
        emb = total / count
        emb_path = out / "embeddings.csv"
        with open(emb_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node"] + [f"e{j}" for j in range(emb.shape[1])])
            for node, row in enumerate(emb):
                w.writerow([node] + [_fmt(v) for v in row])
        paths.append(emb_path)

    if report:
        rep = evaluate(model, split, stats, horizons, graph, batch_size)
        rep.seconds = 0.0  # keep the export byte-stable across reruns
        report_path = out / "report.json"
        report_path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        paths.append(report_path)
    return paths


@dataclass
class BenchRow:
    label: str
    trainable_params: int
    dense_equivalent: int
    median_step_seconds: float
    steps: int


def time_steps(model: StumModel, data: PreparedData, graph, cfg: TrainConfig, steps: int = 50) -> list[float]:
    """Wall-clock seconds of ``steps`` full optimizer steps (forward, backward, update)."""
    optimizer = make_optimizer(model, cfg)
    mcfg = model.config
    batches = list(make_windows(data.train, mcfg.input_len, mcfg.horizon, cfg.batch_size, cfg.seed))
    times = []
    model.train()
    for i in range(steps):
        batch = batches[i % len(batches)]
        x = batch.inputs.astype(model.dtype)
        y = batch.targets.astype(model.dtype)
        started = time.perf_counter()
        model.zero_grad()
        T.backward(mae_loss(model(x, graph, training=True), y))
        optimizer.step()
        times.append(time.perf_counter() - started)
    return times


def benchmark(configs, data: PreparedData, graph, cfg: TrainConfig | None = None,
              steps: int = 50, warmup: int = 2) -> list[BenchRow]:
    """Median step time and parameter counts for each ``(label, StumConfig)``."""
    from .model import build_model

    cfg = cfg or TrainConfig()
    rows = []
    for label, model_cfg in configs:
        model = build_model(model_cfg, data.nodes, data.channels)
        times = time_steps(model, data, graph, cfg, steps + warmup)[warmup:]
        report = param_report(model)
        rows.append(BenchRow(label, report["trainable_count"], report["dense_equivalent_count"],
                             statistics.median(times), len(times)))
    return rows
